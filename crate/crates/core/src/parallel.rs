//! Deterministic worker pool over pre-split mutable chunks.
//!
//! Work is partitioned round-robin by chunk index, so the value written into
//! each chunk depends only on that chunk's index, never on the thread count.
//! Results are therefore bit-identical for any `--threads` setting.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the global worker count. Zero is treated as one.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Runs `f(chunk_index, chunk)` over every chunk, spreading chunks across the
/// configured worker count. `f` must derive its output from the chunk index
/// alone so scheduling cannot affect results.
pub fn for_each_chunk<C, F>(chunks: Vec<(usize, C)>, f: F)
where
    C: Send,
    F: Fn(usize, C) + Sync,
{
    let t = threads().min(chunks.len()).max(1);
    if t == 1 {
        for (i, c) in chunks {
            f(i, c);
        }
        return;
    }
    let mut buckets: Vec<Vec<(usize, C)>> = (0..t).map(|_| Vec::new()).collect();
    for (pos, item) in chunks.into_iter().enumerate() {
        buckets[pos % t].push(item);
    }
    std::thread::scope(|s| {
        for bucket in buckets {
            let f = &f;
            s.spawn(move || {
                for (i, c) in bucket {
                    f(i, c);
                }
            });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_do_not_depend_on_thread_count() {
        let run = |threads: usize| {
            set_threads(threads);
            let mut out = vec![0u64; 64];
            let chunks: Vec<(usize, &mut [u64])> =
                out.chunks_mut(1).enumerate().collect();
            for_each_chunk(chunks, |i, c| {
                c[0] = (i as u64).wrapping_mul(0x9e3779b97f4a7c15);
            });
            set_threads(1);
            out
        };
        assert_eq!(run(1), run(4));
        assert_eq!(run(1), run(7));
    }
}
