//! Versioned binary checkpoints: every parameter tensor, the optimizer state
//! including moment accumulators, the run's seed, and the configuration text
//! that produced the run. All numbers are little-endian; f64 payloads are
//! written bit-for-bit, so a save/load/save cycle produces byte-identical
//! files.
//!
//! Layout (version 1):
//!
//! ```text
//! magic  "DCLSCKPT"                              8 bytes
//! version u32                                    = 1
//! config  u64 length + UTF-8 bytes
//! epoch   u64
//! rng     seed u64, stream position u128
//! params  u64 count, then per entry:
//!         name (u64 + bytes), kind u8, rank u64, dims u64 each,
//!         values f64 each
//! optim   kind u8, base_lr/weight_decay/beta1/beta2/epsilon f64,
//!         step_count u64, then per entry: present u8,
//!         then first+second moment values f64 each when present
//! ```

use crate::error::{DclsError, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorND;
use crate::training::{Moments, Optimizer, OptimizerConfig, OptimizerKind, ParamKind,
                      ParamStore};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DCLSCKPT";
const VERSION: u32 = 1;

/// Run metadata carried alongside the tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Canonical configuration text of the run that wrote the file.
    pub config_text: String,
    /// Completed epoch count.
    pub epoch: u64,
    /// Master seed of the run.
    pub rng_seed: u64,
    /// Stream position for generators that expose one; zero when the run
    /// derives all randomness from (seed, epoch) instead.
    pub rng_word_pos: u128,
}

/// One parameter record as stored on disk.
#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub meta: CheckpointMeta,
    pub entries: Vec<CheckpointEntry>,
    pub optimizer: OptimizerConfig,
    pub step_count: u64,
}

fn kind_byte(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::Position => 1,
        ParamKind::Sigma => 2,
        ParamKind::Other => 3,
    }
}

fn kind_from_byte(b: u8) -> Result<ParamKind> {
    Ok(match b {
        0 => ParamKind::Weight,
        1 => ParamKind::Position,
        2 => ParamKind::Sigma,
        3 => ParamKind::Other,
        _ => return Err(DclsError::Checkpoint(format!("unknown parameter kind byte {b}"))),
    })
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DclsError::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("length checked")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("length checked")))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().expect("length checked")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("length checked")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u64(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| DclsError::Checkpoint(format!("{what} is not valid UTF-8")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serializes the store, optimizer, and metadata to `path`.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    optimizer: &Optimizer<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&meta.config_text);
    w.u64(meta.epoch);
    w.u64(meta.rng_seed);
    w.u128(meta.rng_word_pos);

    w.u64(store.len() as u64);
    for id in store.ids() {
        let e = store.entry(id);
        w.str(e.name());
        w.u8(kind_byte(e.kind()));
        w.u64(e.value().rank() as u64);
        for d in e.value().shape() {
            w.u64(*d as u64);
        }
        for v in e.value().data() {
            w.f64(v.as_f64());
        }
    }

    let cfg = optimizer.config();
    w.u8(match cfg.kind {
        OptimizerKind::Sgd => 0,
        OptimizerKind::AdamW => 1,
    });
    w.f64(cfg.base_lr);
    w.f64(cfg.weight_decay);
    w.f64(cfg.beta1);
    w.f64(cfg.beta2);
    w.f64(cfg.epsilon);
    w.u64(optimizer.step_count());
    for id in store.ids() {
        match optimizer.moments.get(id.index()).and_then(|m| m.as_ref()) {
            Some(m) => {
                w.u8(1);
                for v in m.first.data() {
                    w.f64(v.as_f64());
                }
                for v in m.second.data() {
                    w.f64(v.as_f64());
                }
            }
            None => w.u8(0),
        }
    }

    std::fs::write(path, &w.buf)?;
    Ok(())
}

/// Parses a checkpoint file without touching any live state.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(DclsError::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DclsError::Checkpoint(format!(
            "unsupported version {version}, this build reads {VERSION}"
        )));
    }
    let config_text = r.str("config text")?;
    let epoch = r.u64("epoch")?;
    let rng_seed = r.u64("rng seed")?;
    let rng_word_pos = r.u128("rng position")?;

    let count = r.u64("parameter count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name = r.str("parameter name")?;
        let kind = kind_from_byte(r.u8("parameter kind")?)?;
        let rank = r.u64("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("parameter dim")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f64("parameter value")?);
        }
        entries.push(CheckpointEntry { name, kind, shape, values, moments: None });
        let _ = i;
    }

    let kind = match r.u8("optimizer kind")? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::AdamW,
        b => return Err(DclsError::Checkpoint(format!("unknown optimizer kind byte {b}"))),
    };
    let optimizer = OptimizerConfig {
        kind,
        base_lr: r.f64("base lr")?,
        weight_decay: r.f64("weight decay")?,
        beta1: r.f64("beta1")?,
        beta2: r.f64("beta2")?,
        epsilon: r.f64("epsilon")?,
    };
    let step_count = r.u64("step count")?;
    for entry in entries.iter_mut() {
        if r.u8("moment flag")? == 1 {
            let len = entry.values.len();
            let mut first = Vec::with_capacity(len);
            for _ in 0..len {
                first.push(r.f64("first moment")?);
            }
            let mut second = Vec::with_capacity(len);
            for _ in 0..len {
                second.push(r.f64("second moment")?);
            }
            entry.moments = Some((first, second));
        }
    }
    if !r.done() {
        return Err(DclsError::Checkpoint("trailing bytes after checkpoint payload".into()));
    }
    Ok(CheckpointData {
        meta: CheckpointMeta { config_text, epoch, rng_seed, rng_word_pos },
        entries,
        optimizer,
        step_count,
    })
}

/// Copies checkpoint values into a store whose registration order, names,
/// kinds, and shapes match the file, and rebuilds the optimizer from the
/// stored state. The store is typically produced by building the same model
/// from the stored config.
pub fn apply_checkpoint<T: Scalar>(
    data: &CheckpointData,
    store: &mut ParamStore<T>,
    optimizer: &mut Optimizer<T>,
) -> Result<()> {
    if data.entries.len() != store.len() {
        return Err(DclsError::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            data.entries.len(),
            store.len()
        )));
    }
    for (id, entry) in store.ids().zip(&data.entries) {
        let e = store.entry(id);
        if e.name() != entry.name {
            return Err(DclsError::Checkpoint(format!(
                "parameter order mismatch: model has {:?}, file has {:?}",
                e.name(),
                entry.name
            )));
        }
        if e.kind() != entry.kind || e.value().shape() != entry.shape.as_slice() {
            return Err(DclsError::Checkpoint(format!(
                "parameter {:?} changed kind or shape since the checkpoint",
                entry.name
            )));
        }
    }
    for (id, entry) in store.ids().collect::<Vec<_>>().into_iter().zip(&data.entries) {
        for (v, src) in store.value_mut(id).data_mut().iter_mut().zip(&entry.values) {
            *v = T::from_f64_const(*src);
        }
    }
    *optimizer = Optimizer::new(data.optimizer.clone());
    optimizer.step_count = data.step_count;
    optimizer.moments = data
        .entries
        .iter()
        .map(|entry| {
            entry.moments.as_ref().map(|(first, second)| {
                let shape = entry.shape.clone();
                let first: Vec<T> = first.iter().map(|v| T::from_f64_const(*v)).collect();
                let second: Vec<T> = second.iter().map(|v| T::from_f64_const(*v)).collect();
                Moments {
                    first: TensorND::from_vec(&shape, first).expect("shape matches values"),
                    second: TensorND::from_vec(&shape, second).expect("shape matches values"),
                }
            })
        })
        .collect();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{default_groups, ParamGroup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn demo_store(seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, kind, shape) in [
            ("l1.weight", ParamKind::Weight, vec![3usize, 2]),
            ("l1.position0", ParamKind::Position, vec![3, 1, 4]),
            ("l1.sigma0", ParamKind::Sigma, vec![3, 1, 4]),
            ("head.bias", ParamKind::Other, vec![5]),
        ] {
            let mut t = TensorND::zeros(&shape);
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            store.add(name, kind, t).unwrap();
        }
        store
    }

    fn stepped_optimizer(store: &mut ParamStore<f64>) -> Optimizer<f64> {
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.01, 0.004));
        let groups: Vec<ParamGroup> = default_groups(store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            for id in store.ids().collect::<Vec<_>>() {
                for g in store.grad_mut(id).data_mut() {
                    *g = rng.gen_range(-0.5..0.5);
                }
            }
            opt.step(store, &groups).unwrap();
        }
        opt
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            config_text: "[run]\nseed = 7\n".into(),
            epoch: 12,
            rng_seed: 7,
            rng_word_pos: 0,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = demo_store(1);
        let opt = stepped_optimizer(&mut store);
        let p1 = dir.path().join("a.bin");
        save_checkpoint(&p1, &store, &opt, &meta()).unwrap();

        let data = load_checkpoint(&p1).unwrap();
        assert_eq!(data.meta, meta());
        assert_eq!(data.step_count, 3);

        // Apply onto a same-shaped store with different values, then save
        // again: the two files must be byte-identical.
        let mut store2 = demo_store(99);
        let mut opt2 = Optimizer::new(OptimizerConfig::sgd(1.0, 0.0));
        apply_checkpoint(&data, &mut store2, &mut opt2).unwrap();
        for (a, b) in store.ids().zip(store2.ids()) {
            let (va, vb) = (store.value(a), store2.value(b));
            for (x, y) in va.data().iter().zip(vb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let p2 = dir.path().join("b.bin");
        save_checkpoint(&p2, &store2, &opt2, &data.meta).unwrap();
        let bytes1 = std::fs::read(&p1).unwrap();
        let bytes2 = std::fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2, "save/load/save must be byte-identical");
    }

    #[test]
    fn sgd_checkpoints_have_no_moments() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = demo_store(2);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.01));
        let groups = default_groups(&store);
        opt.step(&mut store, &groups).unwrap();
        let path = dir.path().join("sgd.bin");
        save_checkpoint(&path, &store, &opt, &meta()).unwrap();
        let data = load_checkpoint(&path).unwrap();
        assert!(data.entries.iter().all(|e| e.moments.is_none()));
        assert_eq!(data.optimizer.kind, OptimizerKind::Sgd);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = demo_store(3);
        let opt = stepped_optimizer(&mut store);
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &store, &opt, &meta()).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.bin");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(load_checkpoint(&bad_magic).unwrap_err().to_string().contains("magic"));

        let truncated = dir.path().join("trunc.bin");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&truncated)
            .unwrap_err()
            .to_string()
            .contains("truncated"));

        let padded = dir.path().join("padded.bin");
        let mut b = bytes.clone();
        b.push(0);
        std::fs::write(&padded, &b).unwrap();
        assert!(load_checkpoint(&padded)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }

    #[test]
    fn apply_rejects_mismatched_models() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = demo_store(4);
        let opt = stepped_optimizer(&mut store);
        let path = dir.path().join("d.bin");
        save_checkpoint(&path, &store, &opt, &meta()).unwrap();
        let data = load_checkpoint(&path).unwrap();

        let mut small = ParamStore::<f64>::new();
        small.add("l1.weight", ParamKind::Weight, TensorND::zeros(&[3, 2])).unwrap();
        let mut opt2 = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0));
        assert!(apply_checkpoint(&data, &mut small, &mut opt2).is_err());

        let renamed = demo_store(4);
        let mut bad = ParamStore::<f64>::new();
        for id in renamed.ids().collect::<Vec<_>>() {
            let e = renamed.entry(id);
            let name = if e.name() == "head.bias" { "head.other" } else { e.name() };
            bad.add(name, e.kind(), e.value().clone()).unwrap();
        }
        assert!(apply_checkpoint(&data, &mut bad, &mut opt2).is_err());
    }
}
