//! Output artifacts: CSV tables with a config-hash comment line, binary PGM
//! images of kernels, and the small statistics used in reports. Everything
//! here formats deterministically so repeated runs produce identical bytes.

use anyhow::{bail, Context, Result};
use dcls_core::tensor::TensorND;
use std::io::Write;
use std::path::Path;

/// Writes a CSV file: `# config_hash=…`, a header row, then the data rows.
pub fn write_csv(path: &Path, config_hash: u64, header: &str, rows: &[String]) -> Result<()> {
    let mut text = format!("# config_hash={config_hash:016x}\n{header}\n");
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Full-precision float formatting shared by all CSV emitters.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a 2-D tensor as a binary (P5) PGM, min-max scaled to 0..=255.
/// A constant image maps to all zeros.
pub fn write_pgm(path: &Path, image: &TensorND<f64>) -> Result<()> {
    if image.rank() != 2 {
        bail!("pgm output needs a rank-2 tensor, got rank {}", image.rank());
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let data = image.data();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(data.len());
    for &v in data {
        let b = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
        bytes.push(b);
    }
    let mut out = Vec::new();
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend_from_slice(&bytes);
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Two-sample t-statistic with pooled variance. Returns None when either
/// sample has fewer than two points or the pooled variance is zero.
pub fn pooled_t_statistic(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (a.len(), b.len());
    if na < 2 || nb < 2 {
        return None;
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ss = |xs: &[f64], m: f64| xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    let pooled = (ss(a, ma) + ss(b, mb)) / (na + nb - 2) as f64;
    if pooled <= 0.0 {
        return None;
    }
    let denom = (pooled * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
    Some((ma - mb) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_statistic_matches_hand_computed_value() {
        // Means 2 and 3, unit sample variances: t = -1 / sqrt(2/3).
        let t = pooled_t_statistic(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((t - (-1.224744871391589)).abs() < 1e-12, "t = {t}");
    }

    #[test]
    fn t_statistic_is_none_for_single_seeds() {
        assert!(pooled_t_statistic(&[1.0], &[2.0]).is_none());
        assert!(pooled_t_statistic(&[1.0, 1.0], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn pgm_bytes_are_min_max_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.pgm");
        let img = TensorND::from_vec(&[2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        write_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64]);
    }

    #[test]
    fn csv_carries_hash_comment_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, 0xabcd, "a,b", &["1,2".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# config_hash=000000000000abcd\na,b\n1,2\n");
    }
}
