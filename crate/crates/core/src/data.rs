//! Dataset ingestion and a deterministic synthetic task.
//!
//! Three sources are supported:
//!
//! * IDX image/label pairs (big-endian, magic 0x00000803 / 0x00000801),
//!   pixels scaled by 1/255;
//! * CSV with one sample per row, the label first and height*width pixel
//!   values after it, no header;
//! * `synth_longrange`, a generated task whose optimal solution needs
//!   long-range kernels: each image holds two bright dots separated by a
//!   third to a half of the image size, and the class is the quantized angle
//!   of the offset between them. A small local kernel cannot see both dots at
//!   once, so solving it exercises learnable element placement.
//!
//! All generators and loaders are pure functions of their arguments, and
//! datasets are immutable after construction.

use crate::error::{DclsError, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorND;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Brightness of the anchor dot in the synthetic task.
pub const SYNTH_PRIMARY: f64 = 1.0;
/// Brightness of the offset dot; above any noise level in use.
pub const SYNTH_SECONDARY: f64 = 0.6;
/// Default noise amplitude for the synthetic task.
pub const SYNTH_NOISE: f64 = 0.15;
/// Samples whose offset angle falls closer than this (radians) to a class
/// boundary are resampled, so every label is unambiguous. Keeps classes
/// recoverable from the rounded dot offset alone.
const SYNTH_EDGE_MARGIN: f64 = 0.1;

/// Labeled image set, images in [N, C, H, W] layout with values in [0, 1]
/// unless standardized.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    images: TensorND<T>,
    labels: Vec<usize>,
    classes: usize,
    source: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: TensorND<T>,
        labels: Vec<usize>,
        classes: usize,
        source: &str,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(DclsError::Dataset(format!(
                "images must be [N, C, H, W], got rank {}",
                images.rank()
            )));
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(DclsError::Dataset("dataset is empty".into()));
        }
        if labels.len() != n {
            return Err(DclsError::Dataset(format!(
                "{} images but {} labels",
                n,
                labels.len()
            )));
        }
        if classes == 0 {
            return Err(DclsError::Dataset("class count must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DclsError::Dataset(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        if !images.all_finite() {
            return Err(DclsError::Dataset("non-finite pixel value".into()));
        }
        Ok(Self { images, labels, classes, source: source.to_string() })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &TensorND<T> {
        &self.images
    }

    /// (channels, height, width) of one sample.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Flat pixel slice of sample `i`, length C*H*W.
    pub fn image(&self, i: usize) -> &[T] {
        let per = self.images.len() / self.len();
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// Deterministic split by a seeded permutation: the first part keeps
    /// `1 - val_fraction` of the samples, the second the rest.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(DclsError::Dataset(format!(
                "val fraction {val_fraction} outside [0, 1)"
            )));
        }
        let n = self.len();
        let n_val = ((n as f64) * val_fraction).round() as usize;
        let n_val = n_val.min(n.saturating_sub(1));
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let take = |ids: &[usize], tag: &str| -> Result<Dataset<T>> {
            let per = self.images.len() / n;
            let (c, h, w) = self.image_dims();
            let mut data = Vec::with_capacity(ids.len() * per);
            let mut labels = Vec::with_capacity(ids.len());
            for &i in ids {
                data.extend_from_slice(self.image(i));
                labels.push(self.labels[i]);
            }
            let images = TensorND::from_vec(&[ids.len(), c, h, w], data)?;
            Dataset::new(images, labels, self.classes, &format!("{}:{tag}", self.source))
        };
        let train = take(&order[..n - n_val], "train")?;
        let val = take(&order[n - n_val..], "val")?;
        Ok((train, val))
    }

    /// Shifts and scales each channel to zero mean and unit variance across
    /// the whole set. Channels with no spread are left centered only.
    pub fn standardize_per_channel(&mut self) {
        let (c, h, w) = self.image_dims();
        let n = self.len();
        let plane = h * w;
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for i in 0..n {
                let img = &self.images.data()[i * c * plane + ch * plane..][..plane];
                for v in img {
                    let x = v.as_f64();
                    sum += x;
                    sumsq += x * x;
                }
            }
            let count = (n * plane) as f64;
            let mean = sum / count;
            let var = (sumsq / count - mean * mean).max(0.0);
            let std = var.sqrt();
            let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
            let mean_t = T::from_f64_const(mean);
            let scale_t = T::from_f64_const(scale);
            for i in 0..n {
                let img = &mut self.images.data_mut()[i * c * plane + ch * plane..][..plane];
                for v in img {
                    *v = (*v - mean_t) * scale_t;
                }
            }
        }
    }
}

fn read_be_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| DclsError::Dataset(format!("truncated file while reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads a big-endian IDX image/label pair. Pixels are scaled by 1/255.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let mut imgf = BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_be_u32(&mut imgf, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DclsError::Dataset(format!(
            "bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )));
    }
    let count = read_be_u32(&mut imgf, "image count")? as usize;
    let rows = read_be_u32(&mut imgf, "row count")? as usize;
    let cols = read_be_u32(&mut imgf, "column count")? as usize;
    let mut bytes = vec![0u8; count * rows * cols];
    imgf.read_exact(&mut bytes)
        .map_err(|_| DclsError::Dataset("truncated image data".into()))?;

    let mut labf = BufReader::new(std::fs::File::open(labels_path)?);
    let magic = read_be_u32(&mut labf, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DclsError::Dataset(format!(
            "bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
        )));
    }
    let label_count = read_be_u32(&mut labf, "label count")? as usize;
    if label_count != count {
        return Err(DclsError::Dataset(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut label_bytes = vec![0u8; label_count];
    labf.read_exact(&mut label_bytes)
        .map_err(|_| DclsError::Dataset("truncated label data".into()))?;

    let inv = T::from_f64_const(1.0 / 255.0);
    let data: Vec<T> = bytes.iter().map(|b| T::from_index(*b as usize) * inv).collect();
    let images = TensorND::from_vec(&[count, 1, rows, cols], data)?;
    let labels: Vec<usize> = label_bytes.iter().map(|b| *b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(images, labels, classes, &format!("idx:{}", images_path.display()))
}

/// Writes one sample per row: label, then height*width pixels, 17 significant
/// digits so a reload is exact. Single-channel sets only.
pub fn save_csv<T: Scalar>(dataset: &Dataset<T>, path: &Path) -> Result<()> {
    let (c, _, _) = dataset.image_dims();
    if c != 1 {
        return Err(DclsError::Dataset(format!(
            "csv export supports single-channel sets, got {c} channels"
        )));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..dataset.len() {
        write!(out, "{}", dataset.labels()[i])?;
        for v in dataset.image(i) {
            write!(out, ",{:.16e}", v.as_f64())?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Loads the CSV layout written by [`save_csv`]: label first, then
/// height*width pixel values per row.
pub fn load_csv<T: Scalar>(path: &Path, height: usize, width: usize) -> Result<Dataset<T>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut labels = Vec::new();
    let mut data: Vec<T> = Vec::new();
    let expected = height * width;
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or("").trim();
        let label: usize = label_field.parse().map_err(|_| {
            DclsError::Dataset(format!(
                "row {}: label {label_field:?} is not a non-negative integer",
                lineno + 1
            ))
        })?;
        let mut count = 0usize;
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| {
                DclsError::Dataset(format!("row {}: non-numeric pixel {f:?}", lineno + 1))
            })?;
            data.push(T::from_f64_const(v));
            count += 1;
        }
        if count != expected {
            return Err(DclsError::Dataset(format!(
                "row {}: {count} pixels, expected {expected}",
                lineno + 1
            )));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DclsError::Dataset("csv file holds no samples".into()));
    }
    let n = labels.len();
    let images = TensorND::from_vec(&[n, 1, height, width], data)?;
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(images, labels, classes, &format!("csv:{}", path.display()))
}

/// Class of an integer dot offset: the angle bin index of atan2(dy, dx) with
/// `classes` equal bins over the full circle. (dy, dx) are in (row, column)
/// order.
pub fn offset_class(dy: i64, dx: i64, classes: usize) -> usize {
    let phi = (dy as f64).atan2(dx as f64);
    let unit = (phi + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
    ((unit * classes as f64).floor() as usize).min(classes - 1)
}

fn angle_clears_bin_edges(phi: f64, classes: usize) -> bool {
    let bin_width = 2.0 * std::f64::consts::PI / classes as f64;
    let unit = (phi + std::f64::consts::PI) / bin_width;
    let frac = unit - unit.floor();
    let dist = frac.min(1.0 - frac) * bin_width;
    dist >= SYNTH_EDGE_MARGIN
}

/// Two-dot angle task with the default noise amplitude.
pub fn synth_longrange<T: Scalar>(
    n: usize,
    size: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    synth_longrange_with_noise(n, size, classes, SYNTH_NOISE, seed)
}

/// Two-dot angle task. Each image has an anchor dot at brightness 1.0 and an
/// offset dot at 0.6; the offset length is uniform in [size/3, size/2] and
/// the class is the angle bin of the rounded offset, resampled away from bin
/// edges so labels follow from the pixels alone. Noise is uniform in
/// [0, noise) and never touches the two dots.
pub fn synth_longrange_with_noise<T: Scalar>(
    n: usize,
    size: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if size < 16 {
        return Err(DclsError::Dataset(format!("size {size} below the minimum of 16")));
    }
    if !(2..=16).contains(&classes) {
        return Err(DclsError::Dataset(format!("class count {classes} outside [2, 16]")));
    }
    if n == 0 {
        return Err(DclsError::Dataset("sample count must be positive".into()));
    }
    if !(0.0..SYNTH_SECONDARY).contains(&noise) {
        return Err(DclsError::Dataset(format!(
            "noise {noise} must sit in [0, {SYNTH_SECONDARY}) to keep the dots visible"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![T::zero(); n * size * size];
    let mut labels = Vec::with_capacity(n);
    let r_lo = size as f64 / 3.0;
    let r_hi = size as f64 / 2.0;

    for img in data.chunks_mut(size * size) {
        // Offset first: length, angle, rounded to the pixel grid, rejecting
        // draws whose rounded angle sits on a class boundary.
        let (dy, dx, label) = loop {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = rng.gen_range(r_lo..r_hi);
            let dx = (r * theta.cos()).round() as i64;
            let dy = (r * theta.sin()).round() as i64;
            let phi = (dy as f64).atan2(dx as f64);
            if angle_clears_bin_edges(phi, classes) {
                break (dy, dx, offset_class(dy, dx, classes));
            }
        };
        // Anchor anywhere that keeps both dots in bounds; every offset fits
        // because |dx|, |dy| <= size/2 < size.
        let x_lo = (-dx).max(0) as usize;
        let x_hi = (size as i64 - 1 - dx.max(0)) as usize;
        let y_lo = (-dy).max(0) as usize;
        let y_hi = (size as i64 - 1 - dy.max(0)) as usize;
        let x0 = rng.gen_range(x_lo..=x_hi);
        let y0 = rng.gen_range(y_lo..=y_hi);

        if noise > 0.0 {
            for v in img.iter_mut() {
                *v = T::from_f64_const(rng.gen_range(0.0..noise));
            }
        }
        img[y0 * size + x0] = T::from_f64_const(SYNTH_PRIMARY);
        let (y1, x1) = ((y0 as i64 + dy) as usize, (x0 as i64 + dx) as usize);
        img[y1 * size + x1] = T::from_f64_const(SYNTH_SECONDARY);
        labels.push(label);
    }

    let images = TensorND::from_vec(&[n, 1, size, size], data)?;
    Dataset::new(
        images,
        labels,
        classes,
        &format!("synth_longrange(n={n},size={size},classes={classes},noise={noise},seed={seed})"),
    )
}
