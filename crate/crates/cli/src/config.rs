//! Run configuration: a flat, diff-friendly text format with sections and
//! `key = value` lines. Every field has a default, unknown sections or keys
//! are rejected, and a config survives a serialize/parse round trip exactly.
//! The canonical text is also what gets hashed into output artifacts and
//! stored in checkpoints.

use anyhow::{anyhow, bail, Context, Result};
use dcls_core::interp::InterpFamily;
use dcls_core::training::OptimizerKind;

/// Architecture of the model the CLI builds: a pointwise stem, `blocks`
/// repeats of (DCLS depthwise conv + relu), window pooling and a pointwise
/// mix between blocks, then global average pooling into a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    /// Learnable elements per kernel (m).
    pub kernel_count: usize,
    /// Grid extent per axis; one value means a square grid. Must be odd so
    /// stride-1 centered padding preserves the image size.
    pub dilated_kernel_size: Vec<usize>,
    pub interpolation: InterpFamily,
    /// Share position and sigma storage across the DCLS layers.
    pub sync_positions: bool,
    /// Window pooling between blocks; 0 disables it.
    pub pool_window: usize,
    /// Average pooling applied to the raw input before the stem; 1 disables
    /// it. Halving the geometry early keeps long-range offsets within reach
    /// of positions that start near the kernel center.
    pub stem_pool: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            blocks: 2,
            kernel_count: 8,
            dilated_kernel_size: vec![23],
            interpolation: InterpFamily::Gauss,
            sync_positions: false,
            pool_window: 2,
            stem_pool: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for position and sigma groups.
    pub lr_scale_positions: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            base_lr: 0.01,
            weight_decay: 0.0,
            lr_scale_positions: 5.0,
            epochs: 10,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Idx,
    Csv,
}

impl DataSource {
    fn name(self) -> &'static str {
        match self {
            DataSource::Synth => "synth",
            DataSource::Idx => "idx",
            DataSource::Csv => "csv",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "synth" => DataSource::Synth,
            "idx" => DataSource::Idx,
            "csv" => DataSource::Csv,
            _ => bail!("unknown data source {s:?} (expected synth, idx, or csv)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth_n: usize,
    pub synth_size: usize,
    pub synth_classes: usize,
    pub synth_noise: f64,
    pub images_path: String,
    pub labels_path: String,
    pub csv_path: String,
    pub csv_height: usize,
    pub csv_width: usize,
    pub val_fraction: f64,
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            synth_n: 2000,
            synth_size: 32,
            synth_classes: 4,
            synth_noise: 0.15,
            images_path: String::new(),
            labels_path: String::new(),
            csv_path: String::new(),
            csv_height: 28,
            csv_width: 28,
            val_fraction: 0.2,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub threads: usize,
    pub out_dir: String,
    /// Seeds used by the interpolation comparison command.
    pub compare_seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, threads: 1, out_dir: "out".into(), compare_seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerSection,
    pub data: DataConfig,
    pub run: RunSection,
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("expected true or false, got {v:?}"),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, what: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| anyhow!("bad {what} element {p:?}")))
        .collect()
}

fn join_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match (section, key) {
            ("model", "channels") => self.model.channels = v.parse()?,
            ("model", "blocks") => self.model.blocks = v.parse()?,
            ("model", "kernel_count") => self.model.kernel_count = v.parse()?,
            ("model", "dilated_kernel_size") => {
                self.model.dilated_kernel_size = parse_list(v, "kernel size")?
            }
            ("model", "interpolation") => {
                self.model.interpolation = InterpFamily::parse(v)
                    .ok_or_else(|| anyhow!("unknown interpolation {v:?}"))?
            }
            ("model", "sync_positions") => self.model.sync_positions = parse_bool(v)?,
            ("model", "pool_window") => self.model.pool_window = v.parse()?,
            ("model", "stem_pool") => self.model.stem_pool = v.parse()?,

            ("optimizer", "kind") => {
                self.optimizer.kind = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adamw" => OptimizerKind::AdamW,
                    _ => bail!("unknown optimizer kind {v:?} (expected sgd or adamw)"),
                }
            }
            ("optimizer", "base_lr") => self.optimizer.base_lr = v.parse()?,
            ("optimizer", "weight_decay") => self.optimizer.weight_decay = v.parse()?,
            ("optimizer", "lr_scale_positions") => {
                self.optimizer.lr_scale_positions = v.parse()?
            }
            ("optimizer", "epochs") => self.optimizer.epochs = v.parse()?,
            ("optimizer", "batch_size") => self.optimizer.batch_size = v.parse()?,

            ("data", "source") => self.data.source = DataSource::parse(v)?,
            ("data", "synth_n") => self.data.synth_n = v.parse()?,
            ("data", "synth_size") => self.data.synth_size = v.parse()?,
            ("data", "synth_classes") => self.data.synth_classes = v.parse()?,
            ("data", "synth_noise") => self.data.synth_noise = v.parse()?,
            ("data", "images_path") => self.data.images_path = v.to_string(),
            ("data", "labels_path") => self.data.labels_path = v.to_string(),
            ("data", "csv_path") => self.data.csv_path = v.to_string(),
            ("data", "csv_height") => self.data.csv_height = v.parse()?,
            ("data", "csv_width") => self.data.csv_width = v.parse()?,
            ("data", "val_fraction") => self.data.val_fraction = v.parse()?,
            ("data", "standardize") => self.data.standardize = parse_bool(v)?,

            ("run", "seed") => self.run.seed = v.parse()?,
            ("run", "threads") => self.run.threads = v.parse()?,
            ("run", "out_dir") => self.run.out_dir = v.to_string(),
            ("run", "compare_seeds") => self.run.compare_seeds = parse_list(v, "seed")?,

            _ => bail!("unknown key {section}.{key}"),
        }
        Ok(())
    }

    /// Parses the sectioned text format. `#` starts a comment; blank lines
    /// are skipped; keys outside a section or unknown anywhere are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {}: unterminated section header", lineno + 1))?
                    .trim();
                if !matches!(name, "model" | "optimizer" | "data" | "run") {
                    bail!("line {}: unknown section [{name}]", lineno + 1);
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", lineno + 1))?;
            let section = section
                .as_deref()
                .ok_or_else(|| anyhow!("line {}: key outside any section", lineno + 1))?;
            cfg.set(section, key.trim(), value.trim())
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(cfg)
    }

    /// Applies a `--set section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects section.key=value, got {assignment:?}"))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| anyhow!("--set key must be section.key, got {path:?}"))?;
        self.set(section.trim(), key.trim(), value)
            .with_context(|| format!("--set {assignment}"))
    }

    /// Canonical text: fixed section and key order. `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let d = &self.data;
        let r = &self.run;
        let okind = match o.kind {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        };
        format!(
            "[model]\n\
             channels = {}\n\
             blocks = {}\n\
             kernel_count = {}\n\
             dilated_kernel_size = {}\n\
             interpolation = {}\n\
             sync_positions = {}\n\
             pool_window = {}\n\
             stem_pool = {}\n\
             \n\
             [optimizer]\n\
             kind = {}\n\
             base_lr = {}\n\
             weight_decay = {}\n\
             lr_scale_positions = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             \n\
             [data]\n\
             source = {}\n\
             synth_n = {}\n\
             synth_size = {}\n\
             synth_classes = {}\n\
             synth_noise = {}\n\
             images_path = {}\n\
             labels_path = {}\n\
             csv_path = {}\n\
             csv_height = {}\n\
             csv_width = {}\n\
             val_fraction = {}\n\
             standardize = {}\n\
             \n\
             [run]\n\
             seed = {}\n\
             threads = {}\n\
             out_dir = {}\n\
             compare_seeds = {}\n",
            m.channels,
            m.blocks,
            m.kernel_count,
            join_list(&m.dilated_kernel_size),
            m.interpolation.name(),
            m.sync_positions,
            m.pool_window,
            m.stem_pool,
            okind,
            o.base_lr,
            o.weight_decay,
            o.lr_scale_positions,
            o.epochs,
            o.batch_size,
            d.source.name(),
            d.synth_n,
            d.synth_size,
            d.synth_classes,
            d.synth_noise,
            d.images_path,
            d.labels_path,
            d.csv_path,
            d.csv_height,
            d.csv_width,
            d.val_fraction,
            d.standardize,
            r.seed,
            r.threads,
            r.out_dir,
            join_list(&r.compare_seeds),
        )
    }

    /// Canonical text without `run.threads` and `run.out_dir`: the fields
    /// that steer where and how fast a run executes but never what it
    /// computes. This is what gets hashed and stored in checkpoints, so
    /// artifacts from the same semantic config are byte-identical no matter
    /// the output directory or worker count.
    pub fn semantic_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !l.starts_with("threads = ") && !l.starts_with("out_dir = "))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// FNV-1a 64 over [`Self::semantic_text`]; printed into every artifact
    /// so outputs can be traced back to their exact configuration.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.semantic_text().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Checks cross-field constraints that single assignments cannot see.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.channels == 0 || m.blocks == 0 || m.kernel_count == 0 {
            bail!("model channels, blocks, and kernel_count must be positive");
        }
        if m.dilated_kernel_size.is_empty() || m.dilated_kernel_size.len() > 2 {
            bail!("dilated_kernel_size takes one value or two comma-separated values");
        }
        for &s in &m.dilated_kernel_size {
            if s == 0 || s % 2 == 0 {
                bail!("dilated kernel size {s} must be odd and positive");
            }
        }
        if m.stem_pool == 0 {
            bail!("stem_pool must be at least 1 (1 disables it)");
        }
        if self.optimizer.batch_size == 0 {
            bail!("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            bail!("val_fraction {} outside [0, 1)", self.data.val_fraction);
        }
        match self.data.source {
            DataSource::Idx => {
                if self.data.images_path.is_empty() || self.data.labels_path.is_empty() {
                    bail!("idx source needs data.images_path and data.labels_path");
                }
            }
            DataSource::Csv => {
                if self.data.csv_path.is_empty() {
                    bail!("csv source needs data.csv_path");
                }
            }
            DataSource::Synth => {}
        }
        if self.run.threads == 0 {
            bail!("threads must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn modified_configs_round_trip_too() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("model.interpolation=triangle").unwrap();
        cfg.apply_override("model.dilated_kernel_size=15,9").unwrap();
        cfg.apply_override("optimizer.base_lr=0.125").unwrap();
        cfg.apply_override("optimizer.kind=sgd").unwrap();
        cfg.apply_override("data.synth_noise=0.05").unwrap();
        cfg.apply_override("run.compare_seeds=7,8").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(RunConfig::parse("[model]\nchannel = 3\n").is_err());
        assert!(RunConfig::parse("[models]\nchannels = 3\n").is_err());
        assert!(RunConfig::parse("channels = 3\n").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("model.nope=1").is_err());
        assert!(cfg.apply_override("nonsense").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = RunConfig::parse(
            "# leading comment\n\n[model]\nchannels = 5 # inline comment\n\n[run]\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.model.channels, 5);
        assert_eq!(cfg.run.seed, 9);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.apply_override("run.seed=1").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn hash_ignores_out_dir_and_threads() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.apply_override("run.out_dir=elsewhere").unwrap();
        b.apply_override("run.threads=8").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.semantic_text(), b.semantic_text());
        let back = RunConfig::parse(&a.semantic_text()).unwrap();
        assert_eq!(back, a, "omitted keys fall back to defaults");
    }

    #[test]
    fn validate_catches_cross_field_problems() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.apply_override("model.dilated_kernel_size=8").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply_override("model.dilated_kernel_size=23").unwrap();
        cfg.apply_override("data.source=idx").unwrap();
        assert!(cfg.validate().is_err(), "idx without paths must fail");
    }
}
