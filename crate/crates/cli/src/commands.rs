//! Command implementations behind the `dcls` binary. Each command takes the
//! fully resolved [`RunConfig`] (file, overrides, flags already merged) and
//! writes its artifacts under the configured output directory. Given the
//! same config, seed, and thread count, every command is reproducible
//! byte for byte.

use crate::artifacts::{fmt_f64, pooled_t_statistic, write_csv, write_pgm};
use crate::config::{DataSource, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use dcls_core::checkpoint::{
    apply_checkpoint, load_checkpoint, save_checkpoint, CheckpointData, CheckpointMeta,
};
use dcls_core::data::{load_csv, load_idx, synth_longrange_with_noise, Dataset};
use dcls_core::interp::{InterpFamily, InterpolationKind};
use dcls_core::kernelgen::{construct_kernel_inference, DclsGeometry, DclsParams};
use dcls_core::nn::{
    evaluate, train, AvgPoolLayer, DclsConvLayer, DenseLayer, EpochStats, Layer, Network,
    PointwiseLayer, ReluLayer, TrainSettings,
};
use dcls_core::tensor::TensorND;
use dcls_core::training::{
    auto_sync_groups, default_groups, Optimizer, OptimizerConfig, OptimizerKind, ParamGroup,
    ParamKind, ParamStore, SyncGroup,
};
use dcls_testkit::{gradcheck_kernel, gradcheck_layer, KernelCheckConfig, LayerCheckConfig};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Expands a one-value kernel size to a square grid.
fn kernel_sizes(cfg: &RunConfig) -> Vec<usize> {
    match cfg.model.dilated_kernel_size.as_slice() {
        [s] => vec![*s, *s],
        other => other.to_vec(),
    }
}

fn layer_seed(master: u64, salt: u64) -> u64 {
    master.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
}

/// A model plus the optimizer bookkeeping derived from the config.
pub struct BuiltModel {
    pub store: ParamStore<f64>,
    pub net: Network<f64>,
    pub groups: Vec<ParamGroup>,
    pub sync_groups: Vec<SyncGroup>,
}

/// Builds the configured architecture: pointwise stem, `blocks` repeats of a
/// depthwise DCLS conv + relu (window pooling and a pointwise mix between
/// blocks), then global average pooling into a dense head over `classes`.
pub fn build_model(cfg: &RunConfig, classes: usize) -> Result<BuiltModel> {
    let m = &cfg.model;
    let sizes = kernel_sizes(cfg);
    let geom = DclsGeometry::new(&sizes, m.kernel_count)?;
    let kind = InterpolationKind::of(m.interpolation);
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut net: Network<f64> = Network::new();
    let seed = cfg.run.seed;

    if m.stem_pool > 1 {
        net.push(Layer::AvgPool {
            layer: AvgPoolLayer::new(m.stem_pool)?,
            cached_shape: None,
        });
    }
    net.push(Layer::Pointwise(PointwiseLayer::new(
        &mut store,
        "stem",
        1,
        m.channels,
        layer_seed(seed, 1),
    )?));
    net.push(Layer::Relu(ReluLayer::default()));
    for b in 0..m.blocks {
        if b > 0 {
            if m.pool_window > 1 {
                net.push(Layer::AvgPool {
                    layer: AvgPoolLayer::new(m.pool_window)?,
                    cached_shape: None,
                });
            }
            net.push(Layer::Pointwise(PointwiseLayer::new(
                &mut store,
                &format!("mix{b}"),
                m.channels,
                m.channels,
                layer_seed(seed, 100 + b as u64),
            )?));
            net.push(Layer::Relu(ReluLayer::default()));
        }
        net.push(Layer::Dcls(DclsConvLayer::new(
            &mut store,
            &format!("dcls{b}"),
            m.channels,
            m.channels,
            m.channels,
            geom.clone(),
            kind,
            layer_seed(seed, 200 + b as u64),
        )?));
        net.push(Layer::Relu(ReluLayer::default()));
    }
    net.push(Layer::GlobalAvgPool { cached_shape: None });
    net.push(Layer::Dense(DenseLayer::new(
        &mut store,
        "head",
        m.channels,
        classes,
        layer_seed(seed, 900),
    )?));

    // Images have an exactly-zero background, so zero-initialized biases
    // leave half the relu channels dead from the first step (zero
    // preactivation has zero relu gradient). A small positive bias keeps
    // every channel trainable.
    let bias_ids: Vec<_> = store
        .ids()
        .filter(|&id| store.entry(id).name().ends_with(".bias"))
        .collect();
    for id in bias_ids {
        store.value_mut(id).fill(0.1);
    }

    let sync_groups = if m.sync_positions { auto_sync_groups(&store) } else { Vec::new() };
    // Mirrors receive values by broadcast; the optimizer must step only the
    // canonical copies, so mirrors are dropped from every group.
    let mirrors: HashSet<usize> = sync_groups
        .iter()
        .flat_map(|g| g.mirrors().iter().map(|id| id.index()))
        .collect();
    let mut groups = default_groups(&store);
    for g in &mut groups {
        g.members.retain(|id| !mirrors.contains(&id.index()));
        if matches!(g.kind, ParamKind::Position | ParamKind::Sigma) {
            g.lr_scale = cfg.optimizer.lr_scale_positions;
        }
    }
    groups.retain(|g| !g.members.is_empty());
    Ok(BuiltModel { store, net, groups, sync_groups })
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset<f64>> {
    let d = &cfg.data;
    let mut ds: Dataset<f64> = match d.source {
        DataSource::Synth => synth_longrange_with_noise(
            d.synth_n,
            d.synth_size,
            d.synth_classes,
            d.synth_noise,
            cfg.run.seed,
        )?,
        DataSource::Idx => load_idx(Path::new(&d.images_path), Path::new(&d.labels_path))?,
        DataSource::Csv => load_csv(Path::new(&d.csv_path), d.csv_height, d.csv_width)?,
    };
    if d.standardize {
        ds.standardize_per_channel();
    }
    Ok(ds)
}

fn optimizer_config(cfg: &RunConfig) -> OptimizerConfig {
    match cfg.optimizer.kind {
        OptimizerKind::Sgd => OptimizerConfig::sgd(cfg.optimizer.base_lr, cfg.optimizer.weight_decay),
        OptimizerKind::AdamW => {
            OptimizerConfig::adamw(cfg.optimizer.base_lr, cfg.optimizer.weight_decay)
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

/// One full training run: dataset, split, model, optimizer, loop.
pub struct TrainedRun {
    pub built: BuiltModel,
    pub optimizer: Optimizer<f64>,
    pub stats: Vec<EpochStats>,
}

pub fn run_training(cfg: &RunConfig) -> Result<TrainedRun> {
    let full = build_dataset(cfg)?;
    let (train_set, val_set) = if cfg.data.val_fraction > 0.0 {
        let (t, v) = full.split(cfg.data.val_fraction, cfg.run.seed)?;
        (t, Some(v))
    } else {
        (full, None)
    };
    let mut built = build_model(cfg, train_set.classes())?;
    let mut optimizer = Optimizer::new(optimizer_config(cfg));
    let settings = TrainSettings {
        epochs: cfg.optimizer.epochs,
        batch_size: cfg.optimizer.batch_size,
        shuffle_seed: cfg.run.seed,
    };
    let stats = train(
        &mut built.net,
        &mut built.store,
        &mut optimizer,
        &built.groups,
        &built.sync_groups,
        &train_set,
        val_set.as_ref(),
        &settings,
    )?;
    Ok(TrainedRun { built, optimizer, stats })
}

/// Extracts one [h, w] channel slice from a constructed [c_out, c_in_g, h, w]
/// kernel stack.
fn kernel_slice(full: &TensorND<f64>, co: usize, ci: usize) -> Result<TensorND<f64>> {
    let shape = full.shape();
    if shape.len() != 4 {
        bail!("kernel dump expects a 2-D grid, got shape {shape:?}");
    }
    let (c_in_g, h, w) = (shape[1], shape[2], shape[3]);
    if co >= shape[0] || ci >= c_in_g {
        bail!(
            "channel ({co}, {ci}) out of range for kernel stack {}x{}",
            shape[0],
            c_in_g
        );
    }
    let plane = h * w;
    let start = (co * c_in_g + ci) * plane;
    TensorND::from_vec(&[h, w], full.data()[start..start + plane].to_vec())
        .map_err(|e| anyhow!(e))
}

/// Writes `<stem>.csv` (i,j,value rows) and `<stem>.pgm` for one kernel slice.
fn dump_kernel_slice(
    dir: &Path,
    stem: &str,
    config_hash: u64,
    slice: &TensorND<f64>,
) -> Result<()> {
    let (h, w) = (slice.shape()[0], slice.shape()[1]);
    let mut rows = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            rows.push(format!("{i},{j},{}", fmt_f64(slice.get(&[i, j]))));
        }
    }
    write_csv(&dir.join(format!("{stem}.csv")), config_hash, "i,j,value", &rows)?;
    write_pgm(&dir.join(format!("{stem}.pgm")), slice)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    dcls_core::parallel::set_threads(cfg.run.threads);
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();

    let run = run_training(cfg)?;
    for s in &run.stats {
        match s.val_accuracy {
            Some(acc) => println!(
                "epoch {:>3}  train_loss {:.6}  val_acc {:.4}",
                s.epoch, s.train_loss, acc
            ),
            None => println!("epoch {:>3}  train_loss {:.6}", s.epoch, s.train_loss),
        }
    }

    let rows: Vec<String> = run
        .stats
        .iter()
        .map(|s| {
            let val = s.val_accuracy.map(fmt_f64).unwrap_or_default();
            format!("{},{},{val}", s.epoch, fmt_f64(s.train_loss))
        })
        .collect();
    write_csv(&dir.join("loss.csv"), hash, "epoch,train_loss,val_acc", &rows)?;

    let meta = CheckpointMeta {
        config_text: cfg.semantic_text(),
        epoch: run.stats.len() as u64,
        rng_seed: cfg.run.seed,
        rng_word_pos: 0,
    };
    save_checkpoint(&dir.join("checkpoint.bin"), &run.built.store, &run.optimizer, &meta)?;

    let kdir = dir.join("kernels");
    std::fs::create_dir_all(&kdir)?;
    for layer in run.built.net.dcls_layers() {
        let params = layer.current_params(&run.built.store);
        let constructed = construct_kernel_inference(&params, layer.geometry(), layer.kind())?;
        let slice = kernel_slice(&constructed.kernel, 0, 0)?;
        dump_kernel_slice(&kdir, &format!("{}_c0", layer.name()), hash, &slice)?;
    }

    let mut report = format!(
        "command = train\nconfig_hash = {hash:016x}\nparameters = {}\nepochs = {}\n",
        run.built.store.total_values(),
        run.stats.len()
    );
    if let Some(last) = run.stats.last() {
        report.push_str(&format!("final_train_loss = {}\n", fmt_f64(last.train_loss)));
        if let Some(acc) = last.val_accuracy {
            report.push_str(&format!("final_val_acc = {}\n", fmt_f64(acc)));
        }
    }
    std::fs::write(dir.join("report.txt"), &report)?;
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    dcls_core::parallel::set_threads(cfg.run.threads);
    let dir = out_dir(cfg)?;
    let default_path = dir.join("checkpoint.bin");
    let path = checkpoint.unwrap_or(&default_path);
    let data = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let stored = RunConfig::parse(&data.meta.config_text)
        .context("parsing the config stored in the checkpoint")?;

    let full = build_dataset(cfg)?;
    let eval_set = if cfg.data.val_fraction > 0.0 {
        full.split(cfg.data.val_fraction, cfg.run.seed)?.1
    } else {
        full
    };

    // Architecture comes from the stored config; a mismatched head or layer
    // stack is rejected when the checkpoint is applied.
    let mut built = build_model(&stored, eval_set.classes())?;
    let mut optimizer = Optimizer::new(data.optimizer.clone());
    apply_checkpoint(&data, &mut built.store, &mut optimizer)?;

    let (acc, loss) = evaluate(&built.net, &built.store, &eval_set, cfg.optimizer.batch_size)?;
    let report = format!(
        "command = eval\ncheckpoint = {}\nconfig_hash = {:016x}\nsamples = {}\nsource = {}\naccuracy = {}\nmean_loss = {}\n",
        path.display(),
        cfg.hash(),
        eval_set.len(),
        eval_set.source(),
        fmt_f64(acc),
        fmt_f64(loss),
    );
    std::fs::write(dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

/// Finite-difference verification of the analytic gradients. Exit status is
/// success only if every sweep stays under its threshold: 1e-5 for kernel
/// construction, 1e-4 for the full layer (looser because the convolution
/// output feeds a longer float pipeline).
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<bool> {
    dcls_core::parallel::set_threads(cfg.run.threads);
    let dir = out_dir(cfg)?;

    let smooth = gradcheck_kernel(&KernelCheckConfig::default());
    let bilinear = gradcheck_kernel(&KernelCheckConfig {
        cases: 20,
        families: vec![InterpFamily::Bilinear],
        ..KernelCheckConfig::default()
    });
    let layer = gradcheck_layer(&LayerCheckConfig::default());

    let text = format!("{}{}{}", smooth.render(), bilinear.render(), layer.render());
    std::fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    let ok = smooth.pass() && bilinear.pass() && layer.pass();
    println!("gradcheck: {}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn checkpoint_tensor(data: &CheckpointData, name: &str) -> Result<TensorND<f64>> {
    let entry = data
        .entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| anyhow!("checkpoint has no parameter {name:?}"))?;
    TensorND::from_vec(&entry.shape, entry.values.clone()).map_err(|e| anyhow!(e))
}

/// Renders one output channel of a stored DCLS layer: the interpolated
/// kernel as CSV and PGM plus a positions/sigma table.
pub fn cmd_inspect_kernel(
    cfg: &RunConfig,
    checkpoint: &Path,
    layer: usize,
    channel: usize,
) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let stored = RunConfig::parse(&data.meta.config_text)
        .context("parsing the config stored in the checkpoint")?;
    if layer >= stored.model.blocks {
        bail!("layer {layer} out of range: model has {} DCLS layers", stored.model.blocks);
    }

    let name = format!("dcls{layer}");
    let weights = checkpoint_tensor(&data, &format!("{name}.weight"))?;
    let (c_out, c_in_g, m) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    if channel >= c_out {
        bail!("channel {channel} out of range: layer {layer} has {c_out} output channels");
    }
    let sizes = match stored.model.dilated_kernel_size.as_slice() {
        [s] => vec![*s, *s],
        other => other.to_vec(),
    };
    let geom = DclsGeometry::new(&sizes, m)?;
    let kind = InterpolationKind::of(stored.model.interpolation);
    let mut params: DclsParams<f64> = DclsParams::zeros(&geom, c_out, c_in_g);
    params.weights = weights;
    for a in 0..geom.rank() {
        params.positions[a] = checkpoint_tensor(&data, &format!("{name}.position{a}"))?;
        params.sigmas[a] = checkpoint_tensor(&data, &format!("{name}.sigma{a}"))?;
    }

    let constructed = construct_kernel_inference(&params, &geom, &kind)?;
    let slice = kernel_slice(&constructed.kernel, channel, 0)?;
    let stem = format!("kernel_l{layer}_c{channel}");
    dump_kernel_slice(&dir, &stem, stored.hash(), &slice)?;

    let mut table = format!(
        "layer = {name}\nchannel = {channel}\ninterpolation = {}\ngrid = {}x{}\n\n\
         k  pos_y  pos_x  sigma_eff_y  sigma_eff_x  weight\n",
        stored.model.interpolation.name(),
        sizes[0],
        sizes[1]
    );
    let at = |t: &TensorND<f64>, k: usize| t.get(&[channel, 0, k]);
    for k in 0..m {
        let sig = |a: usize| -> String {
            if kind.learns_sigma() {
                format!("{:+.4}", kind.sigma0() + at(&params.sigmas[a], k).abs())
            } else {
                "fixed".to_string()
            }
        };
        table.push_str(&format!(
            "{k}  {:+.4}  {:+.4}  {}  {}  {:+.4}\n",
            at(&params.positions[0], k),
            at(&params.positions[1], k),
            sig(0),
            sig(1),
            at(&params.weights, k),
        ));
    }
    std::fs::write(dir.join(format!("{stem}.txt")), &table)?;
    print!("{table}");
    println!("wrote {}/{stem}.{{csv,pgm,txt}}", dir.display());
    Ok(())
}

/// Trains every interpolation family over the configured seeds and compares
/// final training losses with a pooled-variance two-sample t-statistic.
pub fn cmd_compare_interp(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    dcls_core::parallel::set_threads(cfg.run.threads);
    if cfg.run.compare_seeds.is_empty() {
        bail!("run.compare_seeds must list at least one seed");
    }
    if cfg.optimizer.epochs == 0 {
        bail!("compare-interp needs optimizer.epochs >= 1");
    }
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();

    let mut rows = Vec::new();
    let mut finals: Vec<(InterpFamily, Vec<f64>)> = Vec::new();
    for family in InterpFamily::ALL {
        let mut losses = Vec::new();
        for &seed in &cfg.run.compare_seeds {
            let mut combo = cfg.clone();
            combo.model.interpolation = family;
            combo.run.seed = seed;
            let run = run_training(&combo)?;
            let last = run.stats.last().expect("epochs >= 1");
            let val = last.val_accuracy.map(fmt_f64).unwrap_or_default();
            println!(
                "{:<9} seed {seed}  final_loss {:.6}",
                family.name(),
                last.train_loss
            );
            rows.push(format!(
                "{},{seed},{},{val}",
                family.name(),
                fmt_f64(last.train_loss)
            ));
            losses.push(last.train_loss);
        }
        finals.push((family, losses));
    }
    write_csv(
        &dir.join("results.csv"),
        hash,
        "interpolation,seed,final_loss,val_acc",
        &rows,
    )?;

    let mut report = format!("command = compare-interp\nconfig_hash = {hash:016x}\n\n");
    for (family, losses) in &finals {
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        report.push_str(&format!("mean_final_loss {} = {mean:.6}\n", family.name()));
    }
    report.push('\n');
    for i in 0..finals.len() {
        for j in i + 1..finals.len() {
            let (fa, la) = &finals[i];
            let (fb, lb) = &finals[j];
            let t = match pooled_t_statistic(la, lb) {
                Some(t) => format!("{t:+.4}"),
                None => "n/a".to_string(),
            };
            report.push_str(&format!("t({}, {}) = {t}\n", fa.name(), fb.name()));
        }
    }
    std::fs::write(dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}
