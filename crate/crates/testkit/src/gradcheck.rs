//! Finite-difference gradient checks for the kernel constructor and the full
//! dilated layer.
//!
//! Both runners draw deterministic random configurations, form the scalar
//! loss `sum(c .* f(params))` against a fixed random cotangent `c`, and
//! compare analytic reverse-mode gradients to central differences coordinate
//! by coordinate. Relative error uses the guarded denominator
//! `max(|analytic|, |numeric|, 1e-12)`.
//!
//! Triangle-family profiles are only piecewise smooth, so configurations are
//! resampled until every grid offset stays clear of the kinks at `x = 0` and
//! `|x| = sigma_eff`; the raw width keeps `|sigma_raw| >= 0.05` so the
//! absolute-value reparameterization is smooth at every probe.

use crate::fd::{fd_grad, relative_error, FD_STEP};
use dcls_core::interp::{InterpFamily, InterpolationKind};
use dcls_core::kernelgen::{
    construct_kernel, construct_kernel_backward, DclsGeometry, DclsGradients, DclsParams,
};
use dcls_core::conv::{conv_backward, conv_forward, ConvSpec};
use dcls_core::kernelgen::construct_kernel_inference;
use dcls_core::tensor::TensorND;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probes closer than this to a non-smooth point are resampled away.
const KINK_CLEARANCE: f64 = 1.5e-3;

#[derive(Debug, Clone)]
pub struct KindStat {
    pub label: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Outcome of one gradcheck sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub threshold: f64,
    pub cases: usize,
    pub stats: Vec<KindStat>,
    /// Set when the swept family has no width gradient by construction.
    pub sigma_fixed: bool,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.stats.iter().all(|s| s.max_rel_err < self.threshold)
    }

    pub fn max_for(&self, label: &str) -> Option<f64> {
        self.stats
            .iter()
            .find(|s| s.label == label)
            .map(|s| s.max_rel_err)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "gradcheck {}: cases={} threshold={:.1e}\n",
            self.name, self.cases, self.threshold
        );
        for s in &self.stats {
            out.push_str(&format!(
                "  {:<10} max_rel={:.3e}  coords={}\n",
                s.label, s.max_rel_err, s.checked
            ));
        }
        if self.sigma_fixed {
            out.push_str("  sigma      fixed (no gradient)\n");
        }
        out.push_str(if self.pass() { "  PASS\n" } else { "  FAIL\n" });
        out
    }

    fn bump(&mut self, label: &'static str, rel: f64) {
        match self.stats.iter_mut().find(|s| s.label == label) {
            Some(s) => {
                s.max_rel_err = s.max_rel_err.max(rel);
                s.checked += 1;
            }
            None => self.stats.push(KindStat {
                label,
                max_rel_err: rel,
                checked: 1,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KernelCheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub threshold: f64,
    pub families: Vec<InterpFamily>,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        KernelCheckConfig {
            cases: 60,
            seed: 0xdc15,
            threshold: 1e-5,
            families: vec![InterpFamily::Triangle, InterpFamily::Gauss],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub threshold: f64,
    pub families: Vec<InterpFamily>,
}

impl Default for LayerCheckConfig {
    fn default() -> Self {
        LayerCheckConfig {
            cases: 10,
            seed: 0x1a7e,
            threshold: 1e-4,
            families: vec![InterpFamily::Triangle, InterpFamily::Gauss],
        }
    }
}

/// Draws parameters whose probes stay clear of every profile kink.
fn sample_params(
    rng: &mut ChaCha8Rng,
    geom: &DclsGeometry,
    family: InterpFamily,
    c_out: usize,
    c_in_g: usize,
) -> DclsParams<f64> {
    let kind = InterpolationKind::of(family);
    let mut params = DclsParams::zeros(geom, c_out, c_in_g);
    for w in params.weights.data_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }
    let m = geom.kernel_count();
    for a in 0..geom.rank() {
        let (lo, hi) = geom.clamp_range(a);
        let s_a = geom.sizes()[a];
        let center = geom.center_offset(a) as f64;
        for e in 0..c_out * c_in_g * m {
            let mut tries = 0;
            loop {
                tries += 1;
                let p = rng.gen_range(lo..hi.max(lo + 1e-9));
                let sig: f64 = if kind.learns_sigma() {
                    let mag = rng.gen_range(0.3..1.5);
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                } else {
                    0.0
                };
                let sigma_eff = kind.sigma0() + sig.abs();
                let q = p + center;
                let smooth = match family {
                    InterpFamily::Gauss => true,
                    _ => (0..s_a).all(|i| {
                        let x = (q - i as f64).abs();
                        x > KINK_CLEARANCE && (x - sigma_eff).abs() > KINK_CLEARANCE
                    }),
                };
                if smooth || tries > 200 {
                    assert!(tries <= 200, "could not sample a kink-free position");
                    params.positions[a].data_mut()[e] = p;
                    params.sigmas[a].data_mut()[e] = sig;
                    break;
                }
            }
        }
    }
    params
}

fn flatten(params: &DclsParams<f64>) -> Vec<f64> {
    let mut flat = params.weights.data().to_vec();
    for p in &params.positions {
        flat.extend_from_slice(p.data());
    }
    for s in &params.sigmas {
        flat.extend_from_slice(s.data());
    }
    flat
}

fn unflatten(template: &DclsParams<f64>, flat: &[f64]) -> DclsParams<f64> {
    let mut params = template.clone();
    let n = params.weights.len();
    params.weights.data_mut().copy_from_slice(&flat[..n]);
    let rank = params.positions.len();
    for a in 0..rank {
        params.positions[a]
            .data_mut()
            .copy_from_slice(&flat[(1 + a) * n..(2 + a) * n]);
    }
    for a in 0..rank {
        params.sigmas[a]
            .data_mut()
            .copy_from_slice(&flat[(1 + rank + a) * n..(2 + rank + a) * n]);
    }
    params
}

fn coord_label(i: usize, n: usize, rank: usize) -> &'static str {
    let block = i / n;
    if block == 0 {
        "weight"
    } else if block <= rank {
        "position"
    } else {
        "sigma"
    }
}

/// Checks [`construct_kernel_backward`] against central differences of the
/// constructor. `mutate` tampers with the analytic gradients before the
/// comparison; production callers pass the identity.
pub fn gradcheck_kernel_with<F>(cfg: &KernelCheckConfig, mutate: F) -> GradCheckReport
where
    F: Fn(&mut DclsGradients<f64>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        name: "kernel",
        threshold: cfg.threshold,
        cases: cfg.cases,
        stats: Vec::new(),
        sigma_fixed: cfg.families.iter().all(|f| *f == InterpFamily::Bilinear),
    };
    let m_choices = [1usize, 3, 7];
    let s_choices = [3usize, 5, 9];

    for case in 0..cfg.cases {
        let family = cfg.families[case % cfg.families.len()];
        let kind = InterpolationKind::of(family);
        let rank = case % 3 + 1;
        let m = m_choices[rng.gen_range(0..m_choices.len())];
        let sizes: Vec<usize> = (0..rank)
            .map(|_| s_choices[rng.gen_range(0..s_choices.len())])
            .collect();
        let geom = DclsGeometry::new(&sizes, m).unwrap();
        let (c_out, c_in_g) = if case % 5 == 0 { (2, 1) } else { (1, 1) };
        let params = sample_params(&mut rng, &geom, family, c_out, c_in_g);

        let constructed = construct_kernel(&params, &geom, &kind).unwrap();
        let mut cotangent = TensorND::zeros(constructed.kernel.shape());
        for v in cotangent.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }

        let mut analytic = construct_kernel_backward(&constructed, &cotangent).unwrap();
        mutate(&mut analytic);
        let analytic_flat = flatten(&DclsParams {
            weights: analytic.weights.clone(),
            positions: analytic.positions.clone(),
            sigmas: analytic.sigmas.clone(),
        });

        let flat = flatten(&params);
        let numeric = fd_grad(
            |x| {
                let p = unflatten(&params, x);
                let k = construct_kernel_inference(&p, &geom, &kind).unwrap();
                k.kernel.dot(&cotangent).unwrap()
            },
            &flat,
            FD_STEP,
        )
        .expect("kernel loss stays finite");

        let n = params.weights.len();
        for (i, (&a, &nu)) in analytic_flat.iter().zip(numeric.iter()).enumerate() {
            let label = coord_label(i, n, rank);
            if label == "sigma" && !kind.learns_sigma() {
                continue;
            }
            report.bump(label, relative_error(a, nu));
        }
    }
    report
}

pub fn gradcheck_kernel(cfg: &KernelCheckConfig) -> GradCheckReport {
    gradcheck_kernel_with(cfg, |_| {})
}

/// Checks the full layer backward (convolution plus kernel construction),
/// including gradients with respect to the input.
pub fn gradcheck_layer(cfg: &LayerCheckConfig) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        name: "layer",
        threshold: cfg.threshold,
        cases: cfg.cases,
        stats: Vec::new(),
        sigma_fixed: cfg.families.iter().all(|f| *f == InterpFamily::Bilinear),
    };

    for case in 0..cfg.cases {
        let family = cfg.families[case % cfg.families.len()];
        let kind = InterpolationKind::of(family);
        // Mostly 2-D layers with one 1-D and one 3-D case per sweep.
        let rank = match case {
            0 => 1,
            1 => 3,
            _ => 2,
        };
        let sizes = vec![if rank == 3 { 3 } else { 5 }; rank];
        let m = if rank == 3 { 2 } else { 3 };
        let geom = DclsGeometry::new(&sizes, m).unwrap();
        let channels = 2usize;
        let depthwise = case % 2 == 0;
        let (groups, c_out, c_in_g) = if depthwise {
            (channels, channels, 1)
        } else {
            (1, 2, channels)
        };
        let spec = ConvSpec {
            stride: vec![1; rank],
            padding: sizes.iter().map(|&s| s / 2).collect(),
            groups,
        };
        let params = sample_params(&mut rng, &geom, family, c_out, c_in_g);

        let mut in_shape = vec![1, channels];
        in_shape.extend(std::iter::repeat(if rank == 3 { 4 } else { 7 }).take(rank));
        let mut input = TensorND::zeros(&in_shape);
        for v in input.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }

        let constructed = construct_kernel(&params, &geom, &kind).unwrap();
        let output = conv_forward(&input, &constructed.kernel, &spec).unwrap();
        let mut cotangent = TensorND::zeros(output.shape());
        for v in cotangent.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }

        let (grad_input, grad_kernel) =
            conv_backward(&input, &constructed.kernel, &spec, &cotangent).unwrap();
        let grads = construct_kernel_backward(&constructed, &grad_kernel).unwrap();

        let mut analytic_flat = flatten(&DclsParams {
            weights: grads.weights.clone(),
            positions: grads.positions.clone(),
            sigmas: grads.sigmas.clone(),
        });
        analytic_flat.extend_from_slice(grad_input.data());

        let mut flat = flatten(&params);
        let param_len = flat.len();
        flat.extend_from_slice(input.data());

        let numeric = fd_grad(
            |x| {
                let p = unflatten(&params, &x[..param_len]);
                let inp = TensorND::from_vec(&in_shape, x[param_len..].to_vec()).unwrap();
                let k = construct_kernel_inference(&p, &geom, &kind).unwrap();
                conv_forward(&inp, &k.kernel, &spec)
                    .unwrap()
                    .dot(&cotangent)
                    .unwrap()
            },
            &flat,
            FD_STEP,
        )
        .expect("layer loss stays finite");

        let n = params.weights.len();
        for (i, (&a, &nu)) in analytic_flat.iter().zip(numeric.iter()).enumerate() {
            let label = if i < param_len {
                coord_label(i, n, rank)
            } else {
                "input"
            };
            if label == "sigma" && !kind.learns_sigma() {
                continue;
            }
            report.bump(label, relative_error(a, nu));
        }
    }
    report
}
