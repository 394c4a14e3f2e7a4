//! Parameter management and optimization.
//!
//! Policy baked in here, applied uniformly by the rest of the library:
//!
//! * position and sigma parameters train with a 5x learning-rate scale and
//!   are excluded from weight decay;
//! * positions start from a centered normal law with standard deviation 0.5;
//! * raw sigmas start at 0.23 for the Gauss profile (so the effective width
//!   begins at 0.27 + 0.23 = 0.5) and at 0 otherwise;
//! * weights start uniform in (-b, b) with b = 1/sqrt(fan_in * m);
//! * after every optimizer step, profiles that require in-grid support get
//!   their positions clamped back into the grid;
//! * layers may share one positions+sigmas storage while keeping private
//!   weights; the shared gradient is the ordered sum of the member gradients
//!   and every member observes bit-identical values after a step.
//!
//! A non-finite gradient anywhere aborts the step before any state mutates.

use crate::error::{DclsError, Result};
use crate::interp::{InterpFamily, InterpolationKind};
use crate::kernelgen::{clamp_positions, DclsGeometry, DclsParams};
use crate::scalar::Scalar;
use crate::tensor::TensorND;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// What role a parameter tensor plays; drives grouping defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Position,
    Sigma,
    Other,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Position => "position",
            ParamKind::Sigma => "sigma",
            ParamKind::Other => "other",
        }
    }
}

/// Handle to one tensor in a [`ParamStore`]. Only the store that issued it
/// can resolve it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    name: String,
    kind: ParamKind,
    value: TensorND<T>,
    grad: TensorND<T>,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn value(&self) -> &TensorND<T> {
        &self.value
    }

    pub fn grad(&self) -> &TensorND<T> {
        &self.grad
    }
}

/// Flat registry of all trainable tensors in a model, in registration order.
/// Registration order is the canonical order for checkpoints and reductions.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registers a tensor; names must be unique within the store.
    pub fn add(&mut self, name: &str, kind: ParamKind, value: TensorND<T>) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(DclsError::Training(format!("duplicate parameter name {name:?}")));
        }
        let grad = TensorND::zeros(value.shape());
        self.entries.push(ParamEntry { name: name.to_string(), kind, value, grad });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &TensorND<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut TensorND<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &TensorND<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut TensorND<T> {
        &mut self.entries[id.0].grad
    }

    /// Adds `delta` into the gradient accumulator of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &TensorND<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.grad.shape() != delta.shape() {
            return Err(DclsError::ShapeMismatch {
                context: "gradient accumulation",
                expected: entry.grad.shape().to_vec(),
                got: delta.shape().to_vec(),
            });
        }
        entry.grad.add_assign(delta)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// A set of parameters stepped with a common learning-rate scale and decay
/// policy.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub kind: ParamKind,
    pub lr_scale: f64,
    pub weight_decay_enabled: bool,
    pub members: Vec<ParamId>,
}

impl ParamGroup {
    /// Policy defaults: positions and sigmas scale the learning rate by 5 and
    /// never decay; everything else uses the base rate with decay enabled.
    pub fn for_kind(kind: ParamKind) -> Self {
        let (lr_scale, weight_decay_enabled) = match kind {
            ParamKind::Position | ParamKind::Sigma => (5.0, false),
            ParamKind::Weight | ParamKind::Other => (1.0, true),
        };
        Self { kind, lr_scale, weight_decay_enabled, members: Vec::new() }
    }
}

/// Buckets every entry of the store into one group per kind present, in
/// Weight, Position, Sigma, Other order, applying the policy defaults.
pub fn default_groups<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamGroup> {
    let mut groups: Vec<ParamGroup> = Vec::new();
    for kind in [ParamKind::Weight, ParamKind::Position, ParamKind::Sigma, ParamKind::Other] {
        let mut group = ParamGroup::for_kind(kind);
        for id in store.ids() {
            if store.entry(id).kind() == kind {
                group.members.push(id);
            }
        }
        if !group.members.is_empty() {
            groups.push(group);
        }
    }
    groups
}

/// Layers sharing one positions or sigmas storage. The first member is the
/// canonical copy: gradients of all members are summed into it in member
/// order, the optimizer steps it, and its values are then copied verbatim to
/// every mirror.
#[derive(Debug, Clone)]
pub struct SyncGroup {
    members: Vec<ParamId>,
}

impl SyncGroup {
    pub fn new(members: Vec<ParamId>) -> Result<Self> {
        if members.is_empty() {
            return Err(DclsError::Training("sync group needs at least one member".into()));
        }
        for (i, a) in members.iter().enumerate() {
            if members[i + 1..].contains(a) {
                return Err(DclsError::Training("sync group lists a member twice".into()));
            }
        }
        Ok(Self { members })
    }

    pub fn canonical(&self) -> ParamId {
        self.members[0]
    }

    pub fn mirrors(&self) -> &[ParamId] {
        &self.members[1..]
    }

    pub fn members(&self) -> &[ParamId] {
        &self.members
    }

    fn check_shapes<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let canon = store.entry(self.canonical());
        for &m in self.mirrors() {
            let e = store.entry(m);
            if e.value.shape() != canon.value.shape() {
                return Err(DclsError::ShapeMismatch {
                    context: "sync group member",
                    expected: canon.value.shape().to_vec(),
                    got: e.value.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Sums member gradients into the canonical entry, in member order,
    /// starting from zero. Mirror gradients are left untouched; only the
    /// canonical entry should belong to an optimizer group.
    pub fn reduce_grads<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.check_shapes(store)?;
        let len = store.grad(self.canonical()).len();
        let mut sum = vec![T::zero(); len];
        for &m in &self.members {
            for (acc, g) in sum.iter_mut().zip(store.grad(m).data()) {
                *acc += *g;
            }
        }
        store.grad_mut(self.canonical()).data_mut().copy_from_slice(&sum);
        Ok(())
    }

    /// Copies the canonical values verbatim into every mirror.
    pub fn broadcast_values<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.check_shapes(store)?;
        let canon = store.value(self.canonical()).data().to_vec();
        for &m in self.mirrors() {
            store.value_mut(m).data_mut().copy_from_slice(&canon);
        }
        Ok(())
    }
}

/// Groups position entries (and, separately, sigma entries) that play the
/// same role across layers into sync groups, in registration order. The role
/// is the name suffix after the last `.` (e.g. `position0`), so the two axes
/// of one layer are never tied together; entries whose (kind, role, shape)
/// key is unique stay unsynchronized.
pub fn auto_sync_groups<T: Scalar>(store: &ParamStore<T>) -> Vec<SyncGroup> {
    let mut buckets: Vec<((ParamKind, String, Vec<usize>), Vec<ParamId>)> = Vec::new();
    for id in store.ids() {
        let e = store.entry(id);
        if !matches!(e.kind(), ParamKind::Position | ParamKind::Sigma) {
            continue;
        }
        let role = e.name().rsplit('.').next().unwrap_or(e.name()).to_string();
        let key = (e.kind(), role, e.value.shape().to_vec());
        match buckets.iter_mut().find(|(k, _)| *k == key) {
            Some((_, ids)) => ids.push(id),
            None => buckets.push((key, vec![id])),
        }
    }
    buckets
        .into_iter()
        .filter(|(_, ids)| ids.len() >= 2)
        .map(|(_, ids)| SyncGroup::new(ids).expect("bucketed ids are distinct and non-empty"))
        .collect()
}

/// Which update rule the optimizer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Momentum-free stochastic gradient descent.
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(base_lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            base_lr,
            weight_decay,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
        }
    }

    pub fn adamw(base_lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub(crate) struct Moments<T: Scalar> {
    pub(crate) first: TensorND<T>,
    pub(crate) second: TensorND<T>,
}

/// Steps a [`ParamStore`] according to a list of [`ParamGroup`]s.
///
/// The update for a member of a group with scale `c` and decay flag `d` is
///
/// * Sgd:   `w' = w - (lr*c) * g - (lr*c) * (d ? wd : 0) * w`
/// * AdamW: `w' = w - (lr*c) * mhat / (sqrt(vhat) + eps) - (lr*c) * (d ? wd : 0) * w`
///
/// with bias-corrected moments `mhat`, `vhat`. Decay is decoupled: it never
/// touches the moment accumulators.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    pub(crate) cfg: OptimizerConfig,
    pub(crate) step_count: u64,
    pub(crate) moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, step_count: 0, moments: Vec::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every group member. If any member gradient is
    /// non-finite the call fails before mutating anything, including moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, groups: &[ParamGroup]) -> Result<()> {
        let mut seen = vec![false; store.len()];
        for group in groups {
            for &id in &group.members {
                if id.index() >= store.len() {
                    return Err(DclsError::Training("parameter id out of range".into()));
                }
                if seen[id.index()] {
                    return Err(DclsError::Training(format!(
                        "parameter {:?} appears in more than one group",
                        store.entry(id).name()
                    )));
                }
                seen[id.index()] = true;
                if !store.grad(id).all_finite() {
                    return Err(DclsError::NonFinite("gradient"));
                }
            }
        }

        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step_count += 1;
        let t = self.step_count;

        for group in groups {
            let lr_eff = self.cfg.base_lr * group.lr_scale;
            let decay = if group.weight_decay_enabled { self.cfg.weight_decay } else { 0.0 };
            let lr_t = T::from_f64_const(lr_eff);
            let lr_decay_t = T::from_f64_const(lr_eff * decay);
            for &id in &group.members {
                match self.cfg.kind {
                    OptimizerKind::Sgd => {
                        let entry = &mut store.entries[id.index()];
                        for (v, g) in entry.value.data_mut().iter_mut().zip(entry.grad.data()) {
                            let old = *v;
                            *v = old - lr_t * *g - lr_decay_t * old;
                        }
                    }
                    OptimizerKind::AdamW => {
                        let slot = &mut self.moments[id.index()];
                        if slot.is_none() {
                            let shape = store.value(id).shape().to_vec();
                            *slot = Some(Moments {
                                first: TensorND::zeros(&shape),
                                second: TensorND::zeros(&shape),
                            });
                        }
                        let mom = slot.as_mut().expect("just initialized");
                        let b1 = T::from_f64_const(self.cfg.beta1);
                        let b2 = T::from_f64_const(self.cfg.beta2);
                        let one = T::one();
                        let eps = T::from_f64_const(self.cfg.epsilon);
                        let bc1 = T::from_f64_const(1.0 - self.cfg.beta1.powi(t as i32));
                        let bc2 = T::from_f64_const(1.0 - self.cfg.beta2.powi(t as i32));
                        let entry = &mut store.entries[id.index()];
                        for (((v, g), m), s) in entry
                            .value
                            .data_mut()
                            .iter_mut()
                            .zip(entry.grad.data())
                            .zip(mom.first.data_mut())
                            .zip(mom.second.data_mut())
                        {
                            *m = b1 * *m + (one - b1) * *g;
                            *s = b2 * *s + (one - b2) * *g * *g;
                            let mhat = *m / bc1;
                            let vhat = *s / bc2;
                            let old = *v;
                            *v = old - lr_t * (mhat / (vhat.sqrt() + eps)) - lr_decay_t * old;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fresh parameters for one DCLS layer, deterministic in `seed`.
///
/// Positions are drawn from Normal(0, 0.5^2) per coordinate, raw sigmas are
/// the constant 0.23 for Gauss (effective width 0.5 at start) and 0 for the
/// other profiles, and weights are uniform in (-b, b) with
/// b = 1/sqrt(c_in_per_group * kernel_count). Sampling order is positions
/// axis by axis, then weights, so layouts with equal shapes reproduce.
pub fn init_params<T: Scalar>(
    geom: &DclsGeometry,
    kind: &InterpolationKind,
    c_out: usize,
    c_in_g: usize,
    seed: u64,
) -> DclsParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = DclsParams::zeros(geom, c_out, c_in_g);

    let normal = Normal::new(0.0f64, 0.5).expect("fixed finite std");
    for axis in params.positions.iter_mut() {
        for p in axis.data_mut() {
            *p = T::from_f64_const(normal.sample(&mut rng));
        }
    }

    let sigma_init = match kind.family() {
        InterpFamily::Gauss => 0.23,
        InterpFamily::Triangle | InterpFamily::Bilinear => 0.0,
    };
    for axis in params.sigmas.iter_mut() {
        axis.fill(T::from_f64_const(sigma_init));
    }

    let bound = 1.0 / ((c_in_g * geom.kernel_count()) as f64).sqrt();
    for w in params.weights.data_mut() {
        *w = T::from_f64_const(rng.gen_range(-bound..bound));
    }
    params
}

/// Post-step policy hook: profiles that require in-grid support get their
/// positions clamped back into the representable range.
pub fn post_step_hook<T: Scalar>(
    params: &mut DclsParams<T>,
    geom: &DclsGeometry,
    kind: &InterpolationKind,
) {
    if kind.clamp_positions() {
        clamp_positions(params, geom);
    }
}
