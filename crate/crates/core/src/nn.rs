//! Small feed-forward network machinery: enough layers to train image
//! classifiers whose convolutions have learnable element placement, with all
//! parameters held in a [`ParamStore`] so grouping, synchronization, and
//! checkpointing see one flat registry.
//!
//! Layers cache what their backward pass needs during `forward` and release
//! it when `backward` consumes it. The inference path (`infer`) never caches.
//! Every loop is deterministic: the only randomness is the seeded shuffle in
//! the trainer.

use crate::conv::{conv_backward, conv_forward, dcls_layer_backward, dcls_layer_forward,
                  dcls_layer_infer, ConvSpec, DclsLayerContext};
use crate::data::Dataset;
use crate::error::{DclsError, Result};
use crate::interp::InterpolationKind;
use crate::kernelgen::{DclsGeometry, DclsParams};
use crate::scalar::Scalar;
use crate::tensor::{next_index, TensorND};
use crate::training::{init_params, Optimizer, ParamGroup, ParamId, ParamKind, ParamStore,
                      SyncGroup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 1x1 convolution over any spatial rank, plus a per-channel bias.
#[derive(Debug)]
pub struct PointwiseLayer<T: Scalar> {
    weight: ParamId,
    bias: ParamId,
    c_in: usize,
    c_out: usize,
    cached_input: Option<TensorND<T>>,
}

impl<T: Scalar> PointwiseLayer<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (c_in as f64).sqrt();
        let mut w = TensorND::zeros(&[c_out, c_in]);
        for v in w.data_mut() {
            *v = T::from_f64_const(rng.gen_range(-bound..bound));
        }
        let weight = store.add(&format!("{name}.weight"), ParamKind::Weight, w)?;
        let bias =
            store.add(&format!("{name}.bias"), ParamKind::Other, TensorND::zeros(&[c_out]))?;
        Ok(Self { weight, bias, c_in, c_out, cached_input: None })
    }

    fn kernel_shape(&self, spatial_rank: usize) -> Vec<usize> {
        let mut shape = vec![self.c_out, self.c_in];
        shape.extend(std::iter::repeat(1).take(spatial_rank));
        shape
    }

    fn run(&self, store: &ParamStore<T>, input: &TensorND<T>) -> Result<TensorND<T>> {
        let spatial_rank = input.rank() - 2;
        let kernel = TensorND::from_vec(
            &self.kernel_shape(spatial_rank),
            store.value(self.weight).data().to_vec(),
        )?;
        let spec = ConvSpec::unit(spatial_rank);
        let mut out = conv_forward(input, &kernel, &spec)?;
        add_channel_bias(&mut out, store.value(self.bias).data());
        Ok(out)
    }

    fn forward(&mut self, store: &ParamStore<T>, input: &TensorND<T>) -> Result<TensorND<T>> {
        let out = self.run(store, input)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(
        &mut self,
        store: &mut ParamStore<T>,
        grad_out: &TensorND<T>,
    ) -> Result<TensorND<T>> {
        let input = self.cached_input.take().ok_or(DclsError::MissingCache)?;
        let spatial_rank = input.rank() - 2;
        let kernel = TensorND::from_vec(
            &self.kernel_shape(spatial_rank),
            store.value(self.weight).data().to_vec(),
        )?;
        let spec = ConvSpec::unit(spatial_rank);
        let (grad_input, grad_kernel) = conv_backward(&input, &kernel, &spec, grad_out)?;
        let grad_w = TensorND::from_vec(&[self.c_out, self.c_in], grad_kernel.data().to_vec())?;
        store.accumulate_grad(self.weight, &grad_w)?;
        store.accumulate_grad(self.bias, &channel_bias_grad(grad_out, self.c_out))?;
        Ok(grad_input)
    }
}

/// Adds a per-channel bias to a [N, C, ...] activation in place.
fn add_channel_bias<T: Scalar>(out: &mut TensorND<T>, bias: &[T]) {
    let c = out.shape()[1];
    let plane: usize = out.shape()[2..].iter().product();
    for batch in out.data_mut().chunks_mut(c * plane) {
        for (co, chunk) in batch.chunks_mut(plane).enumerate() {
            for v in chunk.iter_mut() {
                *v += bias[co];
            }
        }
    }
}

/// Per-channel bias gradient: upstream grad summed over batch and plane.
fn channel_bias_grad<T: Scalar>(grad_out: &TensorND<T>, c_out: usize) -> TensorND<T> {
    let plane: usize = grad_out.shape()[2..].iter().product();
    let mut grad_b = TensorND::zeros(&[c_out]);
    for batch in grad_out.data().chunks(c_out * plane) {
        for (co, chunk) in batch.chunks(plane).enumerate() {
            for g in chunk {
                grad_b.data_mut()[co] += *g;
            }
        }
    }
    grad_b
}

/// Convolution whose kernel is constructed from learnable element positions.
/// Stride 1 with centered (same) padding.
#[derive(Debug)]
pub struct DclsConvLayer<T: Scalar> {
    name: String,
    weight: ParamId,
    bias: ParamId,
    positions: Vec<ParamId>,
    sigmas: Vec<ParamId>,
    geom: DclsGeometry,
    kind: InterpolationKind,
    groups: usize,
    context: Option<DclsLayerContext<T>>,
}

impl<T: Scalar> DclsConvLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        geom: DclsGeometry,
        kind: InterpolationKind,
        seed: u64,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(DclsError::InvalidConvSpec(format!(
                "groups {groups} must divide channels {c_in} -> {c_out}"
            )));
        }
        let c_in_g = c_in / groups;
        let init: DclsParams<T> = init_params(&geom, &kind, c_out, c_in_g, seed);
        let weight = store.add(&format!("{name}.weight"), ParamKind::Weight, init.weights)?;
        let bias =
            store.add(&format!("{name}.bias"), ParamKind::Other, TensorND::zeros(&[c_out]))?;
        let mut positions = Vec::new();
        let mut sigmas = Vec::new();
        for (a, p) in init.positions.into_iter().enumerate() {
            positions.push(store.add(&format!("{name}.position{a}"), ParamKind::Position, p)?);
        }
        for (a, s) in init.sigmas.into_iter().enumerate() {
            sigmas.push(store.add(&format!("{name}.sigma{a}"), ParamKind::Sigma, s)?);
        }
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            positions,
            sigmas,
            geom,
            kind,
            groups,
            context: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn geometry(&self) -> &DclsGeometry {
        &self.geom
    }

    pub fn kind(&self) -> &InterpolationKind {
        &self.kind
    }

    /// Clones the layer's parameters out of the store.
    pub fn current_params(&self, store: &ParamStore<T>) -> DclsParams<T> {
        DclsParams {
            weights: store.value(self.weight).clone(),
            positions: self.positions.iter().map(|&id| store.value(id).clone()).collect(),
            sigmas: self.sigmas.iter().map(|&id| store.value(id).clone()).collect(),
        }
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::same(self.geom.sizes(), self.groups)
    }

    fn forward(&mut self, store: &ParamStore<T>, input: &TensorND<T>) -> Result<TensorND<T>> {
        let params = self.current_params(store);
        let (mut out, ctx) =
            dcls_layer_forward(input, &params, &self.geom, &self.kind, &self.spec())?;
        add_channel_bias(&mut out, store.value(self.bias).data());
        self.context = Some(ctx);
        Ok(out)
    }

    fn infer(&self, store: &ParamStore<T>, input: &TensorND<T>) -> Result<TensorND<T>> {
        let params = self.current_params(store);
        let mut out = dcls_layer_infer(input, &params, &self.geom, &self.kind, &self.spec())?;
        add_channel_bias(&mut out, store.value(self.bias).data());
        Ok(out)
    }

    fn backward(
        &mut self,
        store: &mut ParamStore<T>,
        grad_out: &TensorND<T>,
    ) -> Result<TensorND<T>> {
        let ctx = self.context.take().ok_or(DclsError::MissingCache)?;
        let grads = dcls_layer_backward(&ctx, grad_out)?;
        let c_out = grads.params.weights.shape()[0];
        store.accumulate_grad(self.weight, &grads.params.weights)?;
        store.accumulate_grad(self.bias, &channel_bias_grad(grad_out, c_out))?;
        for (&id, g) in self.positions.iter().zip(&grads.params.positions) {
            store.accumulate_grad(id, g)?;
        }
        for (&id, g) in self.sigmas.iter().zip(&grads.params.sigmas) {
            store.accumulate_grad(id, g)?;
        }
        Ok(grads.input)
    }

    /// Clamps positions back into the grid when the profile requires in-grid
    /// support. Runs after every optimizer step.
    fn post_step(&self, store: &mut ParamStore<T>) {
        if !self.kind.clamp_positions() {
            return;
        }
        for (a, &id) in self.positions.iter().enumerate() {
            let (lo, hi) = self.geom.clamp_range(a);
            let (lo_t, hi_t) = (T::from_f64_const(lo), T::from_f64_const(hi));
            for p in store.value_mut(id).data_mut() {
                if *p < lo_t {
                    *p = lo_t;
                } else if *p > hi_t {
                    *p = hi_t;
                }
            }
        }
    }
}

/// Elementwise max(0, x). The gradient at exactly zero is zero.
#[derive(Debug, Default)]
pub struct ReluLayer<T: Scalar> {
    cached_output: Option<TensorND<T>>,
}

impl<T: Scalar> ReluLayer<T> {
    fn apply(input: &TensorND<T>) -> TensorND<T> {
        let mut out = input.clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        out
    }

    fn forward(&mut self, input: &TensorND<T>) -> TensorND<T> {
        let out = Self::apply(input);
        self.cached_output = Some(out.clone());
        out
    }

    fn backward(&mut self, grad_out: &TensorND<T>) -> Result<TensorND<T>> {
        let out = self.cached_output.take().ok_or(DclsError::MissingCache)?;
        let mut grad = grad_out.clone();
        for (g, y) in grad.data_mut().iter_mut().zip(out.data()) {
            if *y <= T::zero() {
                *g = T::zero();
            }
        }
        Ok(grad)
    }
}

/// Non-overlapping window average over every spatial axis; each axis must be
/// divisible by the window size.
#[derive(Debug)]
pub struct AvgPoolLayer {
    window: usize,
}

impl AvgPoolLayer {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(DclsError::InvalidConvSpec("pooling window must be positive".into()));
        }
        Ok(Self { window })
    }

    fn out_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input_shape[..2].to_vec();
        for (axis, &s) in input_shape[2..].iter().enumerate() {
            if s == 0 || s % self.window != 0 {
                return Err(DclsError::InvalidConvSpec(format!(
                    "spatial axis {axis} of size {s} not divisible by pool window {}",
                    self.window
                )));
            }
            shape.push(s / self.window);
        }
        Ok(shape)
    }

    fn forward<T: Scalar>(&self, input: &TensorND<T>) -> Result<TensorND<T>> {
        let out_shape = self.out_shape(input.shape())?;
        let spatial_rank = input.rank() - 2;
        let cells = self.window.pow(spatial_rank as u32);
        let inv = T::from_f64_const(1.0 / cells as f64);
        let mut out = TensorND::zeros(&out_shape);
        let planes = input.shape()[0] * input.shape()[1];
        let in_plane: usize = input.shape()[2..].iter().product();
        let out_plane: usize = out_shape[2..].iter().product();
        let in_strides: Vec<usize> = {
            let mut s = vec![1; spatial_rank];
            for a in (0..spatial_rank.saturating_sub(1)).rev() {
                s[a] = s[a + 1] * input.shape()[2 + a + 1];
            }
            s
        };
        let window_shape = vec![self.window; spatial_rank];
        for p in 0..planes {
            let src = &input.data()[p * in_plane..(p + 1) * in_plane];
            let dst = &mut out.data_mut()[p * out_plane..(p + 1) * out_plane];
            let mut oidx = vec![0usize; spatial_rank];
            let mut flat = 0usize;
            loop {
                let mut widx = vec![0usize; spatial_rank];
                let mut acc = T::zero();
                loop {
                    let mut off = 0usize;
                    for a in 0..spatial_rank {
                        off += (oidx[a] * self.window + widx[a]) * in_strides[a];
                    }
                    acc += src[off];
                    if !next_index(&mut widx, &window_shape) {
                        break;
                    }
                }
                dst[flat] = acc * inv;
                flat += 1;
                if !next_index(&mut oidx, &out_shape[2..]) {
                    break;
                }
            }
        }
        Ok(out)
    }

    fn backward<T: Scalar>(
        &self,
        input_shape: &[usize],
        grad_out: &TensorND<T>,
    ) -> Result<TensorND<T>> {
        let spatial_rank = input_shape.len() - 2;
        let cells = self.window.pow(spatial_rank as u32);
        let inv = T::from_f64_const(1.0 / cells as f64);
        let mut grad_in = TensorND::zeros(input_shape);
        let planes = input_shape[0] * input_shape[1];
        let in_plane: usize = input_shape[2..].iter().product();
        let out_plane: usize = grad_out.shape()[2..].iter().product();
        let in_strides: Vec<usize> = {
            let mut s = vec![1; spatial_rank];
            for a in (0..spatial_rank.saturating_sub(1)).rev() {
                s[a] = s[a + 1] * input_shape[2 + a + 1];
            }
            s
        };
        let window_shape = vec![self.window; spatial_rank];
        let out_spatial = &grad_out.shape()[2..].to_vec();
        for p in 0..planes {
            let src = &grad_out.data()[p * out_plane..(p + 1) * out_plane];
            let dst = &mut grad_in.data_mut()[p * in_plane..(p + 1) * in_plane];
            let mut oidx = vec![0usize; spatial_rank];
            let mut flat = 0usize;
            loop {
                let share = src[flat] * inv;
                let mut widx = vec![0usize; spatial_rank];
                loop {
                    let mut off = 0usize;
                    for a in 0..spatial_rank {
                        off += (oidx[a] * self.window + widx[a]) * in_strides[a];
                    }
                    dst[off] = share;
                    if !next_index(&mut widx, &window_shape) {
                        break;
                    }
                }
                flat += 1;
                if !next_index(&mut oidx, out_spatial) {
                    break;
                }
            }
        }
        Ok(grad_in)
    }
}

/// Fully connected head: logits = W x + b on [N, D] inputs.
#[derive(Debug)]
pub struct DenseLayer<T: Scalar> {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
    cached_input: Option<TensorND<T>>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut w = TensorND::zeros(&[out_dim, in_dim]);
        for v in w.data_mut() {
            *v = T::from_f64_const(rng.gen_range(-bound..bound));
        }
        let weight = store.add(&format!("{name}.weight"), ParamKind::Weight, w)?;
        let bias =
            store.add(&format!("{name}.bias"), ParamKind::Other, TensorND::zeros(&[out_dim]))?;
        Ok(Self { weight, bias, in_dim, out_dim, cached_input: None })
    }

    fn run(&self, store: &ParamStore<T>, input: &TensorND<T>) -> Result<TensorND<T>> {
        if input.rank() != 2 || input.shape()[1] != self.in_dim {
            return Err(DclsError::ShapeMismatch {
                context: "dense input",
                expected: vec![input.shape()[0], self.in_dim],
                got: input.shape().to_vec(),
            });
        }
        let n = input.shape()[0];
        let w = store.value(self.weight).data();
        let b = store.value(self.bias).data();
        let mut out = TensorND::zeros(&[n, self.out_dim]);
        for i in 0..n {
            let x = &input.data()[i * self.in_dim..(i + 1) * self.in_dim];
            let y = &mut out.data_mut()[i * self.out_dim..(i + 1) * self.out_dim];
            for o in 0..self.out_dim {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = b[o];
                for (wv, xv) in row.iter().zip(x) {
                    acc += *wv * *xv;
                }
                y[o] = acc;
            }
        }
        Ok(out)
    }

    fn forward(&mut self, store: &ParamStore<T>, input: &TensorND<T>) -> Result<TensorND<T>> {
        let out = self.run(store, input)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(
        &mut self,
        store: &mut ParamStore<T>,
        grad_out: &TensorND<T>,
    ) -> Result<TensorND<T>> {
        let input = self.cached_input.take().ok_or(DclsError::MissingCache)?;
        let n = input.shape()[0];
        let w = store.value(self.weight).data().to_vec();
        let mut grad_w = TensorND::zeros(&[self.out_dim, self.in_dim]);
        let mut grad_b = TensorND::zeros(&[self.out_dim]);
        let mut grad_in = TensorND::zeros(&[n, self.in_dim]);
        for i in 0..n {
            let x = &input.data()[i * self.in_dim..(i + 1) * self.in_dim];
            let g = &grad_out.data()[i * self.out_dim..(i + 1) * self.out_dim];
            for o in 0..self.out_dim {
                grad_b.data_mut()[o] += g[o];
                let gw = &mut grad_w.data_mut()[o * self.in_dim..(o + 1) * self.in_dim];
                for (d, xv) in gw.iter_mut().zip(x) {
                    *d += g[o] * *xv;
                }
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                let gi = &mut grad_in.data_mut()[i * self.in_dim..(i + 1) * self.in_dim];
                for (d, wv) in gi.iter_mut().zip(row) {
                    *d += g[o] * *wv;
                }
            }
        }
        store.accumulate_grad(self.weight, &grad_w)?;
        store.accumulate_grad(self.bias, &grad_b)?;
        Ok(grad_in)
    }
}

/// One step of a [`Network`].
#[derive(Debug)]
pub enum Layer<T: Scalar> {
    Pointwise(PointwiseLayer<T>),
    Dcls(DclsConvLayer<T>),
    Relu(ReluLayer<T>),
    AvgPool { layer: AvgPoolLayer, cached_shape: Option<Vec<usize>> },
    /// Mean over all spatial cells: [N, C, ...] -> [N, C].
    GlobalAvgPool { cached_shape: Option<Vec<usize>> },
    Dense(DenseLayer<T>),
}

impl<T: Scalar> Layer<T> {
    fn forward(&mut self, store: &ParamStore<T>, x: &TensorND<T>) -> Result<TensorND<T>> {
        match self {
            Layer::Pointwise(l) => l.forward(store, x),
            Layer::Dcls(l) => l.forward(store, x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::AvgPool { layer, cached_shape } => {
                *cached_shape = Some(x.shape().to_vec());
                layer.forward(x)
            }
            Layer::GlobalAvgPool { cached_shape } => {
                *cached_shape = Some(x.shape().to_vec());
                Ok(global_avg_pool(x))
            }
            Layer::Dense(l) => l.forward(store, x),
        }
    }

    fn infer(&self, store: &ParamStore<T>, x: &TensorND<T>) -> Result<TensorND<T>> {
        match self {
            Layer::Pointwise(l) => l.run(store, x),
            Layer::Dcls(l) => l.infer(store, x),
            Layer::Relu(_) => Ok(ReluLayer::apply(x)),
            Layer::AvgPool { layer, .. } => layer.forward(x),
            Layer::GlobalAvgPool { .. } => Ok(global_avg_pool(x)),
            Layer::Dense(l) => l.run(store, x),
        }
    }

    fn backward(&mut self, store: &mut ParamStore<T>, g: &TensorND<T>) -> Result<TensorND<T>> {
        match self {
            Layer::Pointwise(l) => l.backward(store, g),
            Layer::Dcls(l) => l.backward(store, g),
            Layer::Relu(l) => l.backward(g),
            Layer::AvgPool { layer, cached_shape } => {
                let shape = cached_shape.take().ok_or(DclsError::MissingCache)?;
                layer.backward(&shape, g)
            }
            Layer::GlobalAvgPool { cached_shape } => {
                let shape = cached_shape.take().ok_or(DclsError::MissingCache)?;
                Ok(global_avg_pool_backward(&shape, g))
            }
            Layer::Dense(l) => l.backward(store, g),
        }
    }
}

fn global_avg_pool<T: Scalar>(x: &TensorND<T>) -> TensorND<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane: usize = x.shape()[2..].iter().product();
    let inv = T::from_f64_const(1.0 / plane as f64);
    let mut out = TensorND::zeros(&[n, c]);
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let mut acc = T::zero();
        for v in chunk {
            acc += *v;
        }
        out.data_mut()[i] = acc * inv;
    }
    out
}

fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], g: &TensorND<T>) -> TensorND<T> {
    let plane: usize = input_shape[2..].iter().product();
    let inv = T::from_f64_const(1.0 / plane as f64);
    let mut grad = TensorND::zeros(input_shape);
    for (i, chunk) in grad.data_mut().chunks_mut(plane).enumerate() {
        let share = g.data()[i] * inv;
        for v in chunk {
            *v = share;
        }
    }
    grad
}

/// An ordered stack of layers over one [`ParamStore`].
#[derive(Debug, Default)]
pub struct Network<T: Scalar> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: Layer<T>) {
        self.layers.push(layer);
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// The DCLS layers in network order, for kernel inspection and clamping.
    pub fn dcls_layers(&self) -> impl Iterator<Item = &DclsConvLayer<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Dcls(d) => Some(d),
            _ => None,
        })
    }

    /// Training forward: caches whatever backward needs.
    pub fn forward(&mut self, store: &ParamStore<T>, x: &TensorND<T>) -> Result<TensorND<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(store, &cur)?;
        }
        Ok(cur)
    }

    /// Inference forward: no caches.
    pub fn infer(&self, store: &ParamStore<T>, x: &TensorND<T>) -> Result<TensorND<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(store, &cur)?;
        }
        Ok(cur)
    }

    /// Propagates the loss gradient back through every layer, accumulating
    /// parameter gradients into the store, and returns the input gradient.
    pub fn backward(&mut self, store: &mut ParamStore<T>, grad: &TensorND<T>) -> Result<TensorND<T>> {
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(store, &cur)?;
        }
        Ok(cur)
    }

    /// Post-optimizer policy pass over all layers.
    pub fn post_step(&self, store: &mut ParamStore<T>) {
        for layer in &self.layers {
            if let Layer::Dcls(d) = layer {
                d.post_step(store);
            }
        }
    }
}

/// Mean softmax cross-entropy over the batch, with its gradient with respect
/// to the logits. Row maxima are subtracted before exponentiation.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &TensorND<T>,
    labels: &[usize],
) -> Result<(f64, TensorND<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(DclsError::ShapeMismatch {
            context: "cross entropy",
            expected: vec![labels.len(), logits.shape().get(1).copied().unwrap_or(0)],
            got: logits.shape().to_vec(),
        });
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(DclsError::Dataset(format!("label {bad} outside [0, {k})")));
    }
    let mut grad = TensorND::zeros(&[n, k]);
    let mut total = 0.0f64;
    let inv_n = T::from_f64_const(1.0 / n as f64);
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut maxv = row[0];
        for v in row {
            if *v > maxv {
                maxv = *v;
            }
        }
        let mut denom = 0.0f64;
        for v in row {
            denom += (*v - maxv).as_f64().exp();
        }
        let log_denom = denom.ln();
        let label = labels[i];
        total += log_denom - (row[label] - maxv).as_f64();
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, v) in row.iter().enumerate() {
            let p = ((*v - maxv).as_f64().exp() / denom).max(0.0);
            let delta = if j == label { 1.0 } else { 0.0 };
            g[j] = T::from_f64_const(p - delta) * inv_n;
        }
    }
    Ok((total / n as f64, grad))
}

/// Fraction of rows whose argmax equals the label; ties resolve to the lower
/// index.
pub fn accuracy<T: Scalar>(logits: &TensorND<T>, labels: &[usize]) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut hits = 0usize;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Gathers dataset samples `ids` into a batch tensor and label list.
pub fn gather_batch<T: Scalar>(ds: &Dataset<T>, ids: &[usize]) -> Result<(TensorND<T>, Vec<usize>)> {
    let (c, h, w) = ds.image_dims();
    let mut data = Vec::with_capacity(ids.len() * c * h * w);
    let mut labels = Vec::with_capacity(ids.len());
    for &i in ids {
        data.extend_from_slice(ds.image(i));
        labels.push(ds.labels()[i]);
    }
    let images = TensorND::from_vec(&[ids.len(), c, h, w], data)?;
    Ok((images, labels))
}

/// Loop controls for [`train`].
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

/// What one epoch produced.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Runs the full training loop: seeded shuffle, batches, backward, sync
/// reduction, optimizer step, value broadcast, post-step policy. A non-finite
/// loss or gradient aborts with an error before any parameter changes.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    store: &mut ParamStore<T>,
    optimizer: &mut Optimizer<T>,
    groups: &[ParamGroup],
    sync_groups: &[SyncGroup],
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    settings: &TrainSettings,
) -> Result<Vec<EpochStats>> {
    if settings.batch_size == 0 {
        return Err(DclsError::Training("batch size must be positive".into()));
    }
    let n = train_set.len();
    let mut stats = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(settings.shuffle_seed.wrapping_add(epoch as u64));
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0f64;
        for batch_ids in order.chunks(settings.batch_size) {
            let (images, labels) = gather_batch(train_set, batch_ids)?;
            store.zero_grads();
            let logits = net.forward(store, &images)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(DclsError::NonFinite("loss"));
            }
            loss_sum += loss * batch_ids.len() as f64;
            net.backward(store, &grad)?;
            for sync in sync_groups {
                sync.reduce_grads(store)?;
            }
            optimizer.step(store, groups)?;
            for sync in sync_groups {
                sync.broadcast_values(store)?;
            }
            net.post_step(store);
        }
        let train_loss = loss_sum / n as f64;
        let val_accuracy = match val_set {
            Some(vs) => Some(evaluate(net, store, vs, settings.batch_size)?.0),
            None => None,
        };
        stats.push(EpochStats { epoch: epoch + 1, train_loss, val_accuracy });
    }
    Ok(stats)
}

/// (accuracy, mean loss) of the network on a dataset, batched inference.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    store: &ParamStore<T>,
    ds: &Dataset<T>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = ds.len();
    let ids: Vec<usize> = (0..n).collect();
    let mut hits = 0.0f64;
    let mut loss_sum = 0.0f64;
    for batch_ids in ids.chunks(batch_size.max(1)) {
        let (images, labels) = gather_batch(ds, batch_ids)?;
        let logits = net.infer(store, &images)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        hits += accuracy(&logits, &labels) * batch_ids.len() as f64;
        loss_sum += loss * batch_ids.len() as f64;
    }
    Ok((hits / n as f64, loss_sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_longrange;
    use crate::training::{default_groups, OptimizerConfig};

    fn tiny_net(
        store: &mut ParamStore<f64>,
        channels: usize,
        classes: usize,
        kind: InterpolationKind,
    ) -> Network<f64> {
        let mut net = Network::new();
        net.push(Layer::Pointwise(
            PointwiseLayer::new(store, "stem", 1, channels, 1).unwrap(),
        ));
        net.push(Layer::Relu(ReluLayer::default()));
        let geom = DclsGeometry::new(&[7, 7], 4).unwrap();
        net.push(Layer::Dcls(
            DclsConvLayer::new(store, "dcls1", channels, channels, channels, geom, kind, 2)
                .unwrap(),
        ));
        net.push(Layer::Relu(ReluLayer::default()));
        net.push(Layer::GlobalAvgPool { cached_shape: None });
        net.push(Layer::Dense(DenseLayer::new(store, "head", channels, classes, 3).unwrap()));
        net
    }

    #[test]
    fn forward_shapes_flow_through_the_stack() {
        let mut store = ParamStore::new();
        let mut net = tiny_net(&mut store, 3, 4, InterpolationKind::gauss());
        let x = TensorND::full(&[2, 1, 16, 16], 0.5);
        let y = net.forward(&store, &x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        let y2 = net.infer(&store, &x).unwrap();
        assert_eq!(y.data(), y2.data(), "cached and cacheless paths agree");
    }

    #[test]
    fn avg_pool_averages_disjoint_windows() {
        let pool = AvgPoolLayer::new(2).unwrap();
        let x = TensorND::from_vec(&[1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[(1.0 + 2.0 + 5.0 + 6.0) / 4.0, (3.0 + 4.0 + 7.0 + 8.0) / 4.0]);
        let g = TensorND::from_vec(&[1, 1, 1, 2], vec![4.0, 8.0]).unwrap();
        let gi = pool.backward(&[1, 1, 2, 4], &g).unwrap();
        assert_eq!(gi.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let odd = TensorND::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(pool.forward(&odd).is_err());
    }

    #[test]
    fn softmax_cross_entropy_matches_hand_values() {
        // Uniform logits over 4 classes: loss = ln 4, grad = (1/4 - onehot)/n.
        let logits = TensorND::<f64>::zeros(&[2, 4]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((grad.get(&[0, 0]) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((grad.get(&[0, 1]) - 0.25 / 2.0).abs() < 1e-12);
        assert!((grad.get(&[1, 3]) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits =
            TensorND::from_vec(&[2, 3], vec![0.3, -0.7, 1.2, 0.05, 0.0, -0.4]).unwrap();
        let labels = [2usize, 1];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let (lp, _) = softmax_cross_entropy(&plus, &labels).unwrap();
            let (lm, _) = softmax_cross_entropy(&minus, &labels).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad.data()[i]).abs() < 1e-8,
                "coordinate {i}: fd {fd} vs analytic {}",
                grad.data()[i]
            );
        }
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits =
            TensorND::from_vec(&[3, 2], vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5]).unwrap();
        // Row 2 ties; the lower index wins, so label 0 counts as a hit.
        assert_eq!(accuracy(&logits, &[0, 1, 0]), 1.0);
        assert_eq!(accuracy(&logits, &[1, 1, 1]), 1.0 / 3.0);
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut net = tiny_net(&mut store, 2, 4, InterpolationKind::gauss());
        // Lift biases so no rectifier preactivation sits within the
        // finite-difference step of its kink; the fixed seed keeps it so.
        for id in store.ids().collect::<Vec<_>>() {
            if store.entry(id).name().ends_with(".bias") {
                store.value_mut(id).fill(0.07);
            }
        }
        let ds = synth_longrange::<f64>(4, 16, 4, 13).unwrap();
        let ids: Vec<usize> = (0..4).collect();
        let (images, labels) = gather_batch(&ds, &ids).unwrap();

        store.zero_grads();
        let logits = net.forward(&store, &images).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        net.backward(&mut store, &grad).unwrap();
        let analytic: Vec<f64> = store
            .ids()
            .flat_map(|id| store.grad(id).data().to_vec())
            .collect();

        let mut flat: Vec<f64> = store
            .ids()
            .flat_map(|id| store.value(id).data().to_vec())
            .collect();
        let h = 1e-5;
        for i in 0..flat.len() {
            let base = flat[i];
            let mut eval = |x: f64| -> f64 {
                flat[i] = x;
                let mut pos = 0;
                for id in store.ids() {
                    let len = store.value(id).len();
                    store.value_mut(id).data_mut().copy_from_slice(&flat[pos..pos + len]);
                    pos += len;
                }
                flat[i] = base;
                let logits = net.infer(&store, &images).unwrap();
                softmax_cross_entropy(&logits, &labels).unwrap().0
            };
            let fd = (eval(base + h) - eval(base - h)) / (2.0 * h);
            eval(base);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-12);
            let rel = (analytic[i] - fd).abs() / denom;
            assert!(
                rel < 1e-4 || (analytic[i] - fd).abs() < 1e-9,
                "param coordinate {i}: analytic {} vs fd {fd} (rel {rel})",
                analytic[i]
            );
        }
    }

    #[test]
    fn training_steps_drive_down_a_separable_task() {
        // Class k images are near-constant at brightness (k+1)/5, so global
        // pooling alone separates them; the full stack must fit this fast.
        let mut images = TensorND::zeros(&[16, 1, 16, 16]);
        let mut labels = Vec::new();
        for i in 0..16usize {
            let class = i % 4;
            let level = (class + 1) as f64 / 5.0 + 0.002 * (i / 4) as f64;
            let img = &mut images.data_mut()[i * 256..(i + 1) * 256];
            img.fill(level);
            labels.push(class);
        }
        let mut store = ParamStore::new();
        let mut net = tiny_net(&mut store, 3, 4, InterpolationKind::gauss());
        let groups = default_groups(&store);
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.05, 0.0));

        let before = softmax_cross_entropy(&net.infer(&store, &images).unwrap(), &labels)
            .unwrap()
            .0;
        for _ in 0..40 {
            store.zero_grads();
            let logits = net.forward(&store, &images).unwrap();
            let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
            net.backward(&mut store, &grad).unwrap();
            opt.step(&mut store, &groups).unwrap();
            net.post_step(&mut store);
        }
        let logits = net.infer(&store, &images).unwrap();
        let after = softmax_cross_entropy(&logits, &labels).unwrap().0;
        assert!(
            after < 0.5 * before,
            "loss did not drop: before {before}, after {after}"
        );
        assert_eq!(accuracy(&logits, &labels), 1.0, "separable task must be fit exactly");
    }

    #[test]
    fn trainer_is_deterministic_in_its_seeds() {
        let run = || -> Vec<f64> {
            let mut store = ParamStore::new();
            let mut net = tiny_net(&mut store, 2, 4, InterpolationKind::triangle());
            let ds = synth_longrange::<f64>(32, 16, 4, 6).unwrap();
            let groups = default_groups(&store);
            let mut opt = Optimizer::new(OptimizerConfig::sgd(0.05, 0.0));
            let settings = TrainSettings { epochs: 2, batch_size: 8, shuffle_seed: 9 };
            let stats = train(
                &mut net,
                &mut store,
                &mut opt,
                &groups,
                &[],
                &ds,
                Some(&ds),
                &settings,
            )
            .unwrap();
            stats.iter().map(|s| s.train_loss).collect()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits(), "identical seeds give identical losses");
        }
    }

    #[test]
    fn bilinear_positions_stay_clamped_during_training() {
        let mut store = ParamStore::new();
        let mut net = tiny_net(&mut store, 2, 4, InterpolationKind::bilinear());
        let ds = synth_longrange::<f64>(16, 16, 4, 7).unwrap();
        let groups = default_groups(&store);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(50.0, 0.0));
        let settings = TrainSettings { epochs: 1, batch_size: 8, shuffle_seed: 1 };
        train(&mut net, &mut store, &mut opt, &groups, &[], &ds, None, &settings).unwrap();
        let layer = net.dcls_layers().next().unwrap();
        let params = layer.current_params(&store);
        for (a, p) in params.positions.iter().enumerate() {
            let (lo, hi) = layer.geometry().clamp_range(a);
            for v in p.data() {
                assert!(
                    (lo..=hi).contains(v),
                    "position {v} escaped [{lo}, {hi}] despite the clamp hook"
                );
            }
        }
    }

    #[test]
    fn evaluate_reports_chance_level_for_fresh_nets() {
        let mut store = ParamStore::new();
        let net = tiny_net(&mut store, 2, 4, InterpolationKind::gauss());
        let ds = synth_longrange::<f64>(40, 16, 4, 8).unwrap();
        let (acc, loss) = evaluate(&net, &store, &ds, 16).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(loss > 0.5 && loss < 3.0, "fresh-net loss {loss} far from ln(4)");
    }
}
