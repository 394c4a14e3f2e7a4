//! Differentiable construction of dense convolution kernels from learnable
//! element positions, widths, and weights.
//!
//! Each of the `m` kernel elements carries a weight per channel pair, one
//! fractional position per spatial axis, and one raw width per spatial axis.
//! Construction evaluates the interpolation profile of every element over the
//! whole kernel grid as a product across axes, normalizes each element's map
//! by `epsilon + sum`, and accumulates `weight * normalized_map` into the
//! dense kernel. Every step is smooth (up to the documented kinks), so exact
//! reverse-mode gradients flow to weights, positions, and widths.
//!
//! Conventions, fixed for reproducibility:
//! * grid indices are zero-based; positions are stored centered and shifted
//!   by `size / 2` (floor) per axis at construction time;
//! * element maps are accumulated in ascending element order;
//! * the shift is constant, so position gradients pass through unchanged;
//! * backward consumes state cached by the forward pass and recomputes no
//!   profile values.

use crate::error::{DclsError, Result};
use crate::interp::InterpolationKind;
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::{next_index, TensorND};

/// Normalization guard: element maps are divided by `EPSILON + sum`.
pub const EPSILON: f64 = 1e-7;

/// Keeps clamped positions strictly below the last grid cell so the upper
/// interpolation neighbor stays in range.
pub const CLAMP_MARGIN: f64 = 1e-6;

pub const MAX_RANK: usize = 3;

/// Kernel grid extents and the number of learnable elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DclsGeometry {
    sizes: Vec<usize>,
    kernel_count: usize,
}

impl DclsGeometry {
    pub fn new(sizes: &[usize], kernel_count: usize) -> Result<Self> {
        if sizes.is_empty() || sizes.len() > MAX_RANK {
            return Err(DclsError::InvalidGeometry(format!(
                "spatial rank must be 1..={MAX_RANK}, got {}",
                sizes.len()
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(DclsError::InvalidGeometry(format!(
                "kernel sizes must be at least 1, got {sizes:?}"
            )));
        }
        if kernel_count == 0 {
            return Err(DclsError::InvalidGeometry(
                "kernel_count must be at least 1".into(),
            ));
        }
        Ok(DclsGeometry {
            sizes: sizes.to_vec(),
            kernel_count,
        })
    }

    #[inline]
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    #[inline]
    pub fn kernel_count(&self) -> usize {
        self.kernel_count
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.sizes.len()
    }

    #[inline]
    pub fn grid_len(&self) -> usize {
        self.sizes.iter().product()
    }

    /// Shift applied to centered positions on `axis`; floor division covers
    /// even sizes.
    #[inline]
    pub fn center_offset(&self, axis: usize) -> usize {
        self.sizes[axis] / 2
    }

    /// Inclusive centered-position range that keeps an element's grid-shifted
    /// coordinate inside `[0, size - 1 - CLAMP_MARGIN]`.
    pub fn clamp_range(&self, axis: usize) -> (f64, f64) {
        let s = self.sizes[axis];
        let lo = -((s / 2) as f64);
        let hi = (s - 1 - s / 2) as f64 - CLAMP_MARGIN;
        (lo, hi.max(lo))
    }
}

/// Learnable state of one dilated layer: per channel pair and element, a
/// weight plus one position and one raw width per axis.
///
/// All tensors share the shape `[c_out, c_in_per_group, kernel_count]`.
/// `positions[a]` and `sigmas[a]` belong to spatial axis `a` of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DclsParams<T> {
    pub weights: TensorND<T>,
    pub positions: Vec<TensorND<T>>,
    pub sigmas: Vec<TensorND<T>>,
}

impl<T: Scalar> DclsParams<T> {
    pub fn zeros(geom: &DclsGeometry, c_out: usize, c_in_per_group: usize) -> Self {
        let shape = [c_out, c_in_per_group, geom.kernel_count()];
        DclsParams {
            weights: TensorND::zeros(&shape),
            positions: (0..geom.rank()).map(|_| TensorND::zeros(&shape)).collect(),
            sigmas: (0..geom.rank()).map(|_| TensorND::zeros(&shape)).collect(),
        }
    }

    /// `(c_out, c_in_per_group, kernel_count)` from the weight tensor.
    pub fn channel_shape(&self) -> Result<(usize, usize, usize)> {
        let s = self.weights.shape();
        if s.len() != 3 {
            return Err(DclsError::ShapeMismatch {
                context: "DclsParams weights must be [c_out, c_in_per_group, m]",
                expected: vec![3],
                got: vec![s.len()],
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    pub fn validate(&self, geom: &DclsGeometry) -> Result<()> {
        let (_, _, m) = self.channel_shape()?;
        if m != geom.kernel_count() {
            return Err(DclsError::ShapeMismatch {
                context: "DclsParams kernel_count",
                expected: vec![geom.kernel_count()],
                got: vec![m],
            });
        }
        if self.positions.len() != geom.rank() || self.sigmas.len() != geom.rank() {
            return Err(DclsError::ShapeMismatch {
                context: "DclsParams per-axis tensors",
                expected: vec![geom.rank(), geom.rank()],
                got: vec![self.positions.len(), self.sigmas.len()],
            });
        }
        for t in self.positions.iter().chain(self.sigmas.iter()) {
            if t.shape() != self.weights.shape() {
                return Err(DclsError::ShapeMismatch {
                    context: "DclsParams axis tensor shape",
                    expected: self.weights.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if !self.weights.all_finite() {
            return Err(DclsError::NonFinite("DclsParams weights"));
        }
        if self.positions.iter().any(|t| !t.all_finite()) {
            return Err(DclsError::NonFinite("DclsParams positions"));
        }
        if self.sigmas.iter().any(|t| !t.all_finite()) {
            return Err(DclsError::NonFinite("DclsParams sigmas"));
        }
        Ok(())
    }
}

/// Gradients with respect to [`DclsParams`], same shapes throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct DclsGradients<T> {
    pub weights: TensorND<T>,
    pub positions: Vec<TensorND<T>>,
    pub sigmas: Vec<TensorND<T>>,
}

/// Per-channel-pair forward state kept for backward.
#[derive(Debug, Clone)]
struct PairCache<T> {
    /// `kernel_count` normalization denominators `EPSILON + sum`.
    norms: Vec<T>,
    /// `kernel_count * grid_len` normalized element maps.
    hnorm: Vec<T>,
    /// Per axis: `kernel_count * size` profile values.
    axis_vals: Vec<Vec<T>>,
    /// Per axis: profile derivatives with respect to the grid offset.
    axis_dx: Vec<Vec<T>>,
    /// Per axis: profile derivatives with respect to the raw width.
    axis_dsig: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
struct KernelCache<T> {
    geom: DclsGeometry,
    weights: TensorND<T>,
    pairs: Vec<PairCache<T>>,
}

/// Dense kernel produced by [`construct_kernel`], with the forward state
/// needed by [`construct_kernel_backward`] unless built for inference.
#[derive(Debug, Clone)]
pub struct ConstructedKernel<T> {
    pub kernel: TensorND<T>,
    cache: Option<KernelCache<T>>,
}

impl<T> ConstructedKernel<T> {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Drops the backward state, keeping only the dense kernel.
    pub fn into_inference(mut self) -> Self {
        self.cache = None;
        self
    }
}

fn build<T: Scalar>(
    params: &DclsParams<T>,
    geom: &DclsGeometry,
    kind: &InterpolationKind,
    with_cache: bool,
) -> Result<ConstructedKernel<T>> {
    params.validate(geom)?;
    let (c_out, c_in_g, m) = params.channel_shape()?;
    let rank = geom.rank();
    let grid = geom.grid_len();
    let n_pairs = c_out * c_in_g;

    let mut kernel_shape = vec![c_out, c_in_g];
    kernel_shape.extend_from_slice(geom.sizes());
    let mut kernel = TensorND::zeros(&kernel_shape);

    let mut pair_caches: Vec<PairCache<T>> = (0..n_pairs)
        .map(|_| PairCache {
            norms: vec![T::zero(); if with_cache { m } else { 0 }],
            hnorm: vec![T::zero(); if with_cache { m * grid } else { 0 }],
            axis_vals: (0..rank)
                .map(|a| vec![T::zero(); m * geom.sizes()[a]])
                .collect(),
            axis_dx: (0..rank)
                .map(|a| vec![T::zero(); if with_cache { m * geom.sizes()[a] } else { 0 }])
                .collect(),
            axis_dsig: (0..rank)
                .map(|a| vec![T::zero(); if with_cache { m * geom.sizes()[a] } else { 0 }])
                .collect(),
        })
        .collect();

    let eps = T::from_f64_const(EPSILON);
    let sizes = geom.sizes().to_vec();

    {
        let work: Vec<(usize, (&mut [T], &mut PairCache<T>))> = kernel
            .data_mut()
            .chunks_mut(grid)
            .zip(pair_caches.iter_mut())
            .enumerate()
            .collect();

        parallel::for_each_chunk(work, |pr, (k_slice, pc)| {
            let mut h_buf = vec![T::zero(); grid];
            for k in 0..m {
                let e = pr * m + k;
                let w = params.weights.data()[e];

                for a in 0..rank {
                    let s_a = sizes[a];
                    let q = params.positions[a].data()[e]
                        + T::from_index(geom.center_offset(a));
                    let sig = params.sigmas[a].data()[e];
                    for i in 0..s_a {
                        let x = q - T::from_index(i);
                        pc.axis_vals[a][k * s_a + i] = kind.eval(x, sig);
                        if with_cache {
                            let (dx, ds) = kind.grad(x, sig);
                            pc.axis_dx[a][k * s_a + i] = dx;
                            pc.axis_dsig[a][k * s_a + i] = ds;
                        }
                    }
                }

                let mut idx = [0usize; MAX_RANK];
                idx[..rank].fill(0);
                let mut sum = T::zero();
                for (g, h_out) in h_buf.iter_mut().enumerate() {
                    let mut h = T::one();
                    for a in 0..rank {
                        h *= pc.axis_vals[a][k * sizes[a] + idx[a]];
                    }
                    *h_out = h;
                    sum += h;
                    if g + 1 < grid {
                        next_index(&mut idx[..rank], &sizes);
                    }
                }

                let inv = T::one() / (eps + sum);
                for (g, &h) in h_buf.iter().enumerate() {
                    let hn = h * inv;
                    if with_cache {
                        pc.hnorm[k * grid + g] = hn;
                    }
                    k_slice[g] += w * hn;
                }
                if with_cache {
                    pc.norms[k] = eps + sum;
                }
            }
        });
    }

    let cache = if with_cache {
        Some(KernelCache {
            geom: geom.clone(),
            weights: params.weights.clone(),
            pairs: pair_caches,
        })
    } else {
        None
    };
    Ok(ConstructedKernel { kernel, cache })
}

/// Builds the dense kernel and caches the per-element state backward needs.
pub fn construct_kernel<T: Scalar>(
    params: &DclsParams<T>,
    geom: &DclsGeometry,
    kind: &InterpolationKind,
) -> Result<ConstructedKernel<T>> {
    build(params, geom, kind, true)
}

/// Builds the dense kernel only; [`construct_kernel_backward`] on the result
/// fails with [`DclsError::MissingCache`].
pub fn construct_kernel_inference<T: Scalar>(
    params: &DclsParams<T>,
    geom: &DclsGeometry,
    kind: &InterpolationKind,
) -> Result<ConstructedKernel<T>> {
    build(params, geom, kind, false)
}

/// Pulls `grad_kernel` back to weight, position, and width gradients.
///
/// Position gradients flow through the constant center shift unchanged, and
/// the normalization is differentiated with the quotient rule at the cached
/// denominator. Under `Bilinear` the width gradient is identically zero.
pub fn construct_kernel_backward<T: Scalar>(
    constructed: &ConstructedKernel<T>,
    grad_kernel: &TensorND<T>,
) -> Result<DclsGradients<T>> {
    let cache = constructed.cache.as_ref().ok_or(DclsError::MissingCache)?;
    if grad_kernel.shape() != constructed.kernel.shape() {
        return Err(DclsError::ShapeMismatch {
            context: "construct_kernel_backward grad shape",
            expected: constructed.kernel.shape().to_vec(),
            got: grad_kernel.shape().to_vec(),
        });
    }

    let geom = &cache.geom;
    let rank = geom.rank();
    let grid = geom.grid_len();
    let m = geom.kernel_count();
    let sizes = geom.sizes().to_vec();
    let param_shape = cache.weights.shape().to_vec();
    let n_pairs = param_shape[0] * param_shape[1];

    struct PairGrads<T> {
        w: Vec<T>,
        p: Vec<Vec<T>>,
        s: Vec<Vec<T>>,
    }

    let mut pair_grads: Vec<PairGrads<T>> = (0..n_pairs)
        .map(|_| PairGrads {
            w: vec![T::zero(); m],
            p: (0..rank).map(|_| vec![T::zero(); m]).collect(),
            s: (0..rank).map(|_| vec![T::zero(); m]).collect(),
        })
        .collect();

    {
        let work: Vec<(usize, &mut PairGrads<T>)> =
            pair_grads.iter_mut().enumerate().collect();

        parallel::for_each_chunk(work, |pr, out| {
            let pc = &cache.pairs[pr];
            let g_slice = &grad_kernel.data()[pr * grid..(pr + 1) * grid];
            let mut dldh = vec![T::zero(); grid];
            let mut marg = vec![T::zero(); *sizes.iter().max().unwrap()];

            for k in 0..m {
                let w = cache.weights.data()[pr * m + k];
                let hn = &pc.hnorm[k * grid..(k + 1) * grid];

                let mut dw = T::zero();
                for g in 0..grid {
                    dw += g_slice[g] * hn[g];
                }
                out.w[k] = dw;

                // d/dH of grad . (w * H / norm): quotient rule with the sum
                // term folded into dw.
                let inv = T::one() / pc.norms[k];
                for g in 0..grid {
                    dldh[g] = w * (g_slice[g] - dw) * inv;
                }

                for a in 0..rank {
                    let s_a = sizes[a];
                    marg[..s_a].fill(T::zero());
                    let mut idx = [0usize; MAX_RANK];
                    idx[..rank].fill(0);
                    for (g, &d) in dldh.iter().enumerate() {
                        let mut prod = T::one();
                        for b in 0..rank {
                            if b != a {
                                prod *= pc.axis_vals[b][k * sizes[b] + idx[b]];
                            }
                        }
                        marg[idx[a]] += d * prod;
                        if g + 1 < grid {
                            next_index(&mut idx[..rank], &sizes);
                        }
                    }
                    let mut dq = T::zero();
                    let mut dsig = T::zero();
                    for i in 0..s_a {
                        dq += marg[i] * pc.axis_dx[a][k * s_a + i];
                        dsig += marg[i] * pc.axis_dsig[a][k * s_a + i];
                    }
                    out.p[a][k] = dq;
                    out.s[a][k] = dsig;
                }
            }
        });
    }

    let mut grads = DclsGradients {
        weights: TensorND::zeros(&param_shape),
        positions: (0..rank).map(|_| TensorND::zeros(&param_shape)).collect(),
        sigmas: (0..rank).map(|_| TensorND::zeros(&param_shape)).collect(),
    };
    for (pr, pg) in pair_grads.iter().enumerate() {
        grads.weights.data_mut()[pr * m..(pr + 1) * m].copy_from_slice(&pg.w);
        for a in 0..rank {
            grads.positions[a].data_mut()[pr * m..(pr + 1) * m].copy_from_slice(&pg.p[a]);
            grads.sigmas[a].data_mut()[pr * m..(pr + 1) * m].copy_from_slice(&pg.s[a]);
        }
    }
    Ok(grads)
}

/// Clamps centered positions into the per-axis range from
/// [`DclsGeometry::clamp_range`]. Applied after optimizer steps for kinds
/// whose support must stay inside the grid.
pub fn clamp_positions<T: Scalar>(params: &mut DclsParams<T>, geom: &DclsGeometry) {
    for a in 0..geom.rank().min(params.positions.len()) {
        let (lo, hi) = geom.clamp_range(a);
        let lo = T::from_f64_const(lo);
        let hi = T::from_f64_const(hi);
        for p in params.positions[a].data_mut() {
            *p = (*p).max(lo).min(hi);
        }
    }
}
