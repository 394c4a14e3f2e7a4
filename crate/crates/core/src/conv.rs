//! Grouped N-dimensional convolution with exact reverse-mode gradients.
//!
//! Semantics are cross-correlation (no kernel flip) over zero-padded input:
//!
//! ```text
//! out[n, co, o] = sum_ci sum_t in[n, base + ci, o * stride + t - pad] * k[co, ci, t]
//! ```
//!
//! with `out_a = (in_a + 2 * pad_a - k_a) / stride_a + 1` (floor) per spatial
//! axis. Input layout is `[batch, channels, spatial...]`, kernels are
//! `[c_out, c_in_per_group, spatial...]`, spatial rank 1 to 3.
//!
//! The engine lowers each `(batch, group)` slice to a column matrix and runs
//! a fixed-order matrix product, so results are deterministic; work splits
//! across batch entries without changing any accumulation order.

use crate::error::{DclsError, Result};
use crate::interp::InterpolationKind;
use crate::kernelgen::{
    construct_kernel, construct_kernel_backward, ConstructedKernel, DclsGeometry, DclsGradients,
    DclsParams,
};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::{next_index, TensorND};

/// Stride, zero padding, and channel grouping of one convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    pub fn unit(rank: usize) -> Self {
        ConvSpec {
            stride: vec![1; rank],
            padding: vec![0; rank],
            groups: 1,
        }
    }

    /// Stride-1 spec padding by `size / 2` per axis; for odd sizes the output
    /// matches the input extent.
    pub fn same(kernel_sizes: &[usize], groups: usize) -> Self {
        ConvSpec {
            stride: vec![1; kernel_sizes.len()],
            padding: kernel_sizes.iter().map(|&s| s / 2).collect(),
            groups,
        }
    }

    /// Validates shapes and returns the full output shape
    /// `[batch, c_out, out_spatial...]`.
    pub fn output_shape(&self, input: &[usize], kernel: &[usize]) -> Result<Vec<usize>> {
        if input.len() < 3 || input.len() > 2 + 3 {
            return Err(DclsError::InvalidConvSpec(format!(
                "input must be [batch, channels, 1..=3 spatial axes], got {input:?}"
            )));
        }
        let rank = input.len() - 2;
        if kernel.len() != rank + 2 {
            return Err(DclsError::ShapeMismatch {
                context: "kernel rank",
                expected: vec![rank + 2],
                got: vec![kernel.len()],
            });
        }
        if self.stride.len() != rank || self.padding.len() != rank {
            return Err(DclsError::InvalidConvSpec(format!(
                "stride/padding must have {rank} axes, got {}/{}",
                self.stride.len(),
                self.padding.len()
            )));
        }
        if self.stride.iter().any(|&s| s == 0) {
            return Err(DclsError::InvalidConvSpec("stride must be positive".into()));
        }
        if self.groups == 0 {
            return Err(DclsError::InvalidConvSpec("groups must be positive".into()));
        }
        let (c_in, c_out) = (input[1], kernel[0]);
        if c_in % self.groups != 0 || c_out % self.groups != 0 {
            return Err(DclsError::InvalidConvSpec(format!(
                "groups {} must divide c_in {c_in} and c_out {c_out}",
                self.groups
            )));
        }
        if kernel[1] != c_in / self.groups {
            return Err(DclsError::ShapeMismatch {
                context: "kernel input channels per group",
                expected: vec![c_in / self.groups],
                got: vec![kernel[1]],
            });
        }
        let mut out = vec![input[0], c_out];
        for a in 0..rank {
            let padded = input[2 + a] + 2 * self.padding[a];
            if padded < kernel[2 + a] {
                return Err(DclsError::EmptyOutput {
                    axis: a,
                    input: input[2 + a],
                    padding: self.padding[a],
                    kernel: kernel[2 + a],
                    stride: self.stride[a],
                });
            }
            out.push((padded - kernel[2 + a]) / self.stride[a] + 1);
        }
        Ok(out)
    }
}

/// Gathers one `(batch, group)` slice into `col[(ci * taps + tap) * out_sp + o]`,
/// writing zeros where a tap falls into padding.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    in_spatial: &[usize],
    k_spatial: &[usize],
    out_spatial: &[usize],
    stride: &[usize],
    padding: &[usize],
    c_in_g: usize,
    col: &mut [T],
) {
    let rank = in_spatial.len();
    let in_sp: usize = in_spatial.iter().product();
    let out_sp: usize = out_spatial.iter().product();
    let taps: usize = k_spatial.iter().product();
    let in_last = in_spatial[rank - 1];
    let out_last = out_spatial[rank - 1];
    let st_last = stride[rank - 1];

    // Row-major strides of the input spatial block.
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank - 1).rev() {
        in_strides[a] = in_strides[a + 1] * in_spatial[a + 1];
    }

    let outer_shape = &out_spatial[..rank - 1];
    let outer_count: usize = outer_shape.iter().product();

    let mut tap = vec![0usize; rank];
    for ci in 0..c_in_g {
        let ch = &input[ci * in_sp..(ci + 1) * in_sp];
        tap.fill(0);
        for tf in 0..taps {
            let row = &mut col[(ci * taps + tf) * out_sp..(ci * taps + tf + 1) * out_sp];
            let off_last = tap[rank - 1] as isize - padding[rank - 1] as isize;
            // Valid inner range: 0 <= j * st_last + off_last < in_last.
            let j_lo = if off_last >= 0 {
                0
            } else {
                ((-off_last) as usize).div_ceil(st_last)
            };
            let j_hi_excl = {
                let top = in_last as isize - 1 - off_last;
                if top < 0 {
                    0
                } else {
                    ((top as usize) / st_last + 1).min(out_last)
                }
            };

            let mut outer = vec![0usize; rank.saturating_sub(1)];
            for oc in 0..outer_count {
                let dst = &mut row[oc * out_last..(oc + 1) * out_last];
                let mut src_base = 0isize;
                let mut in_bounds = true;
                for a in 0..rank - 1 {
                    let y = (outer[a] * stride[a] + tap[a]) as isize - padding[a] as isize;
                    if y < 0 || y >= in_spatial[a] as isize {
                        in_bounds = false;
                        break;
                    }
                    src_base += y * in_strides[a] as isize;
                }
                if !in_bounds || j_lo >= j_hi_excl {
                    dst.fill(T::zero());
                } else {
                    dst[..j_lo].fill(T::zero());
                    let base = src_base as usize;
                    for jj in j_lo..j_hi_excl {
                        let y_last = ((jj * st_last) as isize + off_last) as usize;
                        dst[jj] = ch[base + y_last];
                    }
                    dst[j_hi_excl..].fill(T::zero());
                }
                if oc + 1 < outer_count {
                    next_index(&mut outer, outer_shape);
                }
            }
            if tf + 1 < taps {
                next_index(&mut tap, k_spatial);
            }
        }
    }
}

/// Scatters `col` gradients back onto one `(batch, group)` input slice,
/// mirroring the gather order of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    grad_input: &mut [T],
    in_spatial: &[usize],
    k_spatial: &[usize],
    out_spatial: &[usize],
    stride: &[usize],
    padding: &[usize],
    c_in_g: usize,
    col: &[T],
) {
    let rank = in_spatial.len();
    let in_sp: usize = in_spatial.iter().product();
    let out_sp: usize = out_spatial.iter().product();
    let taps: usize = k_spatial.iter().product();
    let in_last = in_spatial[rank - 1];
    let out_last = out_spatial[rank - 1];
    let st_last = stride[rank - 1];

    let mut in_strides = vec![1usize; rank];
    for a in (0..rank - 1).rev() {
        in_strides[a] = in_strides[a + 1] * in_spatial[a + 1];
    }
    let outer_shape = &out_spatial[..rank - 1];
    let outer_count: usize = outer_shape.iter().product();

    let mut tap = vec![0usize; rank];
    for ci in 0..c_in_g {
        let ch = &mut grad_input[ci * in_sp..(ci + 1) * in_sp];
        tap.fill(0);
        for tf in 0..taps {
            let row = &col[(ci * taps + tf) * out_sp..(ci * taps + tf + 1) * out_sp];
            let off_last = tap[rank - 1] as isize - padding[rank - 1] as isize;
            let j_lo = if off_last >= 0 {
                0
            } else {
                ((-off_last) as usize).div_ceil(st_last)
            };
            let j_hi_excl = {
                let top = in_last as isize - 1 - off_last;
                if top < 0 {
                    0
                } else {
                    ((top as usize) / st_last + 1).min(out_last)
                }
            };

            let mut outer = vec![0usize; rank.saturating_sub(1)];
            for oc in 0..outer_count {
                let src = &row[oc * out_last..(oc + 1) * out_last];
                let mut dst_base = 0isize;
                let mut in_bounds = true;
                for a in 0..rank - 1 {
                    let y = (outer[a] * stride[a] + tap[a]) as isize - padding[a] as isize;
                    if y < 0 || y >= in_spatial[a] as isize {
                        in_bounds = false;
                        break;
                    }
                    dst_base += y * in_strides[a] as isize;
                }
                if in_bounds && j_lo < j_hi_excl {
                    let base = dst_base as usize;
                    for jj in j_lo..j_hi_excl {
                        let y_last = (jj * st_last) as isize + off_last;
                        ch[base + y_last as usize] += src[jj];
                    }
                }
                if oc + 1 < outer_count {
                    next_index(&mut outer, outer_shape);
                }
            }
            if tf + 1 < taps {
                next_index(&mut tap, k_spatial);
            }
        }
    }
}

/// Correlates `input` with `kernel`. See the module docs for the exact
/// index semantics.
pub fn conv_forward<T: Scalar>(
    input: &TensorND<T>,
    kernel: &TensorND<T>,
    spec: &ConvSpec,
) -> Result<TensorND<T>> {
    let out_shape = spec.output_shape(input.shape(), kernel.shape())?;
    let c_in = input.shape()[1];
    let c_out = kernel.shape()[0];
    let groups = spec.groups;
    let (c_in_g, c_out_g) = (c_in / groups, c_out / groups);
    let in_spatial = input.shape()[2..].to_vec();
    let k_spatial = kernel.shape()[2..].to_vec();
    let out_spatial = out_shape[2..].to_vec();
    let in_sp: usize = in_spatial.iter().product();
    let out_sp: usize = out_spatial.iter().product();
    let taps: usize = k_spatial.iter().product();
    let cols = c_in_g * taps;

    let mut output = TensorND::zeros(&out_shape);
    let in_data = input.data();
    let k_data = kernel.data();

    let chunks: Vec<(usize, &mut [T])> = output
        .data_mut()
        .chunks_mut(c_out * out_sp)
        .enumerate()
        .collect();
    parallel::for_each_chunk(chunks, |n, out_n| {
        let mut col = vec![T::zero(); cols * out_sp];
        for g in 0..groups {
            let in_slice =
                &in_data[(n * c_in + g * c_in_g) * in_sp..(n * c_in + (g + 1) * c_in_g) * in_sp];
            im2col(
                in_slice,
                &in_spatial,
                &k_spatial,
                &out_spatial,
                &spec.stride,
                &spec.padding,
                c_in_g,
                &mut col,
            );
            for i in 0..c_out_g {
                let co = g * c_out_g + i;
                let w_row = &k_data[co * cols..(co + 1) * cols];
                let out_row = &mut out_n[co * out_sp..(co + 1) * out_sp];
                out_row.fill(T::zero());
                for (k, &a) in w_row.iter().enumerate() {
                    let c_row = &col[k * out_sp..(k + 1) * out_sp];
                    for (o, &c) in out_row.iter_mut().zip(c_row.iter()) {
                        *o += a * c;
                    }
                }
            }
        }
    });
    Ok(output)
}

/// Gradients of [`conv_forward`] with respect to input and kernel.
///
/// Per-batch kernel contributions are accumulated in ascending batch order,
/// so results are bit-identical for any worker count.
pub fn conv_backward<T: Scalar>(
    input: &TensorND<T>,
    kernel: &TensorND<T>,
    spec: &ConvSpec,
    grad_output: &TensorND<T>,
) -> Result<(TensorND<T>, TensorND<T>)> {
    let out_shape = spec.output_shape(input.shape(), kernel.shape())?;
    if grad_output.shape() != out_shape.as_slice() {
        return Err(DclsError::ShapeMismatch {
            context: "conv_backward grad_output",
            expected: out_shape,
            got: grad_output.shape().to_vec(),
        });
    }
    let (batch, c_in) = (input.shape()[0], input.shape()[1]);
    let c_out = kernel.shape()[0];
    let groups = spec.groups;
    let (c_in_g, c_out_g) = (c_in / groups, c_out / groups);
    let in_spatial = input.shape()[2..].to_vec();
    let k_spatial = kernel.shape()[2..].to_vec();
    let out_spatial = out_shape[2..].to_vec();
    let in_sp: usize = in_spatial.iter().product();
    let out_sp: usize = out_spatial.iter().product();
    let taps: usize = k_spatial.iter().product();
    let cols = c_in_g * taps;

    let in_data = input.data();
    let k_data = kernel.data();
    let go_data = grad_output.data();

    let mut grad_input = TensorND::zeros(input.shape());
    let mut kernel_partials: Vec<Vec<T>> = (0..batch).map(|_| Vec::new()).collect();

    {
        let chunks: Vec<(usize, (&mut [T], &mut Vec<T>))> = grad_input
            .data_mut()
            .chunks_mut(c_in * in_sp)
            .zip(kernel_partials.iter_mut())
            .enumerate()
            .collect();
        parallel::for_each_chunk(chunks, |n, (gi_n, kp_n)| {
            let mut col = vec![T::zero(); cols * out_sp];
            let mut col_grad = vec![T::zero(); cols * out_sp];
            kp_n.resize(kernel.len(), T::zero());
            for g in 0..groups {
                let in_slice = &in_data
                    [(n * c_in + g * c_in_g) * in_sp..(n * c_in + (g + 1) * c_in_g) * in_sp];
                im2col(
                    in_slice,
                    &in_spatial,
                    &k_spatial,
                    &out_spatial,
                    &spec.stride,
                    &spec.padding,
                    c_in_g,
                    &mut col,
                );

                // grad_kernel rows: go[i] . col[k] over output cells.
                for i in 0..c_out_g {
                    let co = g * c_out_g + i;
                    let go_row = &go_data[(n * c_out + co) * out_sp..(n * c_out + co + 1) * out_sp];
                    let kp_row = &mut kp_n[co * cols..(co + 1) * cols];
                    for (k, kp) in kp_row.iter_mut().enumerate() {
                        let c_row = &col[k * out_sp..(k + 1) * out_sp];
                        let mut acc = T::zero();
                        for (a, b) in go_row.iter().zip(c_row.iter()) {
                            acc += *a * *b;
                        }
                        *kp = acc;
                    }
                }

                // col_grad[k] = sum_i W[i][k] * go[i], then scatter back.
                col_grad.fill(T::zero());
                for i in 0..c_out_g {
                    let co = g * c_out_g + i;
                    let go_row = &go_data[(n * c_out + co) * out_sp..(n * c_out + co + 1) * out_sp];
                    let w_row = &k_data[co * cols..(co + 1) * cols];
                    for (k, &a) in w_row.iter().enumerate() {
                        let cg_row = &mut col_grad[k * out_sp..(k + 1) * out_sp];
                        for (d, &s) in cg_row.iter_mut().zip(go_row.iter()) {
                            *d += a * s;
                        }
                    }
                }
                let gi_slice = &mut gi_n[g * c_in_g * in_sp..(g + 1) * c_in_g * in_sp];
                col2im_add(
                    gi_slice,
                    &in_spatial,
                    &k_spatial,
                    &out_spatial,
                    &spec.stride,
                    &spec.padding,
                    c_in_g,
                    &col_grad,
                );
            }
        });
    }

    let mut grad_kernel = TensorND::zeros(kernel.shape());
    for kp in &kernel_partials {
        for (d, &s) in grad_kernel.data_mut().iter_mut().zip(kp.iter()) {
            *d += s;
        }
    }
    Ok((grad_input, grad_kernel))
}

/// Forward state of one dilated layer, kept for [`dcls_layer_backward`].
#[derive(Debug, Clone)]
pub struct DclsLayerContext<T> {
    constructed: ConstructedKernel<T>,
    input: TensorND<T>,
    spec: ConvSpec,
}

impl<T> DclsLayerContext<T> {
    pub fn kernel(&self) -> &TensorND<T> {
        &self.constructed.kernel
    }
}

/// Gradients of one dilated layer: input plus all learnable parameters.
#[derive(Debug, Clone)]
pub struct DclsLayerGradients<T> {
    pub input: TensorND<T>,
    pub params: DclsGradients<T>,
}

/// Builds the dense kernel from `params` and correlates `input` with it.
pub fn dcls_layer_forward<T: Scalar>(
    input: &TensorND<T>,
    params: &DclsParams<T>,
    geom: &DclsGeometry,
    kind: &InterpolationKind,
    spec: &ConvSpec,
) -> Result<(TensorND<T>, DclsLayerContext<T>)> {
    let constructed = construct_kernel(params, geom, kind)?;
    let output = conv_forward(input, &constructed.kernel, spec)?;
    Ok((
        output,
        DclsLayerContext {
            constructed,
            input: input.clone(),
            spec: spec.clone(),
        },
    ))
}

/// Inference-only layer application; keeps no backward state.
pub fn dcls_layer_infer<T: Scalar>(
    input: &TensorND<T>,
    params: &DclsParams<T>,
    geom: &DclsGeometry,
    kind: &InterpolationKind,
    spec: &ConvSpec,
) -> Result<TensorND<T>> {
    let constructed = crate::kernelgen::construct_kernel_inference(params, geom, kind)?;
    conv_forward(input, &constructed.kernel, spec)
}

/// Chains the convolution and kernel-construction backward passes.
pub fn dcls_layer_backward<T: Scalar>(
    ctx: &DclsLayerContext<T>,
    grad_output: &TensorND<T>,
) -> Result<DclsLayerGradients<T>> {
    let (grad_input, grad_kernel) = conv_backward(
        &ctx.input,
        &ctx.constructed.kernel,
        &ctx.spec,
        grad_output,
    )?;
    let params = construct_kernel_backward(&ctx.constructed, &grad_kernel)?;
    Ok(DclsLayerGradients {
        input: grad_input,
        params,
    })
}
