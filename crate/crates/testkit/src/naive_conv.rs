//! Direct-sum convolution oracle.
//!
//! This is the semantic definition of the grouped cross-correlation: six
//! nested loops, one padded-input bounds check per tap, nothing shared with
//! the lowered production engine. It recomputes output extents from scratch
//! with `(in + 2 * pad - k) / stride + 1` per axis.

use dcls_core::conv::ConvSpec;
use dcls_core::tensor::{next_index, TensorND};

#[derive(Debug, thiserror::Error)]
pub enum NaiveConvError {
    #[error("bad shapes for naive convolution: {0}")]
    BadShape(String),
}

/// Cross-correlates `input` with `kernel` one output cell at a time.
pub fn naive_conv_forward(
    input: &TensorND<f64>,
    kernel: &TensorND<f64>,
    spec: &ConvSpec,
) -> Result<TensorND<f64>, NaiveConvError> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() < 3 || ishape.len() != kshape.len() {
        return Err(NaiveConvError::BadShape(format!(
            "input {ishape:?} vs kernel {kshape:?}"
        )));
    }
    let rank = ishape.len() - 2;
    if spec.stride.len() != rank || spec.padding.len() != rank || spec.groups == 0 {
        return Err(NaiveConvError::BadShape(format!(
            "spec {spec:?} does not fit rank {rank}"
        )));
    }
    let (batch, c_in, c_out) = (ishape[0], ishape[1], kshape[0]);
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 || kshape[1] != c_in / spec.groups {
        return Err(NaiveConvError::BadShape(format!(
            "channels {c_in}->{c_out} not divisible into {} groups with kernel {kshape:?}",
            spec.groups
        )));
    }
    let c_in_g = c_in / spec.groups;
    let c_out_g = c_out / spec.groups;

    let mut out_shape = vec![batch, c_out];
    for a in 0..rank {
        let padded = ishape[2 + a] as isize + 2 * spec.padding[a] as isize;
        let span = padded - kshape[2 + a] as isize;
        if span < 0 {
            return Err(NaiveConvError::BadShape(format!(
                "kernel axis {a} larger than padded input"
            )));
        }
        out_shape.push(span as usize / spec.stride[a] + 1);
    }

    let mut output = TensorND::zeros(&out_shape);
    let out_spatial = out_shape[2..].to_vec();
    let k_spatial = kshape[2..].to_vec();
    let in_spatial = ishape[2..].to_vec();

    let mut o_idx = vec![0usize; rank];
    let mut t_idx = vec![0usize; rank];
    let mut full_o = vec![0usize; rank + 2];
    let mut full_i = vec![0usize; rank + 2];
    let mut full_k = vec![0usize; rank + 2];

    for n in 0..batch {
        for co in 0..c_out {
            let g = co / c_out_g;
            o_idx.fill(0);
            loop {
                let mut acc = 0.0f64;
                for ci in 0..c_in_g {
                    t_idx.fill(0);
                    loop {
                        let mut inside = true;
                        for a in 0..rank {
                            let y = (o_idx[a] * spec.stride[a] + t_idx[a]) as isize
                                - spec.padding[a] as isize;
                            if y < 0 || y >= in_spatial[a] as isize {
                                inside = false;
                                break;
                            }
                            full_i[2 + a] = y as usize;
                        }
                        if inside {
                            full_i[0] = n;
                            full_i[1] = g * c_in_g + ci;
                            full_k[0] = co;
                            full_k[1] = ci;
                            full_k[2..].copy_from_slice(&t_idx);
                            acc += input.get(&full_i) * kernel.get(&full_k);
                        }
                        if !next_index(&mut t_idx, &k_spatial) {
                            break;
                        }
                    }
                }
                full_o[0] = n;
                full_o[1] = co;
                full_o[2..].copy_from_slice(&o_idx);
                output.set(&full_o, acc);
                if !next_index(&mut o_idx, &out_spatial) {
                    break;
                }
            }
        }
    }
    Ok(output)
}
