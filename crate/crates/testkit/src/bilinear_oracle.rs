//! Four-corner bilinear kernel constructor, written directly from the
//! fractional-part formulation and sharing no code with the production
//! constructor it cross-checks.
//!
//! Each element's grid-shifted position `(px, py)` splits into integer floors
//! and fractional remainders `(rx, ry)`; mass lands on the four surrounding
//! cells with weights `(1-rx)(1-ry)`, `(1-rx)ry`, `rx(1-ry)`, `rx ry`. The
//! per-element map is normalized by `1e-7 + sum` before weighting, matching
//! the production normalization. Corners that would carry positive mass
//! outside the grid are an error: this constructor is only defined for
//! clamped, in-grid positions.

use dcls_core::kernelgen::{DclsGeometry, DclsParams};
use dcls_core::tensor::TensorND;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("bilinear oracle is two-dimensional, got rank {0}")]
    Rank(usize),

    #[error(
        "element {element} of pair {pair} has support outside the grid \
         (axis {axis}, corner {corner}, grid size {size})"
    )]
    OutOfGrid {
        pair: usize,
        element: usize,
        axis: usize,
        corner: isize,
        size: usize,
    },

    #[error("parameter validation failed: {0}")]
    BadParams(String),
}

/// Sums the weighted, normalized four-corner maps of every element.
pub fn bilinear_oracle(
    params: &DclsParams<f64>,
    geom: &DclsGeometry,
) -> Result<TensorND<f64>, OracleError> {
    if geom.rank() != 2 {
        return Err(OracleError::Rank(geom.rank()));
    }
    params
        .validate(geom)
        .map_err(|e| OracleError::BadParams(e.to_string()))?;
    let (c_out, c_in_g, m) = params
        .channel_shape()
        .map_err(|e| OracleError::BadParams(e.to_string()))?;
    let (sx, sy) = (geom.sizes()[0], geom.sizes()[1]);
    let mut kernel = TensorND::zeros(&[c_out, c_in_g, sx, sy]);

    for pair in 0..c_out * c_in_g {
        for k in 0..m {
            let e = pair * m + k;
            let w = params.weights.data()[e];
            let px = params.positions[0].data()[e] + (sx / 2) as f64;
            let py = params.positions[1].data()[e] + (sy / 2) as f64;
            let (ix, rx) = (px.floor() as isize, px - px.floor());
            let (iy, ry) = (py.floor() as isize, py - py.floor());

            let corners = [
                (ix, iy, (1.0 - rx) * (1.0 - ry)),
                (ix, iy + 1, (1.0 - rx) * ry),
                (ix + 1, iy, rx * (1.0 - ry)),
                (ix + 1, iy + 1, rx * ry),
            ];

            let mut map = vec![0.0f64; sx * sy];
            let mut sum = 0.0;
            for &(cx, cy, mass) in &corners {
                if mass == 0.0 {
                    continue;
                }
                if cx < 0 || cx >= sx as isize {
                    return Err(OracleError::OutOfGrid {
                        pair,
                        element: k,
                        axis: 0,
                        corner: cx,
                        size: sx,
                    });
                }
                if cy < 0 || cy >= sy as isize {
                    return Err(OracleError::OutOfGrid {
                        pair,
                        element: k,
                        axis: 1,
                        corner: cy,
                        size: sy,
                    });
                }
                map[cx as usize * sy + cy as usize] += mass;
                sum += mass;
            }

            let norm = 1e-7 + sum;
            let dst = &mut kernel.data_mut()[pair * sx * sy..(pair + 1) * sx * sy];
            for (d, v) in dst.iter_mut().zip(map.iter()) {
                *d += w * v / norm;
            }
        }
    }
    Ok(kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_fraction_splits_mass_across_four_cells() {
        let geom = DclsGeometry::new(&[3, 3], 1).unwrap();
        let mut params = DclsParams::zeros(&geom, 1, 1);
        params.weights.data_mut()[0] = 1.0;
        params.positions[0].data_mut()[0] = 0.5;
        params.positions[1].data_mut()[0] = 0.5;
        let k = bilinear_oracle(&params, &geom).unwrap();
        let expect = 0.25 / (1.0 + 1e-7);
        for (i, j) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert!((k.get(&[0, 0, i, j]) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn positive_mass_outside_grid_is_rejected() {
        let geom = DclsGeometry::new(&[3, 3], 1).unwrap();
        let mut params = DclsParams::zeros(&geom, 1, 1);
        params.weights.data_mut()[0] = 1.0;
        params.positions[0].data_mut()[0] = 1.25;
        let err = bilinear_oracle(&params, &geom);
        assert!(matches!(err, Err(OracleError::OutOfGrid { axis: 0, .. })));
    }

    #[test]
    fn integer_boundary_position_is_still_in_grid() {
        // Position exactly on the last cell has zero fractional mass, so the
        // (floor + 1) corner is ignored.
        let geom = DclsGeometry::new(&[3, 3], 1).unwrap();
        let mut params = DclsParams::zeros(&geom, 1, 1);
        params.weights.data_mut()[0] = 2.0;
        params.positions[0].data_mut()[0] = 1.0;
        params.positions[1].data_mut()[0] = 1.0;
        let k = bilinear_oracle(&params, &geom).unwrap();
        assert!((k.get(&[0, 0, 2, 2]) - 2.0 / (1.0 + 1e-7)).abs() < 1e-15);
    }
}
