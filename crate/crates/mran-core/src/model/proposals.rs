//! Standalone region-proposal generation over a neighborhood patch.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One candidate region: the window contents and its top-left pixel offset
/// `(dx, dy)` inside the neighborhood.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub patch: Tensor,
    pub offset: (usize, usize),
}

/// All axis-aligned `window x window` patches of a `[c, n, n]` neighborhood
/// at the given stride, in row-major scan order. The count is
/// `((n - window) / stride + 1)^2`.
pub fn generate_proposals(neighborhood: &Tensor, window: usize, stride: usize) -> Result<Vec<Proposal>> {
    let shape = neighborhood.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::shape(
            "generate_proposals",
            "rank-3 square patch [c, n, n]",
            format!("{shape:?}"),
        ));
    }
    let (c, n) = (shape[0], shape[1]);
    if window > n {
        return Err(Error::Geometry(format!(
            "proposal window {window} larger than neighborhood {n}"
        )));
    }
    if stride == 0 || (n - window) % stride != 0 {
        return Err(Error::Geometry(format!(
            "neighborhood {n} minus window {window} must be divisible by stride {stride}"
        )));
    }
    let g = (n - window) / stride + 1;
    let src = neighborhood.data();
    let mut out = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let mut data = Vec::with_capacity(c * window * window);
            for ci in 0..c {
                for wy in 0..window {
                    let base = (ci * n + gy * stride + wy) * n + gx * stride;
                    data.extend_from_slice(&src[base..base + window]);
                }
            }
            out.push(Proposal {
                patch: Tensor::new(vec![c, window, window], data)?,
                offset: (gx * stride, gy * stride),
            });
        }
    }
    Ok(out)
}
