//! One-dimensional slices of the model function along input axes.

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::graph::BackwardMode;
use crate::tensor::Tensor;

pub const DEFAULT_SLICE_DIMS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceCurve {
    pub dim: usize,
    pub offsets: Vec<f64>,
    pub values: Vec<f64>,
}

impl SliceCurve {
    /// Largest `|f(k+1) - 2 f(k) + f(k-1)|` along the curve.
    pub fn max_second_difference(&self) -> f64 {
        self.values
            .windows(3)
            .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
            .fold(0.0, f64::max)
    }
}

/// `F_target(x + delta * e_i)` at `samples` evenly spaced `delta` in
/// `[lo, hi]`, for each `i` in `dims`. `x` lives in the attribution domain.
pub fn function_slice(
    model: &Model,
    x: &Tensor,
    dims: &[usize],
    range: (f64, f64),
    samples: usize,
    target: usize,
) -> Result<Vec<SliceCurve>> {
    if samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples, got {samples}"
        )));
    }
    if !(range.0 < range.1) {
        return Err(Error::InvalidArgument(format!("empty range {range:?}")));
    }
    if let Some(&d) = dims.iter().find(|&&d| d >= x.len()) {
        return Err(Error::InvalidArgument(format!(
            "dim {d} outside input of {} elements",
            x.len()
        )));
    }
    let step = (range.1 - range.0) / (samples - 1) as f64;
    let offsets: Vec<f64> = (0..samples).map(|k| range.0 + step * k as f64).collect();
    dims.iter()
        .map(|&dim| {
            let mut probe = x.clone();
            let values = offsets
                .iter()
                .map(|&delta| {
                    probe.data_mut()[dim] = x.data()[dim] + delta;
                    model.domain_output(&probe, target)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SliceCurve {
                dim,
                offsets: offsets.clone(),
                values,
            })
        })
        .collect()
}

/// The `n` input dimensions with the largest gradient magnitude at `x`
/// (ties broken by lower index), in ascending index order.
pub fn default_slice_dims(model: &Model, x: &Tensor, target: usize, n: usize) -> Result<Vec<usize>> {
    let (_, g) = model.domain_grad(x, target, BackwardMode::Standard)?;
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()).then(a.cmp(&b)));
    let mut picked: Vec<usize> = idx.into_iter().take(n).collect();
    picked.sort_unstable();
    Ok(picked)
}
