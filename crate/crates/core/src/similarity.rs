//! Similarity between two explanations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Ssim,
    Spearman,
    Cosine,
    Euclidean,
}

impl SimilarityMetric {
    pub fn label(&self) -> &'static str {
        match self {
            SimilarityMetric::Ssim => "ssim",
            SimilarityMetric::Spearman => "spearman",
            SimilarityMetric::Cosine => "cosine",
            SimilarityMetric::Euclidean => "euclidean",
        }
    }
}

/// A similarity value. `degenerate` marks a conventional value returned for
/// an undefined case (zero norm, constant ranks); `params` echoes the
/// metric's constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub metric: SimilarityMetric,
    pub value: f64,
    pub degenerate: bool,
    pub params: BTreeMap<String, f64>,
}

impl SimilarityResult {
    fn plain(metric: SimilarityMetric, value: f64, degenerate: bool) -> Self {
        Self {
            metric,
            value,
            degenerate,
            params: BTreeMap::new(),
        }
    }
}

fn check_shapes(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            node: what.into(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub fn similarity(metric: SimilarityMetric, a: &Tensor, b: &Tensor) -> Result<SimilarityResult> {
    match metric {
        SimilarityMetric::Ssim => ssim(a, b),
        SimilarityMetric::Spearman => spearman(a, b),
        SimilarityMetric::Cosine => cosine(a, b),
        SimilarityMetric::Euclidean => euclidean(a, b),
    }
}

/// Mean SSIM of two 2-D maps over 7x7 uniform windows at stride 1.
///
/// Both maps are min-max normalized with one shared range, so the dynamic
/// range is 1. Maps smaller than the window are treated as one window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<SimilarityResult> {
    ssim_with_window(a, b, SSIM_WINDOW)
}

/// [`ssim`] with a square uniform window of side `window`.
pub fn ssim_with_window(a: &Tensor, b: &Tensor, window: usize) -> Result<SimilarityResult> {
    check_shapes(a, b, "ssim")?;
    if window == 0 {
        return Err(Error::InvalidArgument("ssim window must be positive".into()));
    }
    if a.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "ssim needs 2-D maps, got {:?}",
            a.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let lo = a.data().iter().chain(b.data()).copied().fold(f64::INFINITY, f64::min);
    let hi = a
        .data()
        .iter()
        .chain(b.data())
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm = |t: &Tensor| -> Vec<f64> {
        if span > 0.0 {
            t.data().iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; t.len()]
        }
    };
    let (x, y) = (norm(a), norm(b));
    let (wh, ww) = if h < window || w < window {
        (h, w)
    } else {
        (window, window)
    };
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let tables = [&x, &y, &xx, &yy, &xy].map(|v| Integral::new(v, h, w));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - wh {
        for j in 0..=w - ww {
            let [sx, sy, sxx, syy, sxy] = tables.each_ref().map(|t| t.window(i, j, wh, ww) / n);
            let vx = (sxx - sx * sx).max(0.0);
            let vy = (syy - sy * sy).max(0.0);
            let cov = sxy - sx * sy;
            total += ((2.0 * sx * sy + c1) * (2.0 * cov + c2)) / ((sx * sx + sy * sy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    let mut result = SimilarityResult::plain(SimilarityMetric::Ssim, total / count as f64, false);
    result.params = [
        ("window_h".to_string(), wh as f64),
        ("window_w".to_string(), ww as f64),
        ("c1".to_string(), c1),
        ("c2".to_string(), c2),
    ]
    .into_iter()
    .collect();
    Ok(result)
}

/// Summed-area table with a zero border.
struct Integral {
    w: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(v: &[f64], h: usize, w: usize) -> Self {
        let mut s = vec![0.0; (h + 1) * (w + 1)];
        for i in 0..h {
            let mut row = 0.0;
            for j in 0..w {
                row += v[i * w + j];
                s[(i + 1) * (w + 1) + j + 1] = s[i * (w + 1) + j + 1] + row;
            }
        }
        Self { w: w + 1, s }
    }

    fn window(&self, i: usize, j: usize, h: usize, w: usize) -> f64 {
        let at = |r: usize, c: usize| self.s[r * self.w + c];
        at(i + h, j + w) - at(i, j + w) - at(i + h, j) + at(i, j)
    }
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman rank correlation of the flattened tensors. Returns 0, flagged
/// degenerate, when either side is constant.
pub fn spearman(a: &Tensor, b: &Tensor) -> Result<SimilarityResult> {
    check_shapes(a, b, "spearman")?;
    let r = pearson(&average_ranks(a.data()), &average_ranks(b.data()));
    Ok(SimilarityResult::plain(
        SimilarityMetric::Spearman,
        r.unwrap_or(0.0),
        r.is_none(),
    ))
}

/// Cosine similarity. Returns 0, flagged degenerate, when either norm is zero.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<SimilarityResult> {
    check_shapes(a, b, "cosine")?;
    let (saa, sbb) = (a.dot(a)?, b.dot(b)?);
    let degenerate = saa == 0.0 || sbb == 0.0;
    let value = if degenerate {
        0.0
    } else {
        (a.dot(b)? / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    };
    Ok(SimilarityResult::plain(SimilarityMetric::Cosine, value, degenerate))
}

/// L2 distance; smaller means more similar.
pub fn euclidean(a: &Tensor, b: &Tensor) -> Result<SimilarityResult> {
    check_shapes(a, b, "euclidean")?;
    Ok(SimilarityResult::plain(
        SimilarityMetric::Euclidean,
        a.sub(b)?.norm_l2(),
        false,
    ))
}
