//! Infidelity and max-sensitivity of an attribution.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{explain, Attributable, AttributionRequest, Variant};
use crate::tensor::Tensor;

pub const DEFAULT_INFIDELITY_SIGMA: f64 = 0.03;
pub const DEFAULT_INFIDELITY_SAMPLES: usize = 20;
pub const DEFAULT_SENSITIVITY_RADIUS: f64 = 0.02;
pub const DEFAULT_SENSITIVITY_SAMPLES: usize = 5;

/// Distribution of the perturbation `I` used by [`infidelity`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// `I ~ N(0, sigma^2)` elementwise.
    Gaussian { sigma: f64 },
    /// `I ~ U[-radius, radius]` elementwise.
    LinfUniform { radius: f64 },
    /// The single deterministic perturbation `I = x - x0`.
    BaselineDiff,
}

impl Perturbation {
    pub fn label(&self) -> &'static str {
        match self {
            Perturbation::Gaussian { .. } => "gaussian",
            Perturbation::LinfUniform { .. } => "linf_uniform",
            Perturbation::BaselineDiff => "baseline_diff",
        }
    }
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation::Gaussian {
            sigma: DEFAULT_INFIDELITY_SIGMA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: Perturbation,
    /// Ignored for [`Perturbation::BaselineDiff`], which always uses one sample.
    pub n_samples: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: Perturbation, seed: u64) -> Self {
        Self {
            kind,
            n_samples: DEFAULT_INFIDELITY_SAMPLES,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            Perturbation::Gaussian { sigma } => sigma > 0.0 && sigma.is_finite(),
            Perturbation::LinfUniform { radius } => radius > 0.0 && radius.is_finite(),
            Perturbation::BaselineDiff => true,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "bad perturbation scale in {:?}",
                self.kind
            )));
        }
        if self.n_samples == 0 && self.kind != Perturbation::BaselineDiff {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// The perturbations this spec draws around `x`, in sampling order.
    pub fn draw(&self, x: &Tensor, baseline: &Tensor) -> Result<Vec<Tensor>> {
        self.validate()?;
        let mut r = crate::seed::rng(self.seed);
        let shape = x.shape().to_vec();
        let n = x.len();
        let sample = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            match self.kind {
                Perturbation::Gaussian { sigma } => {
                    (0..n).map(|_| sigma * r.sample::<f64, _>(StandardNormal)).collect()
                }
                Perturbation::LinfUniform { radius } => (0..n).map(|_| r.random_range(-radius..=radius)).collect(),
                Perturbation::BaselineDiff => unreachable!(),
            }
        };
        match self.kind {
            Perturbation::BaselineDiff => Ok(vec![x.sub(baseline)?]),
            _ => (0..self.n_samples)
                .map(|_| Tensor::new(shape.clone(), sample(&mut r)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infidelity {
    pub score: f64,
    /// Per-sample squared errors, aligned with `perturbations`.
    pub errors: Vec<f64>,
    pub perturbations: Vec<Tensor>,
}

/// `I` as seen by an attribution of the given variant: unchanged for local
/// attributions, divided elementwise by `x - x0` for global ones (which
/// already carry that factor), and 0 where `x = x0`.
pub fn effective_perturbation(i: &Tensor, variant: Variant, x: &Tensor, baseline: &Tensor) -> Result<Tensor> {
    match variant {
        Variant::Local => Ok(i.clone()),
        Variant::Global => {
            let delta = x.sub(baseline)?;
            i.zip_with(&delta, |p, d| if d == 0.0 { 0.0 } else { p / d })
        }
    }
}

/// Mean over sampled `I` of `(I' . phi - (F(x) - F(x - I)))^2`, where `I'`
/// is [`effective_perturbation`]. With `BaselineDiff` and a global
/// attribution this is the squared completeness gap.
pub fn infidelity<M: Attributable + ?Sized>(
    model: &M,
    phi: &Tensor,
    variant: Variant,
    x: &Tensor,
    baseline: &Tensor,
    target: usize,
    spec: &PerturbationSpec,
) -> Result<Infidelity> {
    if phi.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            node: "infidelity".into(),
            detail: format!("attribution {:?} vs input {:?}", phi.shape(), x.shape()),
        });
    }
    let perturbations = spec.draw(x, baseline)?;
    let fx = model.output(x, target)?;
    let shifted = perturbations
        .par_iter()
        .map(|i| model.output(&x.sub(i)?, target))
        .collect::<Result<Vec<_>>>()?;
    infidelity_from_samples(phi, variant, x, baseline, perturbations, fx, &shifted)
}

/// Infidelity from already evaluated outputs: `fx = F(x)` and
/// `shifted[j] = F(x - perturbations[j])`.
pub fn infidelity_from_samples(
    phi: &Tensor,
    variant: Variant,
    x: &Tensor,
    baseline: &Tensor,
    perturbations: Vec<Tensor>,
    fx: f64,
    shifted: &[f64],
) -> Result<Infidelity> {
    if perturbations.is_empty() || perturbations.len() != shifted.len() {
        return Err(Error::InvalidArgument("need one output per perturbation".into()));
    }
    let errors = perturbations
        .iter()
        .zip(shifted)
        .map(|(i, &f_shift)| {
            let err = effective_perturbation(i, variant, x, baseline)?.dot(phi)? - (fx - f_shift);
            Ok(err * err)
        })
        .collect::<Result<Vec<_>>>()?;
    let score = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(Infidelity {
        score,
        errors,
        perturbations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySpec {
    pub radius: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Divide by `||phi(x)||_2` (left unscaled when that norm is zero).
    pub normalize: bool,
}

impl SensitivitySpec {
    pub fn new(seed: u64) -> Self {
        Self {
            radius: DEFAULT_SENSITIVITY_RADIUS,
            n_samples: DEFAULT_SENSITIVITY_SAMPLES,
            seed,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub score: f64,
    /// `||phi(x + delta) - phi(x)||_2` per sample, aligned with `deltas`.
    pub changes: Vec<f64>,
    pub deltas: Vec<Tensor>,
}

/// Largest change of the explanation under `delta ~ U[-r, r]` elementwise,
/// estimated from `n_samples` draws. `phi_x` may carry an already computed
/// explanation at `req.x`.
pub fn max_sensitivity<M: Attributable + ?Sized>(
    model: &M,
    req: &AttributionRequest,
    phi_x: Option<&Tensor>,
    spec: &SensitivitySpec,
) -> Result<Sensitivity> {
    if !(spec.radius > 0.0 && spec.radius.is_finite()) || spec.n_samples == 0 {
        return Err(Error::InvalidArgument(
            "sensitivity needs radius > 0 and n_samples >= 1".into(),
        ));
    }
    let base = match phi_x {
        Some(p) => p.clone(),
        None => explain(model, req)?.values,
    };
    let draw = PerturbationSpec {
        kind: Perturbation::LinfUniform { radius: spec.radius },
        n_samples: spec.n_samples,
        seed: spec.seed,
    };
    let deltas = draw.draw(&req.x, &req.baseline)?;
    let moved = deltas
        .par_iter()
        .map(|d| Ok(explain(model, &req.at(req.x.add(d)?))?.values))
        .collect::<Result<Vec<_>>>()?;
    sensitivity_from_samples(&base, deltas, &moved, spec.normalize)
}

/// Max-sensitivity from explanations already computed at `x` and at each
/// `x + deltas[j]`.
pub fn sensitivity_from_samples(
    base: &Tensor,
    deltas: Vec<Tensor>,
    moved: &[Tensor],
    normalize: bool,
) -> Result<Sensitivity> {
    if deltas.is_empty() || deltas.len() != moved.len() {
        return Err(Error::InvalidArgument("need one explanation per delta".into()));
    }
    let scale = if normalize && base.norm_l2() > 0.0 {
        1.0 / base.norm_l2()
    } else {
        1.0
    };
    let changes = moved
        .iter()
        .map(|m| Ok(m.sub(base)?.norm_l2() * scale))
        .collect::<Result<Vec<_>>>()?;
    let score = changes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Sensitivity { score, changes, deltas })
}
