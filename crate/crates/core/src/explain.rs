//! Gradient-based attribution methods.
//!
//! Every method works in the model's attribution domain: pixels for image
//! models and token embeddings for text models (see [`Model::to_domain`]).
//! A *local* attribution is the gradient-path quantity alone; the *global*
//! variant multiplies it elementwise by `x - x0`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BackwardMode, Graph};
use crate::models::{Focused, Model};
use crate::seed::rng;
use crate::tensor::Tensor;

/// A differentiable classifier over an attribution domain.
pub trait Attributable: Sync {
    fn domain_shape(&self) -> Vec<usize>;
    fn check_target(&self, target: usize) -> Result<()>;
    /// `F_target(x)`.
    fn output(&self, x: &Tensor, target: usize) -> Result<f64>;
    /// `dF_target/dx`.
    fn gradient(&self, x: &Tensor, target: usize, mode: BackwardMode) -> Result<Tensor>;
    /// Whether guided backpropagation is defined (ReLU nonlinearities only).
    fn supports_guided(&self) -> bool;
}

impl Attributable for Model {
    fn domain_shape(&self) -> Vec<usize> {
        Model::domain_shape(self)
    }

    fn check_target(&self, target: usize) -> Result<()> {
        Model::check_target(self, target)
    }

    fn output(&self, x: &Tensor, target: usize) -> Result<f64> {
        self.domain_output(x, target)
    }

    fn gradient(&self, x: &Tensor, target: usize, mode: BackwardMode) -> Result<Tensor> {
        self.domain_grad(x, target, mode).map(|(_, g)| g)
    }

    fn supports_guided(&self) -> bool {
        self.config().activation.is_relu()
    }
}

impl Attributable for Focused<'_> {
    fn domain_shape(&self) -> Vec<usize> {
        self.model().domain_shape()
    }

    fn check_target(&self, target: usize) -> Result<()> {
        self.model().check_target(target)
    }

    fn output(&self, x: &Tensor, target: usize) -> Result<f64> {
        self.domain_output(x, target)
    }

    fn gradient(&self, x: &Tensor, target: usize, mode: BackwardMode) -> Result<Tensor> {
        self.domain_grad(x, target, mode).map(|(_, g)| g)
    }

    fn supports_guided(&self) -> bool {
        self.model().config().activation.is_relu()
    }
}

/// A graph with a single input leaf `x` and a vector (or scalar) output,
/// viewed as a classifier. Handy for checking methods on closed-form
/// functions.
#[derive(Debug, Clone)]
pub struct GraphFunction {
    graph: Graph,
    output: String,
}

impl GraphFunction {
    pub const INPUT: &'static str = "x";

    pub fn new(graph: Graph, output: &str) -> Result<Self> {
        if graph.leaf_shape(Self::INPUT).is_none() {
            return Err(Error::UnknownLeaf(Self::INPUT.into()));
        }
        if graph.output_shape(output).is_none() {
            return Err(Error::UnknownOutput(output.into()));
        }
        Ok(Self {
            graph,
            output: output.into(),
        })
    }

    fn classes(&self) -> usize {
        self.graph.output_shape(&self.output).map_or(1, |s| s.iter().product())
    }
}

impl Attributable for GraphFunction {
    fn domain_shape(&self) -> Vec<usize> {
        self.graph
            .leaf_shape(Self::INPUT)
            .expect("checked at construction")
            .to_vec()
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.classes() {
            return Err(Error::InvalidArgument(format!(
                "target {target} outside [0, {})",
                self.classes()
            )));
        }
        Ok(())
    }

    fn output(&self, x: &Tensor, target: usize) -> Result<f64> {
        self.check_target(target)?;
        let b = [(Self::INPUT, x)].into_iter().collect();
        let eval = self.graph.evaluate(&b, &[self.output.as_str()])?;
        Ok(self.graph.value(&eval, &self.output)?.data()[target])
    }

    fn gradient(&self, x: &Tensor, target: usize, mode: BackwardMode) -> Result<Tensor> {
        self.check_target(target)?;
        let b = [(Self::INPUT, x)].into_iter().collect();
        let (_, mut g) = self
            .graph
            .grad_with_mode(&b, &self.output, Some(target), &[Self::INPUT], mode)?;
        Ok(g.remove(Self::INPUT).expect("requested leaf"))
    }

    fn supports_guided(&self) -> bool {
        true
    }
}

pub const DEFAULT_IG_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Saliency,
    InputXGradient,
    IntegratedGradients,
    SmoothGrad { base: Box<Method> },
    GradientShap,
    GuidedBackprop,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Saliency => "saliency".into(),
            Method::InputXGradient => "input_x_gradient".into(),
            Method::IntegratedGradients => "ig".into(),
            Method::SmoothGrad { base } => format!("{}_sg", base.label()),
            Method::GradientShap => "gradient_shap".into(),
            Method::GuidedBackprop => "guided_backprop".into(),
        }
    }

    /// Whether the global attribution is the local one times `x - x0`.
    pub fn global_is_scaled_local(&self) -> bool {
        match self {
            Method::Saliency | Method::IntegratedGradients | Method::GuidedBackprop => true,
            Method::SmoothGrad { base } => **base != Method::InputXGradient,
            Method::InputXGradient | Method::GradientShap => false,
        }
    }

    fn is_seeded(&self) -> bool {
        matches!(self, Method::SmoothGrad { .. } | Method::GradientShap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Local,
    Global,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Local => "local",
            Variant::Global => "global",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothGradParams {
    pub n: usize,
    pub sigma: f64,
}

impl Default for SmoothGradParams {
    fn default() -> Self {
        Self { n: 10, sigma: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapParams {
    pub n: usize,
    pub sigma: f64,
}

impl Default for ShapParams {
    fn default() -> Self {
        Self { n: 50, sigma: 0.0 }
    }
}

/// Everything about an attribution except the point it is taken at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerSpec {
    pub method: Method,
    pub variant: Variant,
    pub ig_steps: usize,
    pub smoothgrad: SmoothGradParams,
    pub shap: ShapParams,
}

impl ExplainerSpec {
    pub fn new(method: Method, variant: Variant) -> Self {
        Self {
            method,
            variant,
            ig_steps: DEFAULT_IG_STEPS,
            smoothgrad: SmoothGradParams::default(),
            shap: ShapParams::default(),
        }
    }

    pub fn ig(variant: Variant) -> Self {
        Self::new(Method::IntegratedGradients, variant)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.ig_steps = steps;
        self
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.method.label(), self.variant.label())
    }

    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 {
            return Err(Error::InvalidArgument("ig_steps must be >= 1".into()));
        }
        match &self.method {
            Method::SmoothGrad { base } => {
                if self.smoothgrad.n == 0 || !(self.smoothgrad.sigma >= 0.0) {
                    return Err(Error::InvalidArgument("smoothgrad needs n >= 1 and sigma >= 0".into()));
                }
                if base.is_seeded() {
                    return Err(Error::UnsupportedMethod {
                        method: self.method.label(),
                        reason: "smoothgrad wraps deterministic gradient methods only".into(),
                    });
                }
            }
            Method::GradientShap => {
                if self.shap.n == 0 || !(self.shap.sigma >= 0.0) {
                    return Err(Error::InvalidArgument(
                        "gradient_shap needs n >= 1 and sigma >= 0".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRequest {
    pub spec: ExplainerSpec,
    /// Input in the attribution domain.
    pub x: Tensor,
    pub baseline: Tensor,
    pub target: usize,
    /// Baselines sampled by Gradient SHAP.
    pub shap_baselines: Vec<Tensor>,
    pub seed: u64,
}

impl AttributionRequest {
    pub fn new(spec: ExplainerSpec, x: Tensor, baseline: Tensor, target: usize, seed: u64) -> Self {
        let shap_baselines = vec![baseline.clone()];
        Self {
            spec,
            x,
            baseline,
            target,
            shap_baselines,
            seed,
        }
    }

    /// Same request at a different input point.
    pub fn at(&self, x: Tensor) -> Self {
        Self { x, ..self.clone() }
    }

    fn validate<M: Attributable + ?Sized>(&self, model: &M) -> Result<()> {
        self.spec.validate()?;
        model.check_target(self.target)?;
        let shape = model.domain_shape();
        if self.x.shape() != shape.as_slice() || self.baseline.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                node: "attribution request".into(),
                detail: format!(
                    "x {:?}, baseline {:?}, model domain {shape:?}",
                    self.x.shape(),
                    self.baseline.shape()
                ),
            });
        }
        if matches!(self.spec.method, Method::GradientShap) {
            if self.shap_baselines.is_empty() {
                return Err(Error::InvalidArgument(
                    "gradient_shap needs a nonempty baseline set".into(),
                ));
            }
            if self.shap_baselines.iter().any(|b| b.shape() != shape.as_slice()) {
                return Err(Error::InvalidArgument(
                    "shap baseline shape differs from the input".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub values: Tensor,
    pub provenance: AttributionRequest,
}

/// Computes the attribution described by `req`.
pub fn explain<M: Attributable + ?Sized>(model: &M, req: &AttributionRequest) -> Result<Attribution> {
    req.validate(model)?;
    let values = match &req.spec.method {
        Method::Saliency => gradient_saliency(model, req)?,
        Method::InputXGradient => input_x_gradient(model, req)?,
        Method::IntegratedGradients => integrated_gradients(model, req)?,
        Method::SmoothGrad { base } => smoothgrad(model, req, base)?,
        Method::GradientShap => gradient_shap(model, req)?,
        Method::GuidedBackprop => guided_backprop(model, req)?,
    };
    Ok(Attribution {
        values,
        provenance: req.clone(),
    })
}

/// Attribution values for several explainers at one point. Explainers that
/// differ only in variant share one local computation when the global form is
/// the scaled local one, so the results equal separate [`explain`] calls.
pub fn explain_many<M: Attributable + ?Sized>(
    model: &M,
    specs: &[ExplainerSpec],
    x: &Tensor,
    baseline: &Tensor,
    target: usize,
    seeds: &[u64],
) -> Result<Vec<Tensor>> {
    if seeds.len() != specs.len() {
        return Err(Error::InvalidArgument("one seed per explainer required".into()));
    }
    let mut locals: Vec<(ExplainerSpec, u64, Tensor)> = Vec::new();
    let mut out = Vec::with_capacity(specs.len());
    for (spec, &seed) in specs.iter().zip(seeds) {
        if !spec.method.global_is_scaled_local() {
            let req = AttributionRequest::new(spec.clone(), x.clone(), baseline.clone(), target, seed);
            out.push(explain(model, &req)?.values);
            continue;
        }
        let key = ExplainerSpec {
            variant: Variant::Local,
            ..spec.clone()
        };
        let cached = locals
            .iter()
            .find(|(k, s, _)| *k == key && *s == seed)
            .map(|(_, _, t)| t.clone());
        let local = match cached {
            Some(t) => t,
            None => {
                let req = AttributionRequest::new(key.clone(), x.clone(), baseline.clone(), target, seed);
                let t = explain(model, &req)?.values;
                locals.push((key, seed, t.clone()));
                t
            }
        };
        out.push(match spec.variant {
            Variant::Local => local,
            Variant::Global => local.mul(&x.sub(baseline)?)?,
        });
    }
    Ok(out)
}

fn gradient<M: Attributable + ?Sized>(model: &M, x: &Tensor, target: usize) -> Result<Tensor> {
    model.gradient(x, target, BackwardMode::Standard)
}

fn apply_variant(local: Tensor, req: &AttributionRequest) -> Result<Tensor> {
    match req.spec.variant {
        Variant::Local => Ok(local),
        Variant::Global => local.mul(&req.x.sub(&req.baseline)?),
    }
}

fn gradient_saliency<M: Attributable + ?Sized>(model: &M, req: &AttributionRequest) -> Result<Tensor> {
    apply_variant(gradient(model, &req.x, req.target)?, req)
}

/// `x * dF/dx`; the multiplier is the input itself for either variant.
fn input_x_gradient<M: Attributable + ?Sized>(model: &M, req: &AttributionRequest) -> Result<Tensor> {
    req.x.mul(&gradient(model, &req.x, req.target)?)
}

/// Trapezoidal average of the gradient along `x0 -> x` with `steps + 1` nodes.
pub fn ig_path_average<M: Attributable + ?Sized>(
    model: &M,
    x: &Tensor,
    x0: &Tensor,
    target: usize,
    steps: usize,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("ig_steps must be >= 1".into()));
    }
    let grads = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let alpha = k as f64 / steps as f64;
            x0.lerp(x, alpha)
                .and_then(|p| gradient(model, &p, target))
                .map_err(|e| Error::IgStep {
                    step: k,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; x.len()];
    for (k, g) in grads.iter().enumerate() {
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += w * v;
        }
    }
    let m = steps as f64;
    Tensor::new(x.shape().to_vec(), acc.into_iter().map(|v| v / m).collect())
}

fn integrated_gradients<M: Attributable + ?Sized>(model: &M, req: &AttributionRequest) -> Result<Tensor> {
    let local = ig_path_average(model, &req.x, &req.baseline, req.target, req.spec.ig_steps)?;
    apply_variant(local, req)
}

fn guided_gradient<M: Attributable + ?Sized>(model: &M, x: &Tensor, target: usize) -> Result<Tensor> {
    if !model.supports_guided() {
        return Err(Error::UnsupportedMethod {
            method: "guided_backprop".into(),
            reason: "gating is defined for ReLU models only".into(),
        });
    }
    model.gradient(x, target, BackwardMode::Guided)
}

fn guided_backprop<M: Attributable + ?Sized>(model: &M, req: &AttributionRequest) -> Result<Tensor> {
    apply_variant(guided_gradient(model, &req.x, req.target)?, req)
}

/// The multiplier-free part of a deterministic method at point `x`.
fn local_part<M: Attributable + ?Sized>(
    model: &M,
    method: &Method,
    x: &Tensor,
    req: &AttributionRequest,
) -> Result<Tensor> {
    match method {
        Method::Saliency | Method::InputXGradient => gradient(model, x, req.target),
        Method::IntegratedGradients => ig_path_average(model, x, &req.baseline, req.target, req.spec.ig_steps),
        Method::GuidedBackprop => guided_gradient(model, x, req.target),
        Method::SmoothGrad { .. } | Method::GradientShap => Err(Error::UnsupportedMethod {
            method: method.label(),
            reason: "cannot be wrapped by smoothgrad".into(),
        }),
    }
}

fn gaussian(r: &mut impl Rng, shape: &[usize], sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| sigma * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from existing tensor")
}

/// Mean of the base method's local part over Gaussian-noised inputs; the
/// multiplier (`x - x0`, or `x` for input-x-gradient) uses the unperturbed
/// input.
fn smoothgrad<M: Attributable + ?Sized>(model: &M, req: &AttributionRequest, base: &Method) -> Result<Tensor> {
    let SmoothGradParams { n, sigma } = req.spec.smoothgrad;
    let local = if sigma == 0.0 {
        local_part(model, base, &req.x, req)?
    } else {
        let mut r = rng(req.seed);
        let points = (0..n)
            .map(|_| req.x.add(&gaussian(&mut r, req.x.shape(), sigma)))
            .collect::<Result<Vec<_>>>()?;
        let parts = points
            .par_iter()
            .map(|p| local_part(model, base, p, req))
            .collect::<Result<Vec<_>>>()?;
        mean_of(&parts)
    };
    match base {
        Method::InputXGradient => local.mul(&req.x),
        _ => apply_variant(local, req),
    }
}

fn mean_of(parts: &[Tensor]) -> Tensor {
    let mut acc = vec![0.0; parts[0].len()];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let n = parts.len() as f64;
    Tensor::new(parts[0].shape().to_vec(), acc.into_iter().map(|v| v / n).collect()).expect("same shape")
}

/// Monte-Carlo expected gradients: random baseline, random path position,
/// optional Gaussian noise.
fn gradient_shap<M: Attributable + ?Sized>(model: &M, req: &AttributionRequest) -> Result<Tensor> {
    let ShapParams { n, sigma } = req.spec.shap;
    let mut r = rng(req.seed);
    let draws = (0..n)
        .map(|_| {
            let b = &req.shap_baselines[r.random_range(0..req.shap_baselines.len())];
            let alpha: f64 = r.random_range(0.0..1.0);
            let noise = gaussian(&mut r, req.x.shape(), sigma);
            let point = b.lerp(&req.x, alpha)?.add(&noise)?;
            Ok((b, point))
        })
        .collect::<Result<Vec<_>>>()?;
    let parts = draws
        .par_iter()
        .map(|(b, point)| {
            let g = gradient(model, point, req.target)?;
            match req.spec.variant {
                Variant::Local => Ok(g),
                Variant::Global => g.mul(&req.x.sub(b)?),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(&parts))
}

/// Per-token scores: sum over the embedding axis, then L2-normalize. An
/// all-zero score vector is returned unchanged.
pub fn aggregate_text_attribution(attr: &Tensor) -> Result<Tensor> {
    if attr.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "expected a token x embedding matrix, got {:?}",
            attr.shape()
        )));
    }
    let d = attr.shape()[1];
    let sums: Vec<f64> = attr.data().chunks(d).map(|row| row.iter().sum()).collect();
    let s = Tensor::vector(sums);
    let norm = s.norm_l2();
    Ok(if norm == 0.0 { s } else { s.scale(1.0 / norm) })
}

/// Grayscale `[H, W]` map: per-pixel sum of absolute values across channels,
/// min-max normalized to `[0, 1]`. Constant maps become all zeros.
pub fn image_attribution_to_map(attr: &Tensor) -> Result<Tensor> {
    let s = attr.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("expected [C, H, W], got {s:?}")));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut m = vec![0.0; hw];
    for ch in 0..c {
        for (o, v) in m.iter_mut().zip(&attr.data()[ch * hw..(ch + 1) * hw]) {
            *o += v.abs();
        }
    }
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 0.0 {
        m.into_iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; hw]
    };
    Tensor::new(vec![s[1], s[2]], data)
}
