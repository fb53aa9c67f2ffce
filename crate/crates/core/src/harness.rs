//! Sanity checks for attribution methods: cascading parameter randomization,
//! label randomization, and the activation/pooling smoothness sweep.
//!
//! Every random quantity in a run is drawn from a seed derived from the
//! master seed and the cell it belongs to (see [`crate::seed`]):
//!
//! | draw                    | path                                                   |
//! |-------------------------|--------------------------------------------------------|
//! | layer re-initialization | `[REINIT, stage, trial, layer index]`                  |
//! | seeded explainers       | `[EXPLAIN, input, explainer index]`                    |
//! | infidelity samples      | `[INFIDELITY, stage, trial, input, perturbation index]`|
//! | sensitivity samples     | `[SENSITIVITY, stage, trial, input]`                   |
//! | randomized labels       | `[LABELS]`                                             |
//!
//! Explainer seeds do not depend on stage or trial, so a stage-0 explanation
//! reproduces the reference exactly and only the model changes across cells.
//! Infidelity and sensitivity samples are shared by all explainers of a cell.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::explain::{
    aggregate_text_attribution, explain_many, image_attribution_to_map, Attributable, ExplainerSpec, Variant,
};
use crate::metrics::{
    infidelity_from_samples, sensitivity_from_samples, Perturbation, PerturbationSpec, DEFAULT_INFIDELITY_SAMPLES,
    DEFAULT_SENSITIVITY_RADIUS, DEFAULT_SENSITIVITY_SAMPLES,
};
use crate::models::{
    accuracy, default_slice_dims, function_slice, train, Activation, Hyper, Model, ModelConfig, Pooling, SliceCurve,
    TrainedModel, DEFAULT_SLICE_DIMS,
};
use crate::seed::{derive_seed, purpose, rng};
use crate::similarity::{similarity, SimilarityMetric};
use crate::tensor::Tensor;

pub const DEFAULT_TRIALS: usize = 10;

/// Order statistics of a sample; quartiles interpolate linearly between
/// order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot summarize an empty sample".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Ok(Self {
            n: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}

/// Raw values indexed `[trial][input]`, the per-trial means over inputs, and
/// summaries of both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub values: Vec<Vec<f64>>,
    pub trial_means: Vec<f64>,
    /// Summary over `trial_means`.
    pub summary: Summary,
    /// Summary over every raw value.
    pub pooled: Summary,
}

impl Series {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let trial_means: Vec<f64> = values
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect();
        let all: Vec<f64> = values.iter().flatten().copied().collect();
        Ok(Self {
            summary: Summary::of(&trial_means)?,
            pooled: Summary::of(&all)?,
            values,
            trial_means,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySettings {
    pub radius: f64,
    pub n_samples: usize,
    pub normalize: bool,
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        Self {
            radius: DEFAULT_SENSITIVITY_RADIUS,
            n_samples: DEFAULT_SENSITIVITY_SAMPLES,
            normalize: false,
        }
    }
}

/// Which quality metrics each cell computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub infidelity: Vec<Perturbation>,
    pub infidelity_samples: usize,
    pub sensitivity: Option<SensitivitySettings>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            infidelity: vec![Perturbation::default(), Perturbation::BaselineDiff],
            infidelity_samples: DEFAULT_INFIDELITY_SAMPLES,
            sensitivity: Some(SensitivitySettings::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomizationMode {
    /// Stage `k` re-initializes the top `k` layers.
    Cascading,
    /// Stage `k` re-initializes only the `k`-th layer from the top.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub explainers: Vec<ExplainerSpec>,
    pub trials: usize,
    pub seed: u64,
    pub metrics: MetricSettings,
    pub mode: RandomizationMode,
}

impl CascadeConfig {
    pub fn new(explainers: Vec<ExplainerSpec>, seed: u64) -> Self {
        Self {
            explainers,
            trials: DEFAULT_TRIALS,
            seed,
            metrics: MetricSettings::default(),
            mode: RandomizationMode::Cascading,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerReport {
    pub explainer: String,
    pub spec: ExplainerSpec,
    /// Similarity to the original model's explanation, keyed by metric.
    pub similarity: BTreeMap<String, Series>,
    /// Number of similarity values that fell back to a degenerate
    /// convention (zero norm, constant ranks), keyed by metric.
    pub degenerate: BTreeMap<String, usize>,
    /// Keyed by perturbation kind.
    pub infidelity: BTreeMap<String, Series>,
    pub max_sensitivity: Option<Series>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub stage: usize,
    /// Layer newly randomized at this stage, or `original` for stage 0.
    pub layer: String,
    pub randomized: Vec<String>,
    pub trials: usize,
    pub explainers: Vec<ExplainerReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub config: CascadeConfig,
    /// Class explained for each input: the original model's prediction.
    pub targets: Vec<usize>,
    pub stages: Vec<LayerReport>,
}

impl CascadeReport {
    pub fn stage(&self, layer: &str) -> Option<&LayerReport> {
        self.stages.iter().find(|s| s.layer == layer)
    }
}

impl LayerReport {
    pub fn explainer(&self, label: &str) -> Option<&ExplainerReport> {
        self.explainers.iter().find(|e| e.explainer == label)
    }
}

/// Similarity metrics applied to a task's explanations: SSIM only makes
/// sense for image maps.
pub fn similarity_metrics(model: &Model) -> Vec<SimilarityMetric> {
    if model.config().is_text() {
        vec![
            SimilarityMetric::Cosine,
            SimilarityMetric::Spearman,
            SimilarityMetric::Euclidean,
        ]
    } else {
        vec![
            SimilarityMetric::Ssim,
            SimilarityMetric::Spearman,
            SimilarityMetric::Euclidean,
        ]
    }
}

/// The representation explanations are compared in: grayscale maps for
/// images, normalized per-token scores for text.
pub fn comparable(model: &Model, attr: &Tensor) -> Result<Tensor> {
    if model.config().is_text() {
        aggregate_text_attribution(attr)
    } else {
        image_attribution_to_map(attr)
    }
}

/// Per-cell, per-input quality metrics for every explainer.
struct Quality {
    /// `[explainer][perturbation]`
    infidelity: Vec<Vec<f64>>,
    sensitivity: Vec<Option<f64>>,
}

struct CellKey {
    stage: u64,
    trial: u64,
    input: u64,
}

fn explainer_seeds(master: u64, input: usize, n: usize) -> Vec<u64> {
    (0..n)
        .map(|e| derive_seed(master, &[purpose::EXPLAIN, input as u64, e as u64]))
        .collect()
}

/// Infidelity and max-sensitivity of `attrs` at `x`, with samples shared
/// across explainers.
#[allow(clippy::too_many_arguments)]
fn quality<M: Attributable + ?Sized>(
    model: &M,
    specs: &[ExplainerSpec],
    seeds: &[u64],
    attrs: &[Tensor],
    x: &Tensor,
    baseline: &Tensor,
    target: usize,
    metrics: &MetricSettings,
    master: u64,
    key: &CellKey,
) -> Result<Quality> {
    let mut infidelity = vec![Vec::with_capacity(metrics.infidelity.len()); specs.len()];
    let fx = model.output(x, target)?;
    for (pi, kind) in metrics.infidelity.iter().enumerate() {
        let spec = PerturbationSpec {
            kind: *kind,
            n_samples: metrics.infidelity_samples,
            seed: derive_seed(
                master,
                &[purpose::INFIDELITY, key.stage, key.trial, key.input, pi as u64],
            ),
        };
        let perturbations = spec.draw(x, baseline)?;
        let shifted = perturbations
            .iter()
            .map(|i| model.output(&x.sub(i)?, target))
            .collect::<Result<Vec<_>>>()?;
        for (e, phi) in attrs.iter().enumerate() {
            let inf = infidelity_from_samples(phi, specs[e].variant, x, baseline, perturbations.clone(), fx, &shifted)?;
            infidelity[e].push(inf.score);
        }
    }
    let sensitivity = match &metrics.sensitivity {
        None => vec![None; specs.len()],
        Some(s) => {
            let spec = PerturbationSpec {
                kind: Perturbation::LinfUniform { radius: s.radius },
                n_samples: s.n_samples,
                seed: derive_seed(master, &[purpose::SENSITIVITY, key.stage, key.trial, key.input]),
            };
            let deltas = spec.draw(x, baseline)?;
            let moved = deltas
                .iter()
                .map(|d| explain_many(model, specs, &x.add(d)?, baseline, target, seeds))
                .collect::<Result<Vec<_>>>()?;
            (0..specs.len())
                .map(|e| {
                    let at_e: Vec<Tensor> = moved.iter().map(|m| m[e].clone()).collect();
                    sensitivity_from_samples(&attrs[e], deltas.clone(), &at_e, s.normalize).map(|r| Some(r.score))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(Quality {
        infidelity,
        sensitivity,
    })
}

/// Copy of `model` with the named layers re-initialized for one cell.
pub fn randomize_layers(model: &Model, layers: &[String], master: u64, stage: usize, trial: usize) -> Result<Model> {
    let names: Vec<String> = model.layer_names().iter().map(|s| s.to_string()).collect();
    let mut out = model.clone();
    for layer in layers {
        let li = names
            .iter()
            .position(|n| n == layer)
            .ok_or_else(|| Error::UnknownLayer(layer.clone()))?;
        let seed = derive_seed(master, &[purpose::REINIT, stage as u64, trial as u64, li as u64]);
        out = out.xavier_reinit(layer, seed)?;
    }
    Ok(out)
}

/// Layers randomized at each stage; stage 0 randomizes nothing.
pub fn stage_plan(model: &Model, mode: RandomizationMode) -> Vec<Vec<String>> {
    let top_down: Vec<String> = model.layer_names().iter().rev().map(|s| s.to_string()).collect();
    let mut plan = vec![vec![]];
    for k in 0..top_down.len() {
        plan.push(match mode {
            RandomizationMode::Cascading => top_down[..=k].to_vec(),
            RandomizationMode::Independent => vec![top_down[k].clone()],
        });
    }
    plan
}

struct CellResult {
    /// `[input][explainer][metric]`
    similarity: Vec<Vec<Vec<(f64, bool)>>>,
    /// `[input]`
    quality: Vec<Quality>,
}

/// Re-initializes layers from the top down and measures how far each
/// explainer moves from its explanation on the original model.
///
/// `inputs` are raw model inputs (pixels or token ids).
pub fn cascading_randomization_test(model: &Model, inputs: &[Tensor], cfg: &CascadeConfig) -> Result<CascadeReport> {
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no inputs to explain".into()));
    }
    if cfg.explainers.is_empty() {
        return Err(Error::InvalidArgument("no explainers configured".into()));
    }
    for spec in &cfg.explainers {
        spec.validate()?;
    }
    let targets = inputs
        .iter()
        .map(|x| Ok(model.predict(x)?.argmax()))
        .collect::<Result<Vec<_>>>()?;
    let metrics = similarity_metrics(model);
    let n_exp = cfg.explainers.len();
    let reference = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let seeds = explainer_seeds(cfg.seed, i, n_exp);
            let (view, xd) = model.focus(x)?;
            explain_many(
                &view,
                &cfg.explainers,
                &xd,
                &model.default_baseline(),
                targets[i],
                &seeds,
            )?
            .iter()
            .map(|a| comparable(model, a))
            .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let plan = stage_plan(model, cfg.mode);
    let cells: Vec<(usize, usize)> = (0..plan.len())
        .flat_map(|s| (0..cfg.trials).map(move |t| (s, t)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(stage, trial)| {
            let wrap = |input: usize| {
                move |e: Error| Error::HarnessCell {
                    stage,
                    trial,
                    input,
                    source: Box::new(e),
                }
            };
            let m = randomize_layers(model, &plan[stage], cfg.seed, stage, trial).map_err(wrap(0))?;
            let baseline = m.default_baseline();
            let mut cell = CellResult {
                similarity: Vec::with_capacity(inputs.len()),
                quality: Vec::with_capacity(inputs.len()),
            };
            for (i, x) in inputs.iter().enumerate() {
                let mut run = || -> Result<()> {
                    let seeds = explainer_seeds(cfg.seed, i, n_exp);
                    let (view, xd) = m.focus(x)?;
                    let attrs = explain_many(&view, &cfg.explainers, &xd, &baseline, targets[i], &seeds)?;
                    let sims = attrs
                        .iter()
                        .zip(&reference[i])
                        .map(|(a, r)| {
                            let c = comparable(&m, a)?;
                            metrics
                                .iter()
                                .map(|&metric| similarity(metric, &c, r).map(|s| (s.value, s.degenerate)))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let key = CellKey {
                        stage: stage as u64,
                        trial: trial as u64,
                        input: i as u64,
                    };
                    let q = quality(
                        &view,
                        &cfg.explainers,
                        &seeds,
                        &attrs,
                        &xd,
                        &baseline,
                        targets[i],
                        &cfg.metrics,
                        cfg.seed,
                        &key,
                    )?;
                    cell.similarity.push(sims);
                    cell.quality.push(q);
                    Ok(())
                };
                run().map_err(wrap(i))?;
            }
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut stages = Vec::with_capacity(plan.len());
    for (stage, randomized) in plan.iter().enumerate() {
        let cells = &results[stage * cfg.trials..(stage + 1) * cfg.trials];
        let explainers = cfg
            .explainers
            .iter()
            .enumerate()
            .map(|(e, spec)| explainer_report(spec, e, cells, &metrics, &cfg.metrics))
            .collect::<Result<Vec<_>>>()?;
        stages.push(LayerReport {
            stage,
            layer: match stage {
                0 => "original".into(),
                _ => plan[stage].last().expect("nonempty").clone(),
            },
            randomized: randomized.clone(),
            trials: cfg.trials,
            explainers,
        });
    }
    Ok(CascadeReport {
        config: cfg.clone(),
        targets,
        stages,
    })
}

fn explainer_report(
    spec: &ExplainerSpec,
    e: usize,
    cells: &[CellResult],
    metrics: &[SimilarityMetric],
    settings: &MetricSettings,
) -> Result<ExplainerReport> {
    let mut similarity = BTreeMap::new();
    let mut degenerate = BTreeMap::new();
    for (mi, metric) in metrics.iter().enumerate() {
        let values: Vec<Vec<f64>> = cells
            .iter()
            .map(|c| c.similarity.iter().map(|per_input| per_input[e][mi].0).collect())
            .collect();
        let flagged = cells
            .iter()
            .flat_map(|c| c.similarity.iter().filter(|per_input| per_input[e][mi].1))
            .count();
        similarity.insert(metric.label().to_string(), Series::new(values)?);
        degenerate.insert(metric.label().to_string(), flagged);
    }
    let mut infidelity = BTreeMap::new();
    for (pi, kind) in settings.infidelity.iter().enumerate() {
        let values = cells
            .iter()
            .map(|c| c.quality.iter().map(|q| q.infidelity[e][pi]).collect())
            .collect();
        infidelity.insert(kind.label().to_string(), Series::new(values)?);
    }
    let max_sensitivity = match settings.sensitivity {
        None => None,
        Some(_) => {
            let values = cells
                .iter()
                .map(|c| c.quality.iter().map(|q| q.sensitivity[e].expect("computed")).collect())
                .collect();
            Some(Series::new(values)?)
        }
    };
    Ok(ExplainerReport {
        explainer: spec.label(),
        spec: spec.clone(),
        similarity,
        degenerate,
        infidelity,
        max_sensitivity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relabel {
    /// Every training label redrawn uniformly from `[0, C)`.
    Uniform,
    /// Labels left as they are; a control that must reproduce the honest model.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRandomizationConfig {
    pub hyper: Hyper,
    pub explainers: Vec<ExplainerSpec>,
    pub seed: u64,
    pub relabel: Relabel,
    pub metrics: MetricSettings,
}

impl DataRandomizationConfig {
    pub fn new(hyper: Hyper, explainers: Vec<ExplainerSpec>, seed: u64) -> Self {
        Self {
            hyper,
            explainers,
            seed,
            relabel: Relabel::Uniform,
            metrics: MetricSettings::default(),
        }
    }
}

/// Per-input values for one explainer on both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModelReport {
    pub explainer: String,
    pub spec: ExplainerSpec,
    /// Similarity between the two models' explanations, per input.
    pub similarity: BTreeMap<String, Vec<f64>>,
    pub similarity_summary: BTreeMap<String, Summary>,
    pub infidelity_true: BTreeMap<String, Vec<f64>>,
    pub infidelity_random: BTreeMap<String, Vec<f64>>,
    pub sensitivity_true: Option<Vec<f64>>,
    pub sensitivity_random: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRandomizationReport {
    pub config: DataRandomizationConfig,
    pub model: ModelConfig,
    pub chance: f64,
    pub true_accuracy: f64,
    pub random_accuracy: f64,
    /// Fraction of training labels changed by relabeling.
    pub labels_changed: f64,
    /// Class explained for each input: the honest model's prediction.
    pub targets: Vec<usize>,
    pub explainers: Vec<CrossModelReport>,
}

impl DataRandomizationReport {
    pub fn explainer(&self, label: &str) -> Option<&CrossModelReport> {
        self.explainers.iter().find(|e| e.explainer == label)
    }
}

pub struct DataRandomization {
    pub report: DataRandomizationReport,
    pub honest: TrainedModel,
    pub randomized: TrainedModel,
}

/// Training labels after `relabel`, drawn from `[LABELS]` under `seed`.
pub fn relabeled(dataset: &Dataset, relabel: Relabel, seed: u64) -> Dataset {
    let mut out = dataset.clone();
    if relabel == Relabel::Uniform {
        let mut r = rng(derive_seed(seed, &[purpose::LABELS]));
        for ex in &mut out.train {
            ex.label = rand::Rng::random_range(&mut r, 0..dataset.num_classes);
        }
    }
    out
}

/// Trains one model on true labels and one on randomized labels with
/// otherwise identical seeds, then compares their explanations.
pub fn data_randomization_test(
    dataset: &Dataset,
    model_config: &ModelConfig,
    inputs: &[Tensor],
    cfg: &DataRandomizationConfig,
) -> Result<DataRandomization> {
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training examples".into()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no inputs to explain".into()));
    }
    let shuffled = relabeled(dataset, cfg.relabel, cfg.seed);
    let changed = dataset
        .train
        .iter()
        .zip(&shuffled.train)
        .filter(|(a, b)| a.label != b.label)
        .count() as f64
        / dataset.train.len() as f64;
    let honest = train(model_config, dataset, &cfg.hyper)?;
    let randomized = train(model_config, &shuffled, &cfg.hyper)?;
    let held_out = if dataset.test.is_empty() {
        &dataset.train
    } else {
        &dataset.test
    };
    let true_accuracy = accuracy(&honest.model, held_out)?;
    let random_accuracy = accuracy(&randomized.model, held_out)?;
    let (a, b) = (&honest.model, &randomized.model);
    let targets = inputs
        .iter()
        .map(|x| Ok(a.predict(x)?.argmax()))
        .collect::<Result<Vec<_>>>()?;
    let metrics = similarity_metrics(a);
    let n_exp = cfg.explainers.len();
    let per_input = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let seeds = explainer_seeds(cfg.seed, i, n_exp);
            let key = CellKey {
                stage: 0,
                trial: 0,
                input: i as u64,
            };
            let side = |m: &Model| -> Result<(Vec<Tensor>, Quality)> {
                let (view, xd) = m.focus(x)?;
                let base = m.default_baseline();
                let attrs = explain_many(&view, &cfg.explainers, &xd, &base, targets[i], &seeds)?;
                let q = quality(
                    &view,
                    &cfg.explainers,
                    &seeds,
                    &attrs,
                    &xd,
                    &base,
                    targets[i],
                    &cfg.metrics,
                    cfg.seed,
                    &key,
                )?;
                Ok((attrs, q))
            };
            let (attr_a, qa) = side(a)?;
            let (attr_b, qb) = side(b)?;
            let sims = attr_a
                .iter()
                .zip(&attr_b)
                .map(|(p, q)| {
                    let (p, q) = (comparable(a, p)?, comparable(b, q)?);
                    metrics
                        .iter()
                        .map(|&metric| similarity(metric, &p, &q).map(|s| s.value))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((sims, qa, qb))
        })
        .collect::<Result<Vec<_>>>()?;

    let explainers = cfg
        .explainers
        .iter()
        .enumerate()
        .map(|(e, spec)| {
            let mut similarity = BTreeMap::new();
            let mut similarity_summary = BTreeMap::new();
            for (mi, metric) in metrics.iter().enumerate() {
                let v: Vec<f64> = per_input.iter().map(|(s, _, _)| s[e][mi]).collect();
                similarity_summary.insert(metric.label().to_string(), Summary::of(&v)?);
                similarity.insert(metric.label().to_string(), v);
            }
            let infid = |pick: &dyn Fn(&(Vec<Vec<f64>>, Quality, Quality)) -> &Quality| {
                cfg.metrics
                    .infidelity
                    .iter()
                    .enumerate()
                    .map(|(pi, kind)| {
                        let v = per_input.iter().map(|c| pick(c).infidelity[e][pi]).collect();
                        (kind.label().to_string(), v)
                    })
                    .collect::<BTreeMap<_, _>>()
            };
            let sens = |pick: &dyn Fn(&(Vec<Vec<f64>>, Quality, Quality)) -> &Quality| {
                cfg.metrics.sensitivity.map(|_| {
                    per_input
                        .iter()
                        .map(|c| pick(c).sensitivity[e].expect("computed"))
                        .collect()
                })
            };
            Ok(CrossModelReport {
                explainer: spec.label(),
                spec: spec.clone(),
                similarity,
                similarity_summary,
                infidelity_true: infid(&|c| &c.1),
                infidelity_random: infid(&|c| &c.2),
                sensitivity_true: sens(&|c| &c.1),
                sensitivity_random: sens(&|c| &c.2),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = DataRandomizationReport {
        config: cfg.clone(),
        model: model_config.clone(),
        chance: 1.0 / dataset.num_classes as f64,
        true_accuracy,
        random_accuracy,
        labels_changed: changed,
        targets,
        explainers,
    };
    Ok(DataRandomization {
        report,
        honest,
        randomized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub softplus_beta: f64,
    pub lse_temperature: f64,
    pub ig_steps: usize,
    pub metrics: MetricSettings,
    pub slice_dims: usize,
    pub slice_range: (f64, f64),
    pub slice_samples: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            softplus_beta: 10.0,
            lse_temperature: 10.0,
            ig_steps: crate::explain::DEFAULT_IG_STEPS,
            metrics: MetricSettings::default(),
            slice_dims: DEFAULT_SLICE_DIMS,
            slice_range: (-1.0, 1.0),
            slice_samples: 101,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepInput {
    pub target: usize,
    pub dims: Vec<usize>,
    /// Keyed `"{explainer}:{perturbation}"`, e.g. `ig/global:baseline_diff`.
    pub infidelity: BTreeMap<String, f64>,
    /// Keyed by explainer.
    pub max_sensitivity: BTreeMap<String, f64>,
    pub slices: Vec<SliceCurve>,
    pub max_second_difference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepVariant {
    pub name: String,
    pub activation: Activation,
    pub pooling: Pooling,
    pub inputs: Vec<SweepInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub variants: Vec<SweepVariant>,
}

impl SweepReport {
    pub fn variant(&self, name: &str) -> Option<&SweepVariant> {
        self.variants.iter().find(|v| v.name == name)
    }
}

pub fn variant_name(activation: &Activation, pooling: &Pooling) -> String {
    let a = match activation {
        Activation::Relu => "relu",
        Activation::Softplus { .. } => "softplus",
    };
    let p = match pooling {
        Pooling::Max => "maxpool",
        Pooling::Lse { .. } => "lsepool",
    };
    format!("{a}+{p}")
}

/// Re-evaluates one set of trained image weights under every combination
/// of ReLU/Softplus and max/LSE pooling.
///
/// Targets and slice dimensions come from the ReLU + max-pool model so every
/// variant is probed at the same places.
pub fn smoothness_sweep(model: &Model, inputs: &[Tensor], cfg: &SweepConfig) -> Result<SweepReport> {
    if model.config().is_text() {
        return Err(Error::InvalidArgument(
            "the smoothness sweep needs an image model".into(),
        ));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no inputs to explain".into()));
    }
    let relu = Activation::Relu;
    let soft = Activation::Softplus {
        beta: cfg.softplus_beta,
    };
    let max = Pooling::Max;
    let lse = Pooling::Lse {
        temperature: cfg.lse_temperature,
    };
    let combos = [(relu, max), (relu, lse), (soft, max), (soft, lse)];
    let reference = model.with_variant(relu, max)?;
    let probes = inputs
        .iter()
        .map(|x| {
            let target = reference.predict(x)?.argmax();
            let dims = default_slice_dims(&reference, x, target, cfg.slice_dims)?;
            Ok((target, dims))
        })
        .collect::<Result<Vec<_>>>()?;
    let specs: Vec<ExplainerSpec> = [Variant::Local, Variant::Global]
        .into_iter()
        .map(|v| ExplainerSpec::ig(v).with_steps(cfg.ig_steps))
        .collect();
    let variants = combos
        .iter()
        .map(|&(activation, pooling)| {
            let m = model.with_variant(activation, pooling)?;
            let baseline = m.default_baseline();
            let per_input = inputs
                .par_iter()
                .zip(&probes)
                .enumerate()
                .map(|(i, (x, (target, dims)))| {
                    let seeds = explainer_seeds(cfg.seed, i, specs.len());
                    let attrs = explain_many(&m, &specs, x, &baseline, *target, &seeds)?;
                    let key = CellKey {
                        stage: 0,
                        trial: 0,
                        input: i as u64,
                    };
                    let q = quality(
                        &m,
                        &specs,
                        &seeds,
                        &attrs,
                        x,
                        &baseline,
                        *target,
                        &cfg.metrics,
                        cfg.seed,
                        &key,
                    )?;
                    let mut infidelity = BTreeMap::new();
                    let mut max_sensitivity = BTreeMap::new();
                    for (e, spec) in specs.iter().enumerate() {
                        for (pi, kind) in cfg.metrics.infidelity.iter().enumerate() {
                            infidelity.insert(format!("{}:{}", spec.label(), kind.label()), q.infidelity[e][pi]);
                        }
                        if let Some(s) = q.sensitivity[e] {
                            max_sensitivity.insert(spec.label(), s);
                        }
                    }
                    let slices = function_slice(&m, x, dims, cfg.slice_range, cfg.slice_samples, *target)?;
                    let max_second_difference = slices.iter().map(SliceCurve::max_second_difference).collect();
                    Ok(SweepInput {
                        target: *target,
                        dims: dims.clone(),
                        infidelity,
                        max_sensitivity,
                        slices,
                        max_second_difference,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepVariant {
                name: variant_name(&activation, &pooling),
                activation,
                pooling,
                inputs: per_input,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        config: cfg.clone(),
        variants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max, s.mean),
            (1.0, 2.0, 3.0, 4.0, 5.0, 3.0)
        );
        let e = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((e.q1, e.median, e.q3), (1.75, 2.5, 3.25));
        assert!(Summary::of(&[]).is_err());
    }
}
