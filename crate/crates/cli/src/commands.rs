//! Subcommand implementations. Each returns the `(config, results)` pair of
//! its run record.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use saliency_audit::data::{
    generate_synthetic_digits, generate_synthetic_text, load_mnist_dir, load_tsv, Dataset, Example, TaskKind, Vocab,
    DEFAULT_MAX_LEN,
};
use saliency_audit::explain::{
    aggregate_text_attribution, explain, image_attribution_to_map, AttributionRequest, ExplainerSpec, Method,
    ShapParams, SmoothGradParams, Variant,
};
use saliency_audit::harness::{
    cascading_randomization_test, data_randomization_test, smoothness_sweep, CascadeConfig, DataRandomizationConfig,
    MetricSettings, RandomizationMode, Relabel, SensitivitySettings, SweepConfig,
};
use saliency_audit::metrics::{infidelity, max_sensitivity, Perturbation, PerturbationSpec, SensitivitySpec};
use saliency_audit::models::{
    load_checkpoint, save_checkpoint, Activation, Hyper, Model, ModelConfig, Optimizer, Pooling,
};
use saliency_audit::report::{export_saliency_pgm, export_text_heat};
use saliency_audit::seed::{derive_seed, purpose};
use saliency_audit::Tensor;

use crate::args::*;
use crate::Usage;

const DEFAULT_IMAGE_TRAIN: usize = 2000;
const DEFAULT_TEXT_TRAIN: usize = 800;

pub fn load_data(a: &DataArgs) -> Result<Dataset> {
    let regroup = |ds: Dataset, n_train: usize| {
        let mut all = ds;
        let mut test = std::mem::take(&mut all.test);
        all.train.append(&mut test);
        all.train.truncate(n_train + a.n_test);
        all.split_off_test(a.n_test)
    };
    let ds = match &a.data {
        DataSource::Digits => {
            generate_synthetic_digits(a.data_seed, a.n_train.unwrap_or(DEFAULT_IMAGE_TRAIN), a.n_test)
        }
        DataSource::Mnist(dir) => load_mnist_dir(dir, a.n_train.unwrap_or(DEFAULT_IMAGE_TRAIN), a.n_test)
            .with_context(|| format!("loading MNIST from {}", dir.display()))?,
        DataSource::Text => {
            let n_train = a.n_train.unwrap_or(DEFAULT_TEXT_TRAIN);
            regroup(generate_synthetic_text(a.data_seed, n_train + a.n_test), n_train)
        }
        DataSource::Tsv(path) => {
            let ds = load_tsv(path, DEFAULT_MAX_LEN).with_context(|| format!("loading {}", path.display()))?;
            let n_train = a.n_train.unwrap_or(usize::MAX - a.n_test);
            regroup(ds, n_train)
        }
    };
    ds.validate()?;
    if ds.train.is_empty() && ds.test.is_empty() {
        bail!("data source {} produced no examples", a.data);
    }
    Ok(ds)
}

fn model_config(ds: &Dataset, arch: &ModelArgs, seed: u64) -> Result<ModelConfig> {
    let mut cfg = match ds.task {
        TaskKind::Image => ModelConfig::image(ds.num_classes, seed),
        TaskKind::Text => {
            let vocab = ds.vocab.as_ref().context("text dataset without vocabulary")?;
            ModelConfig::text(vocab.len(), ds.num_classes, seed)
        }
    };
    cfg.activation = match arch.activation {
        ActivationArg::Relu => Activation::Relu,
        ActivationArg::Softplus => Activation::Softplus { beta: arch.beta },
    };
    cfg.pooling = match arch.pooling {
        PoolingArg::Max => Pooling::Max,
        PoolingArg::Lse => Pooling::Lse {
            temperature: arch.temperature,
        },
    };
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

fn hyper(arch: &ModelArgs, seed: u64) -> Hyper {
    Hyper {
        lr: arch.lr,
        epochs: arch.epochs,
        batch: arch.batch,
        optimizer: match arch.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        seed,
    }
}

fn specs(m: &MethodArgs, variants: &[Variant]) -> Result<Vec<ExplainerSpec>> {
    variants
        .iter()
        .map(|&v| {
            let spec = ExplainerSpec {
                method: m.method.clone(),
                variant: v,
                ig_steps: m.steps,
                smoothgrad: SmoothGradParams {
                    n: m.sg_samples,
                    sigma: m.sg_sigma,
                },
                shap: ShapParams {
                    n: m.shap_samples,
                    sigma: m.shap_sigma,
                },
            };
            spec.validate().map_err(|e| Usage(e.to_string()))?;
            Ok(spec)
        })
        .collect()
}

fn one_variant(v: VariantArg) -> Variant {
    match v {
        VariantArg::Local => Variant::Local,
        VariantArg::Global => Variant::Global,
    }
}

fn variants(v: VariantsArg) -> Vec<Variant> {
    match v {
        VariantsArg::Local => vec![Variant::Local],
        VariantsArg::Global => vec![Variant::Global],
        VariantsArg::Both => vec![Variant::Global, Variant::Local],
    }
}

fn harness_metrics(a: &HarnessMetricArgs) -> Result<MetricSettings> {
    if !(a.sigma > 0.0) || !(a.sens_radius > 0.0) {
        return Err(Usage("--sigma and --sens-radius must be positive".into()).into());
    }
    Ok(MetricSettings {
        infidelity: vec![Perturbation::Gaussian { sigma: a.sigma }, Perturbation::BaselineDiff],
        infidelity_samples: a.infidelity_samples,
        sensitivity: (!a.no_sensitivity).then_some(SensitivitySettings {
            radius: a.sens_radius,
            n_samples: a.sens_samples,
            normalize: false,
        }),
    })
}

/// Loads a checkpoint and checks it fits the dataset.
fn load_model(path: &Path, ds: &Dataset) -> Result<Model> {
    let (model, vocab) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let text = model.config().is_text();
    if text != (ds.task == TaskKind::Text) {
        bail!(
            "checkpoint is a {} model but the data is not",
            if text { "text" } else { "image" }
        );
    }
    if model.num_classes() != ds.num_classes {
        bail!(
            "checkpoint has {} classes, data {}",
            model.num_classes(),
            ds.num_classes
        );
    }
    if let (Some(a), Some(b)) = (&vocab, &ds.vocab) {
        if a.words() != b.words() {
            bail!("checkpoint vocabulary differs from the data's; pass the data options used for training");
        }
    }
    Ok(model)
}

fn balanced_inputs(ds: &Dataset, n: usize) -> Result<Vec<Tensor>> {
    let picked: Vec<Tensor> = ds.balanced_test(n).into_iter().map(|e| e.input.clone()).collect();
    if picked.is_empty() {
        bail!("the test split is empty");
    }
    Ok(picked)
}

fn test_example(ds: &Dataset, index: usize) -> Result<&Example> {
    ds.test.get(index).ok_or_else(|| {
        Usage(format!(
            "--index {index} but the test split has {} examples",
            ds.test.len()
        ))
        .into()
    })
}

fn token_words(vocab: &Vocab, tokens: &Tensor) -> Vec<String> {
    tokens
        .data()
        .iter()
        .map(|&id| vocab.word(id as usize).unwrap_or("<?>").to_string())
        .collect()
}

pub fn train(a: &TrainArgs, seed: u64) -> Result<Value> {
    let ds = load_data(&a.data)?;
    let cfg = model_config(&ds, &a.arch, seed)?;
    let trained = saliency_audit::models::train(&cfg, &ds, &hyper(&a.arch, seed))?;
    save_checkpoint(&a.model, &trained.model, ds.vocab.as_ref())
        .with_context(|| format!("writing {}", a.model.display()))?;
    Ok(json!({
        "model": cfg,
        "param_count": trained.model.param_count(),
        "layers": trained.model.layer_names(),
        "history": trained.history,
        "test_accuracy": trained.test_accuracy,
    }))
}

pub fn explain_cmd(a: &ExplainCmd, seed: u64) -> Result<Value> {
    let ds = load_data(&a.data)?;
    let model = load_model(&a.model, &ds)?;
    let ex = test_example(&ds, a.index)?;
    let spec = specs(&a.method, &[one_variant(a.variant)])?.remove(0);
    if matches!(spec.method, Method::GuidedBackprop) && !model.config().activation.is_relu() {
        return Err(Usage("guided_backprop needs a relu model".into()).into());
    }
    let logits = model.predict(&ex.input)?;
    let target = a.target.unwrap_or_else(|| logits.argmax());
    model.check_target(target).map_err(|e| Usage(e.to_string()))?;
    let (view, xd) = model.focus(&ex.input)?;
    let req = AttributionRequest::new(
        spec.clone(),
        xd,
        model.default_baseline(),
        target,
        derive_seed(seed, &[purpose::EXPLAIN, a.index as u64]),
    );
    let attr = explain(&view, &req)?.values;
    let mut results = json!({
        "index": a.index,
        "label": ex.label,
        "target": target,
        "logits": logits,
        "explainer": spec.label(),
        "attribution": attr,
    });
    match ds.task {
        TaskKind::Image => {
            let map = image_attribution_to_map(&attr)?;
            if let Some(p) = &a.pgm {
                export_saliency_pgm(&map, p).with_context(|| format!("writing {}", p.display()))?;
            }
            results["map"] = serde_json::to_value(&map)?;
        }
        TaskKind::Text => {
            let vocab = ds.vocab.as_ref().context("text dataset without vocabulary")?;
            let pad = vocab.pad_id() as f64;
            let scores = aggregate_text_attribution(&attr)?;
            let words = token_words(vocab, &ex.input);
            let real: Vec<usize> = (0..words.len()).filter(|&i| ex.input.data()[i] != pad).collect();
            let tokens: Vec<String> = real.iter().map(|&i| words[i].clone()).collect();
            let token_scores: Vec<f64> = real.iter().map(|&i| scores.data()[i]).collect();
            if let Some(p) = &a.html {
                export_text_heat(&tokens, &token_scores, p).with_context(|| format!("writing {}", p.display()))?;
            }
            results["tokens"] = json!(tokens);
            results["token_scores"] = json!(token_scores);
        }
    }
    Ok(results)
}

pub fn cascade(a: &CascadeArgs, seed: u64) -> Result<Value> {
    let ds = load_data(&a.data)?;
    let model = load_model(&a.model, &ds)?;
    let inputs = balanced_inputs(&ds, a.inputs)?;
    let mut cfg = CascadeConfig::new(specs(&a.method, &variants(a.variant))?, seed);
    cfg.trials = a.trials;
    cfg.metrics = harness_metrics(&a.metrics)?;
    cfg.mode = if a.independent {
        RandomizationMode::Independent
    } else {
        RandomizationMode::Cascading
    };
    Ok(serde_json::to_value(cascading_randomization_test(
        &model, &inputs, &cfg,
    )?)?)
}

pub fn data_randomization(a: &DataRandArgs, seed: u64) -> Result<Value> {
    let ds = load_data(&a.data)?;
    let model_cfg = model_config(&ds, &a.arch, seed)?;
    let inputs = balanced_inputs(&ds, a.inputs)?;
    let mut cfg = DataRandomizationConfig::new(hyper(&a.arch, seed), specs(&a.method, &variants(a.variant))?, seed);
    cfg.relabel = match a.relabel {
        RelabelArg::Uniform => Relabel::Uniform,
        RelabelArg::Identity => Relabel::Identity,
    };
    cfg.metrics = harness_metrics(&a.metrics)?;
    let run = data_randomization_test(&ds, &model_cfg, &inputs, &cfg)?;
    Ok(serde_json::to_value(run.report)?)
}

pub fn sweep(a: &SweepArgs, seed: u64) -> Result<Value> {
    let ds = load_data(&a.data)?;
    if ds.task != TaskKind::Image {
        return Err(Usage("sweep needs an image model".into()).into());
    }
    let model = load_model(&a.model, &ds)?;
    let inputs = balanced_inputs(&ds, a.inputs)?;
    let mut cfg = SweepConfig::new(seed);
    cfg.softplus_beta = a.beta;
    cfg.lse_temperature = a.temperature;
    cfg.ig_steps = a.steps;
    cfg.metrics = harness_metrics(&a.metrics)?;
    cfg.slice_dims = a.slice_dims;
    cfg.slice_samples = a.slice_samples as usize;
    Ok(serde_json::to_value(smoothness_sweep(&model, &inputs, &cfg)?)?)
}

pub fn metrics(a: &MetricsArgs, seed: u64) -> Result<Value> {
    let ds = load_data(&a.data)?;
    let model = load_model(&a.model, &ds)?;
    let ex = test_example(&ds, a.index)?;
    let spec = specs(&a.method, &[one_variant(a.variant)])?.remove(0);
    let target = match a.target {
        Some(t) => t,
        None => model.predict(&ex.input)?.argmax(),
    };
    model.check_target(target).map_err(|e| Usage(e.to_string()))?;
    if !(a.scale > 0.0) || !(a.sens_radius > 0.0) {
        return Err(Usage("--scale and --sens-radius must be positive".into()).into());
    }
    let (view, xd) = model.focus(&ex.input)?;
    let baseline = model.default_baseline();
    let index = a.index as u64;
    let req = AttributionRequest::new(
        spec.clone(),
        xd.clone(),
        baseline.clone(),
        target,
        derive_seed(seed, &[purpose::EXPLAIN, index]),
    );
    let phi = explain(&view, &req)?.values;
    let kind = match a.perturbation {
        PerturbationArg::Gaussian => Perturbation::Gaussian { sigma: a.scale },
        PerturbationArg::LinfUniform => Perturbation::LinfUniform { radius: a.scale },
        PerturbationArg::BaselineDiff => Perturbation::BaselineDiff,
    };
    let pspec = PerturbationSpec {
        kind,
        n_samples: a.samples,
        seed: derive_seed(seed, &[purpose::INFIDELITY, index]),
    };
    let inf = infidelity(&view, &phi, spec.variant, &xd, &baseline, target, &pspec)?;
    let sspec = SensitivitySpec {
        radius: a.sens_radius,
        n_samples: a.sens_samples,
        seed: derive_seed(seed, &[purpose::SENSITIVITY, index]),
        normalize: a.normalize,
    };
    let sens = max_sensitivity(&view, &req, Some(&phi), &sspec)?;
    let mut inf_json = json!({ "spec": pspec, "score": inf.score, "errors": inf.errors });
    let mut sens_json = json!({ "spec": sspec, "score": sens.score, "changes": sens.changes });
    if a.log_samples {
        inf_json["perturbations"] = serde_json::to_value(&inf.perturbations)?;
        sens_json["deltas"] = serde_json::to_value(&sens.deltas)?;
    }
    Ok(json!({
        "index": a.index,
        "target": target,
        "explainer": spec.label(),
        "infidelity": inf_json,
        "max_sensitivity": sens_json,
    }))
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
