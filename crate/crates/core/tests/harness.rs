//! Cascading and label randomization, and the smoothness sweep, on small
//! trained models.

mod common;

use saliency_audit::data::generate_synthetic_digits;
use saliency_audit::explain::{explain, AttributionRequest, ExplainerSpec, Method, Variant};
use saliency_audit::harness::{
    cascading_randomization_test, comparable, data_randomization_test, randomize_layers, relabeled, smoothness_sweep,
    stage_plan, CascadeConfig, CascadeReport, DataRandomizationConfig, MetricSettings, RandomizationMode, Relabel,
    SensitivitySettings, Series, Summary, SweepConfig,
};
use saliency_audit::metrics::Perturbation;
use saliency_audit::models::{Hyper, Model, ModelConfig};
use saliency_audit::similarity::ssim;
use saliency_audit::{Error, Tensor};

fn specs() -> Vec<ExplainerSpec> {
    vec![
        ExplainerSpec::ig(Variant::Global).with_steps(8),
        ExplainerSpec::ig(Variant::Local).with_steps(8),
        ExplainerSpec::new(Method::Saliency, Variant::Local),
    ]
}

fn small_metrics() -> MetricSettings {
    MetricSettings {
        infidelity: vec![Perturbation::default(), Perturbation::BaselineDiff],
        infidelity_samples: 4,
        sensitivity: Some(SensitivitySettings {
            n_samples: 2,
            ..SensitivitySettings::default()
        }),
    }
}

fn config(seed: u64, trials: usize) -> CascadeConfig {
    CascadeConfig {
        trials,
        metrics: small_metrics(),
        ..CascadeConfig::new(specs(), seed)
    }
}

fn image_inputs(n: usize) -> Vec<Tensor> {
    common::image()
        .data
        .balanced_test(n)
        .into_iter()
        .map(|e| e.input.clone())
        .collect()
}

fn cascade(inputs: &[Tensor], cfg: &CascadeConfig) -> CascadeReport {
    cascading_randomization_test(&common::image().model, inputs, cfg).unwrap()
}

fn weights(m: &Model) -> Vec<(String, Tensor)> {
    m.params().map(|p| (p.name.clone(), p.tensor.clone())).collect()
}

fn series_consistent(s: &Series, trials: usize, inputs: usize) {
    assert_eq!(s.values.len(), trials);
    assert!(s.values.iter().all(|row| row.len() == inputs));
    let means: Vec<f64> = s
        .values
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    assert_eq!(s.trial_means, means);
    assert_eq!(s.summary, Summary::of(&means).unwrap());
    let all: Vec<f64> = s.values.iter().flatten().copied().collect();
    assert_eq!(s.pooled, Summary::of(&all).unwrap());
    assert!(s.summary.min <= s.summary.q1 && s.summary.q1 <= s.summary.median);
    assert!(s.summary.median <= s.summary.q3 && s.summary.q3 <= s.summary.max);
}

#[test]
fn cascade_report_structure() {
    let fx = common::image();
    let inputs = image_inputs(3);
    let r = cascade(&inputs, &config(5, 2));
    let layers = fx.model.layer_names();
    assert_eq!(r.stages.len(), layers.len() + 1);
    assert_eq!(r.stages[0].layer, "original");
    let top_down: Vec<&str> = layers.iter().rev().copied().collect();
    for (k, stage) in r.stages.iter().enumerate().skip(1) {
        assert_eq!(stage.layer, top_down[k - 1]);
        assert_eq!(stage.randomized, top_down[..k]);
    }
    for stage in &r.stages {
        assert_eq!(stage.trials, 2);
        assert_eq!(stage.explainers.len(), 3);
        for e in &stage.explainers {
            assert_eq!(
                e.similarity.keys().collect::<Vec<_>>(),
                ["euclidean", "spearman", "ssim"]
            );
            assert_eq!(e.infidelity.keys().collect::<Vec<_>>(), ["baseline_diff", "gaussian"]);
            for s in e
                .similarity
                .values()
                .chain(e.infidelity.values())
                .chain(&e.max_sensitivity)
            {
                series_consistent(s, 2, 3);
            }
        }
    }
    let targets: Vec<usize> = inputs.iter().map(|x| fx.model.predict(x).unwrap().argmax()).collect();
    assert_eq!(r.targets, targets);
}

#[test]
fn stage_zero_reproduces_the_reference() {
    let r = cascade(&image_inputs(2), &config(6, 2));
    for e in &r.stages[0].explainers {
        for v in e.similarity["ssim"].values.iter().flatten() {
            assert!((v - 1.0).abs() < 1e-12, "{}: {v}", e.explainer);
        }
        assert!(e.similarity["euclidean"].values.iter().flatten().all(|v| *v == 0.0));
        assert!(e.similarity["spearman"]
            .values
            .iter()
            .flatten()
            .all(|v| (v - 1.0).abs() < 1e-12));
    }
}

#[test]
fn stage_metrics_match_direct_recomputation() {
    let fx = common::image();
    let inputs = image_inputs(2);
    let cfg = config(8, 2);
    let r = cascade(&inputs, &cfg);
    let plan = stage_plan(&fx.model, RandomizationMode::Cascading);
    let (stage, trial, input) = (2, 1, 1);
    let m = randomize_layers(&fx.model, &plan[stage], cfg.seed, stage, trial).unwrap();
    let seed = saliency_audit::seed::derive_seed(cfg.seed, &[saliency_audit::seed::purpose::EXPLAIN, input as u64, 0]);
    let req = |model: &Model| {
        AttributionRequest::new(
            cfg.explainers[0].clone(),
            inputs[input].clone(),
            model.default_baseline(),
            r.targets[input],
            seed,
        )
    };
    let reference = comparable(&fx.model, &explain(&fx.model, &req(&fx.model)).unwrap().values).unwrap();
    let moved = comparable(&m, &explain(&m, &req(&m)).unwrap().values).unwrap();
    let want = ssim(&moved, &reference).unwrap().value;
    assert_eq!(
        r.stages[stage].explainers[0].similarity["ssim"].values[trial][input],
        want
    );
}

#[test]
fn cascade_runs_are_reproducible_and_cells_are_isolated() {
    let inputs = image_inputs(3);
    let a = cascade(&inputs, &config(9, 2));
    assert_eq!(a, cascade(&inputs, &config(9, 2)));
    // Extra trials and a shorter input list leave the shared cells alone.
    let more = cascade(&inputs[..2], &config(9, 3));
    for (sa, sb) in a.stages.iter().zip(&more.stages) {
        for (ea, eb) in sa.explainers.iter().zip(&sb.explainers) {
            for (k, s) in &ea.similarity {
                for t in 0..2 {
                    assert_eq!(s.values[t][..2], eb.similarity[k].values[t][..]);
                }
            }
            for (k, s) in &ea.infidelity {
                assert_eq!(s.values[1][..2], eb.infidelity[k].values[1][..]);
            }
        }
    }
    let other = cascade(&inputs, &config(10, 2));
    assert_ne!(a.stages[1], other.stages[1]);
}

#[test]
fn independent_mode_randomizes_one_layer_per_stage() {
    let fx = common::image();
    let plan = stage_plan(&fx.model, RandomizationMode::Independent);
    assert!(plan[0].is_empty());
    assert!(plan[1..].iter().all(|p| p.len() == 1));
    let cfg = CascadeConfig {
        mode: RandomizationMode::Independent,
        explainers: vec![ExplainerSpec::new(Method::Saliency, Variant::Local)],
        ..config(3, 1)
    };
    let r = cascade(&image_inputs(1), &cfg);
    assert_eq!(r.stages.last().unwrap().randomized, vec!["conv1".to_string()]);
}

#[test]
fn randomization_touches_only_the_named_layers() {
    let fx = common::image();
    let m = randomize_layers(&fx.model, &["fc2".into(), "fc1".into()], 4, 2, 0).unwrap();
    for p in fx.model.params() {
        let changed = m.param(&p.name).unwrap() != &p.tensor;
        assert_eq!(changed, p.name.starts_with("fc"), "{}", p.name);
    }
    assert_eq!(
        weights(&m),
        weights(&randomize_layers(&fx.model, &["fc2".into(), "fc1".into()], 4, 2, 0).unwrap())
    );
    assert_ne!(
        weights(&m),
        weights(&randomize_layers(&fx.model, &["fc2".into(), "fc1".into()], 4, 2, 1).unwrap())
    );
    assert!(matches!(
        randomize_layers(&fx.model, &["nope".into()], 4, 1, 0),
        Err(Error::UnknownLayer(_))
    ));
}

#[test]
fn text_cascade_compares_token_scores() {
    let fx = common::text();
    let inputs: Vec<Tensor> = fx.data.balanced_test(2).into_iter().map(|e| e.input.clone()).collect();
    let cfg = CascadeConfig {
        metrics: MetricSettings {
            sensitivity: None,
            ..small_metrics()
        },
        ..config(2, 1)
    };
    let r = cascading_randomization_test(&fx.model, &inputs, &cfg).unwrap();
    assert_eq!(r.stages.len(), fx.model.layer_names().len() + 1);
    assert_eq!(r.stages[1].layer, "classifier");
    let e = &r.stages[0].explainers[0];
    assert_eq!(
        e.similarity.keys().collect::<Vec<_>>(),
        ["cosine", "euclidean", "spearman"]
    );
    assert!(e.similarity["cosine"]
        .values
        .iter()
        .flatten()
        .all(|v| (v - 1.0).abs() < 1e-12));
    assert!(e.max_sensitivity.is_none());
}

#[test]
fn cascade_rejects_bad_configs() {
    let fx = common::image();
    let inputs = image_inputs(1);
    assert!(cascading_randomization_test(&fx.model, &inputs, &config(0, 0)).is_err());
    assert!(cascading_randomization_test(&fx.model, &[], &config(0, 1)).is_err());
    let none = CascadeConfig {
        explainers: vec![],
        ..config(0, 1)
    };
    assert!(cascading_randomization_test(&fx.model, &inputs, &none).is_err());
    let cell = Error::HarnessCell {
        stage: 3,
        trial: 1,
        input: 4,
        source: Box::new(Error::NonFinite("fc1".into())),
    };
    assert_eq!(
        cell.to_string(),
        "stage 3, trial 1, input 4: non-finite value produced at node `fc1`"
    );
}

#[test]
fn identity_relabeling_reproduces_the_honest_model() {
    let data = generate_synthetic_digits(3, 300, 40);
    let config = ModelConfig::image(10, 2);
    let inputs: Vec<Tensor> = data.test[..2].iter().map(|e| e.input.clone()).collect();
    let hyper = Hyper {
        epochs: 1,
        ..Hyper::default()
    };
    let cfg = DataRandomizationConfig {
        relabel: Relabel::Identity,
        metrics: MetricSettings {
            sensitivity: None,
            ..small_metrics()
        },
        ..DataRandomizationConfig::new(hyper, vec![ExplainerSpec::ig(Variant::Global).with_steps(8)], 1)
    };
    let out = data_randomization_test(&data, &config, &inputs, &cfg).unwrap();
    assert_eq!(weights(&out.honest.model), weights(&out.randomized.model));
    assert_eq!(out.report.labels_changed, 0.0);
    let e = &out.report.explainers[0];
    assert!(e.similarity["ssim"].iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert_eq!(e.infidelity_true, e.infidelity_random);
    assert_eq!(out.report.chance, 0.1);

    let uniform = relabeled(&data, Relabel::Uniform, 1);
    assert_eq!(uniform.test, data.test);
    assert_eq!(uniform, relabeled(&data, Relabel::Uniform, 1));
    let changed = uniform
        .train
        .iter()
        .zip(&data.train)
        .filter(|(a, b)| a.label != b.label)
        .count();
    assert!(changed as f64 > 0.8 * data.train.len() as f64);
}

#[test]
fn sweep_shares_weights_and_probes() {
    let fx = common::image();
    let inputs = image_inputs(2);
    let cfg = SweepConfig {
        ig_steps: 8,
        metrics: small_metrics(),
        slice_samples: 11,
        slice_dims: 3,
        ..SweepConfig::new(4)
    };
    let r = smoothness_sweep(&fx.model, &inputs, &cfg).unwrap();
    let names: Vec<&str> = r.variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(
        names,
        ["relu+maxpool", "relu+lsepool", "softplus+maxpool", "softplus+lsepool"]
    );
    let base = r.variant("relu+maxpool").unwrap();
    for v in &r.variants {
        for (a, b) in v.inputs.iter().zip(&base.inputs) {
            assert_eq!((a.target, &a.dims), (b.target, &b.dims));
            assert_eq!(a.slices.len(), 3);
            assert!(a.slices.iter().all(|s| s.values.len() == 11));
            assert_eq!(a.infidelity.len(), 4);
            assert!(a.infidelity.contains_key("ig/global:baseline_diff"));
            assert_eq!(a.max_sensitivity.len(), 2);
        }
    }
    assert!(smoothness_sweep(&common::text().model, &[], &cfg).is_err());
}
