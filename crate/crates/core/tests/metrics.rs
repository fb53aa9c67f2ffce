//! Infidelity and max-sensitivity against direct recomputation.

mod common;

use proptest::prelude::*;

use saliency_audit::explain::{
    explain, Attributable, AttributionRequest, ExplainerSpec, GraphFunction, Method, Variant,
};
use saliency_audit::graph::GraphBuilder;
use saliency_audit::metrics::{infidelity, max_sensitivity, Perturbation, PerturbationSpec, SensitivitySpec};
use saliency_audit::models::{Activation, Pooling};
use saliency_audit::Tensor;

fn linear(w: &[f64]) -> GraphFunction {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[w.len()]).unwrap();
    let c = b.constant(Tensor::vector(w.to_vec()));
    let p = b.mul(x, c).unwrap();
    let y = b.sum(p, None).unwrap();
    let y = b.reshape(y, &[1]).unwrap();
    b.output("y", y);
    GraphFunction::new(b.build(), "y").unwrap()
}

fn v(x: &[f64]) -> Tensor {
    Tensor::vector(x.to_vec())
}

#[test]
fn gradient_times_perturbation_is_exact_for_linear_functions() {
    let w = [1.5, -0.5, 2.0, 0.0];
    let f = linear(&w);
    let (x, x0) = (v(&[0.3, 0.1, -0.7, 2.0]), v(&[0.0; 4]));
    let phi = v(&w);
    for kind in [
        Perturbation::Gaussian { sigma: 0.5 },
        Perturbation::LinfUniform { radius: 1.0 },
    ] {
        let r = infidelity(&f, &phi, Variant::Local, &x, &x0, 0, &PerturbationSpec::new(kind, 4)).unwrap();
        assert_eq!(r.errors.len(), 20);
        assert!(r.score < 1e-24, "{kind:?}: {}", r.score);
    }
    // A wrong attribution is penalised.
    let wrong = infidelity(
        &f,
        &v(&[0.0; 4]),
        Variant::Local,
        &x,
        &x0,
        0,
        &PerturbationSpec::new(Perturbation::default(), 4),
    )
    .unwrap();
    assert!(wrong.score > 0.0);
}

#[test]
fn baseline_diff_is_the_squared_completeness_gap() {
    let fx = common::image();
    let x0 = fx.model.default_baseline();
    for ex in fx.data.test.iter().take(5) {
        let x = &ex.input;
        let target = fx.model.predict(x).unwrap().argmax();
        let ig = |variant| {
            let spec = ExplainerSpec::ig(variant).with_steps(32);
            explain(
                &fx.model,
                &AttributionRequest::new(spec, x.clone(), x0.clone(), target, 0),
            )
            .unwrap()
            .values
        };
        let (global, local) = (ig(Variant::Global), ig(Variant::Local));
        let gap = global.sum() - (fx.model.output(x, target).unwrap() - fx.model.output(&x0, target).unwrap());
        let spec = PerturbationSpec::new(Perturbation::BaselineDiff, 0);
        let r = infidelity(&fx.model, &global, Variant::Global, x, &x0, target, &spec).unwrap();
        assert_eq!(r.errors.len(), 1);
        assert!((r.score - gap * gap).abs() < 1e-12, "{} vs {}", r.score, gap * gap);
        // The same identity from the local attribution and the raw perturbation.
        let l = infidelity(&fx.model, &local, Variant::Local, x, &x0, target, &spec).unwrap();
        assert!((l.score - gap * gap).abs() < 1e-12);
    }
}

#[test]
fn logged_samples_reproduce_the_score() {
    let fx = common::image();
    let x = &fx.data.test[5].input;
    let x0 = fx.model.default_baseline();
    let target = fx.model.predict(x).unwrap().argmax();
    let phi = explain(
        &fx.model,
        &AttributionRequest::new(ExplainerSpec::ig(Variant::Global), x.clone(), x0.clone(), target, 0),
    )
    .unwrap()
    .values;
    let spec = PerturbationSpec::new(Perturbation::Gaussian { sigma: 0.03 }, 17);
    let r = infidelity(&fx.model, &phi, Variant::Global, x, &x0, target, &spec).unwrap();
    assert_eq!(r.perturbations, spec.draw(x, &x0).unwrap());
    assert_eq!(r.errors.len(), 20);
    let fx0 = fx.model.output(x, target).unwrap();
    let mut errors = Vec::new();
    for i in &r.perturbations {
        let mut dot = 0.0;
        for k in 0..x.len() {
            let d = x.data()[k] - x0.data()[k];
            if d != 0.0 {
                dot += i.data()[k] / d * phi.data()[k];
            }
        }
        let e = dot - (fx0 - fx.model.output(&x.sub(i).unwrap(), target).unwrap());
        errors.push(e * e);
    }
    assert_eq!(r.errors, errors);
    assert_eq!(r.score, errors.iter().sum::<f64>() / errors.len() as f64);
    assert_eq!(
        r,
        infidelity(&fx.model, &phi, Variant::Global, x, &x0, target, &spec).unwrap()
    );
}

#[test]
fn more_samples_change_the_estimate_modestly() {
    let fx = common::image();
    let x0 = fx.model.default_baseline();
    let mut worst: f64 = 0.0;
    for ex in fx.data.test.iter().take(5) {
        let target = fx.model.predict(&ex.input).unwrap().argmax();
        let phi = explain(
            &fx.model,
            &AttributionRequest::new(
                ExplainerSpec::ig(Variant::Local).with_steps(16),
                ex.input.clone(),
                x0.clone(),
                target,
                0,
            ),
        )
        .unwrap()
        .values;
        let score = |n| {
            let spec = PerturbationSpec {
                n_samples: n,
                ..PerturbationSpec::new(Perturbation::default(), 9)
            };
            infidelity(&fx.model, &phi, Variant::Local, &ex.input, &x0, target, &spec)
                .unwrap()
                .score
        };
        let (a, b) = (score(200), score(400));
        worst = worst.max((a - b).abs() / a);
    }
    assert!(worst < 0.3, "{worst}");
}

#[test]
fn finer_ig_paths_close_the_completeness_gap() {
    let fx = common::image();
    let smooth = fx
        .model
        .with_variant(Activation::Softplus { beta: 10.0 }, Pooling::Lse { temperature: 10.0 })
        .unwrap();
    let x0 = smooth.default_baseline();
    for ex in fx.data.test.iter().take(3) {
        let target = smooth.predict(&ex.input).unwrap().argmax();
        let gap = |steps| {
            let spec = ExplainerSpec::ig(Variant::Global).with_steps(steps);
            let phi = explain(
                &smooth,
                &AttributionRequest::new(spec, ex.input.clone(), x0.clone(), target, 0),
            )
            .unwrap()
            .values;
            infidelity(
                &smooth,
                &phi,
                Variant::Global,
                &ex.input,
                &x0,
                target,
                &PerturbationSpec::new(Perturbation::BaselineDiff, 0),
            )
            .unwrap()
            .score
        };
        let (coarse, fine) = (gap(16), gap(512));
        assert!(fine <= coarse, "512 steps {fine} vs 16 steps {coarse}");
    }
}

#[test]
fn sensitivity_of_constant_explanations_is_zero() {
    let f = linear(&[1.0, -2.0, 3.0]);
    let req = AttributionRequest::new(
        ExplainerSpec::new(Method::Saliency, Variant::Local),
        v(&[0.5, 0.5, 0.5]),
        v(&[0.0; 3]),
        0,
        0,
    );
    let s = max_sensitivity(&f, &req, None, &SensitivitySpec::new(1)).unwrap();
    assert_eq!(s.score, 0.0);
    assert_eq!(s.changes.len(), 5);
}

#[test]
fn sensitivity_of_input_times_gradient_is_bounded_by_the_radius() {
    // phi(x) = w (x) x moves by w (x) delta, so each change is ||w (x) delta||.
    let w = [1.0, -2.0, 3.0];
    let f = linear(&w);
    let req = AttributionRequest::new(
        ExplainerSpec::new(Method::Saliency, Variant::Global),
        v(&[0.5, 0.5, 0.5]),
        v(&[0.0; 3]),
        0,
        0,
    );
    let spec = SensitivitySpec {
        radius: 0.1,
        ..SensitivitySpec::new(2)
    };
    let s = max_sensitivity(&f, &req, None, &spec).unwrap();
    for (d, c) in s.deltas.iter().zip(&s.changes) {
        let direct = d
            .data()
            .iter()
            .zip(&w)
            .map(|(a, b)| (a * b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((direct - c).abs() < 1e-12);
        assert!(d.data().iter().all(|e| e.abs() <= 0.1));
    }
    let bound = 0.1 * w.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(s.score > 0.0 && s.score <= bound);
    let normalized = max_sensitivity(
        &f,
        &req,
        None,
        &SensitivitySpec {
            normalize: true,
            ..spec
        },
    )
    .unwrap();
    let norm = (0.25f64 * 14.0).sqrt();
    assert!((normalized.score - s.score / norm).abs() < 1e-12);
}

#[test]
fn invalid_metric_settings_are_rejected() {
    let f = linear(&[1.0]);
    let (x, x0) = (v(&[1.0]), v(&[0.0]));
    let bad = PerturbationSpec::new(Perturbation::Gaussian { sigma: 0.0 }, 0);
    assert!(infidelity(&f, &v(&[1.0]), Variant::Local, &x, &x0, 0, &bad).is_err());
    let none = PerturbationSpec {
        n_samples: 0,
        ..PerturbationSpec::new(Perturbation::default(), 0)
    };
    assert!(infidelity(&f, &v(&[1.0]), Variant::Local, &x, &x0, 0, &none).is_err());
    assert!(infidelity(
        &f,
        &v(&[1.0, 2.0]),
        Variant::Local,
        &x,
        &x0,
        0,
        &PerturbationSpec::new(Perturbation::default(), 0)
    )
    .is_err());
    let req = AttributionRequest::new(ExplainerSpec::new(Method::Saliency, Variant::Local), x, x0, 0, 0);
    assert!(max_sensitivity(
        &f,
        &req,
        None,
        &SensitivitySpec {
            radius: -1.0,
            ..SensitivitySpec::new(0)
        }
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_nonnegative_and_reproducible(idx in 0usize..100, seed in any::<u64>(), variant in prop::bool::ANY) {
        let fx = common::image();
        let x = &fx.data.test[idx].input;
        let x0 = fx.model.default_baseline();
        let variant = if variant { Variant::Global } else { Variant::Local };
        let req = AttributionRequest::new(ExplainerSpec::new(Method::Saliency, variant), x.clone(), x0.clone(), idx % 10, 0);
        let phi = explain(&fx.model, &req).unwrap().values;
        let spec = PerturbationSpec { n_samples: 4, ..PerturbationSpec::new(Perturbation::default(), seed) };
        let a = infidelity(&fx.model, &phi, variant, x, &x0, idx % 10, &spec).unwrap();
        prop_assert!(a.score >= 0.0 && a.errors.iter().all(|e| *e >= 0.0));
        prop_assert_eq!(&a, &infidelity(&fx.model, &phi, variant, x, &x0, idx % 10, &spec).unwrap());
        let sens = SensitivitySpec { n_samples: 2, ..SensitivitySpec::new(seed) };
        let s = max_sensitivity(&fx.model, &req, Some(&phi), &sens).unwrap();
        prop_assert!(s.score >= 0.0);
        prop_assert_eq!(s.score, s.changes.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
}
