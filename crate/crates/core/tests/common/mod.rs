//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use saliency_audit::data::{generate_synthetic_digits, generate_synthetic_text, Dataset};
use saliency_audit::models::{train, Hyper, Model, ModelConfig};

pub struct Fixture {
    pub data: Dataset,
    pub model: Model,
    pub accuracy: f64,
}

fn fit(data: Dataset, config: ModelConfig, epochs: usize) -> Fixture {
    let trained = train(
        &config,
        &data,
        &Hyper {
            epochs,
            ..Hyper::default()
        },
    )
    .expect("training");
    Fixture {
        accuracy: trained.test_accuracy.expect("test split"),
        model: trained.model,
        data,
    }
}

/// Small CNN trained on synthetic digits, shared within a test binary.
pub fn image() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| fit(generate_synthetic_digits(1, 1000, 100), ModelConfig::image(10, 1), 3))
}

/// Small transformer trained on the synthetic sentiment corpus.
pub fn text() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let data = generate_synthetic_text(1, 600);
        let vocab = data.vocab.as_ref().expect("vocab").len();
        fit(data, ModelConfig::text(vocab, 2, 1), 3)
    })
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
