//! Datasets: MNIST IDX files, procedurally drawn digits, and a generated
//! binary-sentiment corpus with a whitespace tokenizer.

mod digits;
mod idx;
mod text;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use digits::{generate_synthetic_digits, render_digit};
pub use idx::{
    load_mnist_dir, load_mnist_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels,
    IMAGE_MAGIC, LABEL_MAGIC,
};
pub use text::{generate_synthetic_text, load_tsv, tokenize, Vocab, DEFAULT_MAX_LEN, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Image,
    Text,
}

/// One labelled input: a `[1, H, W]` pixel tensor or a `[max_len]` token-id
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab: Option<Vocab>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves the last `n_test` training examples into the test split.
    pub fn split_off_test(mut self, n_test: usize) -> Self {
        let at = self.train.len().saturating_sub(n_test);
        let mut moved = self.train.split_off(at);
        moved.append(&mut self.test);
        self.test = moved;
        self
    }

    /// Up to `n` test examples taken round-robin over the classes (first
    /// unused example of class 0, then class 1, ...), in test-split order
    /// within each class.
    pub fn balanced_test(&self, n: usize) -> Vec<&Example> {
        let mut by_class: Vec<std::collections::VecDeque<&Example>> = vec![Default::default(); self.num_classes];
        for ex in &self.test {
            if let Some(q) = by_class.get_mut(ex.label) {
                q.push_back(ex);
            }
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n && by_class.iter().any(|q| !q.is_empty()) {
            for q in &mut by_class {
                if out.len() == n {
                    break;
                }
                if let Some(ex) = q.pop_front() {
                    out.push(ex);
                }
            }
        }
        out
    }

    /// Checks labels, pixel range and token range.
    pub fn validate(&self) -> Result<()> {
        for ex in self.train.iter().chain(&self.test) {
            if ex.label >= self.num_classes {
                return Err(Error::Format(format!(
                    "label {} outside [0, {})",
                    ex.label, self.num_classes
                )));
            }
            match self.task {
                TaskKind::Image => {
                    if ex.input.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(Error::Format("pixel outside [0, 1]".into()));
                    }
                }
                TaskKind::Text => {
                    let v = self.vocab.as_ref().map_or(0, Vocab::len);
                    if ex
                        .input
                        .data()
                        .iter()
                        .any(|&id| id < 0.0 || id >= v as f64 || id.fract() != 0.0)
                    {
                        return Err(Error::Format("token id outside vocabulary".into()));
                    }
                }
            }
        }
        Ok(())
    }
}
