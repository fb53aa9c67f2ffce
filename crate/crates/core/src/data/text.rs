//! Template-generated binary sentiment corpus, vocabulary and tokenizer.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, TaskKind};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, purpose, rng};
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
    max_len: usize,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_list(r.words, r.max_len)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            words: v.words,
            max_len: v.max_len,
        }
    }
}

impl Vocab {
    /// Id 0 is the pad token and id 1 the unknown token; the remaining words
    /// follow in sorted order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>, max_len: usize) -> Self {
        let uniq: BTreeSet<&str> = words.into_iter().filter(|w| *w != PAD && *w != UNK).collect();
        let words: Vec<String> = [PAD, UNK].into_iter().chain(uniq).map(str::to_string).collect();
        Self::from_list(words, max_len)
    }

    pub fn from_list(words: Vec<String>, max_len: usize) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index, max_len }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Lowercase whitespace tokenization, padded or truncated to `vocab.max_len`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Tensor {
    let mut ids: Vec<f64> = text
        .split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(vocab.unk_id()) as f64)
        .take(vocab.max_len)
        .collect();
    ids.resize(vocab.max_len, vocab.pad_id() as f64);
    Tensor::vector(ids)
}

const POSITIVE: &[&str] = &[
    "good",
    "great",
    "excellent",
    "wonderful",
    "fantastic",
    "brilliant",
    "enjoyable",
    "delightful",
    "superb",
    "charming",
    "beautiful",
    "gripping",
];
const NEGATIVE: &[&str] = &[
    "bad", "awful", "terrible", "boring", "dull", "horrible", "poor", "weak", "tedious", "painful", "bland", "clumsy",
];
const NOUNS: &[&str] = &[
    "movie",
    "film",
    "story",
    "plot",
    "acting",
    "cast",
    "script",
    "ending",
    "soundtrack",
];
const ADVERBS: &[&str] = &["really", "quite", "very", "truly", "rather", "so"];
const TEMPLATES: &[&str] = &[
    "the {n} was {a} {j}",
    "this {n} is {j} and {j}",
    "i found the {n} {a} {j}",
    "a {j} {n} with a {j} {n}",
    "overall a {a} {j} {n}",
    "the {n} and the {n} were {j}",
    "what a {j} {n}",
    "honestly the {n} felt {a} {j} to me",
];

fn fill(template: &str, lexicon: &[&str], r: &mut impl Rng) -> String {
    template
        .split(' ')
        .map(|slot| match slot {
            "{n}" => NOUNS.choose(r).expect("nonempty"),
            "{a}" => ADVERBS.choose(r).expect("nonempty"),
            "{j}" => lexicon.choose(r).expect("nonempty"),
            w => w,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates `size` sentences (label 1 = positive), balanced by construction,
/// and holds out a fifth of them as the test split.
pub fn generate_synthetic_text(seed: u64, size: usize) -> Dataset {
    let mut r = rng(derive_seed(seed, &[purpose::DATA]));
    let mut items: Vec<(String, usize)> = (0..size)
        .map(|i| {
            let label = i % 2;
            let lexicon = if label == 1 { POSITIVE } else { NEGATIVE };
            let t = TEMPLATES.choose(&mut r).expect("nonempty");
            (fill(t, lexicon, &mut r), label)
        })
        .collect();
    items.shuffle(&mut r);
    let vocab = Vocab::from_words(
        NOUNS
            .iter()
            .chain(ADVERBS)
            .chain(POSITIVE)
            .chain(NEGATIVE)
            .copied()
            .chain(
                TEMPLATES
                    .iter()
                    .flat_map(|t| t.split(' '))
                    .filter(|w| !w.starts_with('{')),
            ),
        DEFAULT_MAX_LEN,
    );
    let examples: Vec<Example> = items
        .iter()
        .map(|(s, label)| Example {
            input: tokenize(s, &vocab),
            label: *label,
        })
        .collect();
    let ds = Dataset {
        task: TaskKind::Text,
        num_classes: 2,
        train: examples,
        test: Vec::new(),
        vocab: Some(vocab),
    };
    let n_test = size / 5;
    ds.split_off_test(n_test)
}

/// Reads `sentence<TAB>label` lines; a first line of `sentence\tlabel` is
/// treated as a header. The vocabulary is built from the file.
pub fn load_tsv(path: &Path, max_len: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.trim() == "sentence\tlabel") {
            continue;
        }
        let (s, l) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::Format(format!("line {}: missing tab", i + 1)))?;
        let label: usize = l
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad label `{l}`", i + 1)))?;
        rows.push((s.to_lowercase(), label));
    }
    let num_classes = rows.iter().map(|r| r.1 + 1).max().unwrap_or(2).max(2);
    let vocab = Vocab::from_words(rows.iter().flat_map(|r| r.0.split_whitespace()), max_len);
    let train = rows
        .iter()
        .map(|(s, label)| Example {
            input: tokenize(s, &vocab),
            label: *label,
        })
        .collect();
    Ok(Dataset {
        task: TaskKind::Text,
        num_classes,
        train,
        test: Vec::new(),
        vocab: Some(vocab),
    })
}
