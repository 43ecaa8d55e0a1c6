//! Corpus handling: synthetic speech-like data, audio I/O, features,
//! tokenization, and split management.

pub mod features;
pub mod grammar;
pub mod manifest;
pub mod vocab;
pub mod wav;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use murmur_nn::rng::rng_from;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Gold,
    Pseudo,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f32>,
    pub transcript: Option<String>,
    pub split: Split,
    pub origin: Option<Origin>,
}

/// A set of utterances plus, for synthetic data, the reference transcripts
/// of the unlabeled split. Hidden references never appear in manifests;
/// they exist only so pseudo-label quality can be reported.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub hidden_refs: BTreeMap<String, String>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn transcripts(&self, split: Split) -> Vec<&str> {
        self.split(split)
            .filter_map(|u| u.transcript.as_deref())
            .collect()
    }
}

/// Fractions per split for corpus generation; must sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitPlan {
    pub labeled: f64,
    pub unlabeled: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let sum = self.labeled + self.unlabeled + self.dev + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::invalid(format!(
                "split plan fractions sum to {}, expected 1",
                sum
            )));
        }
        if [self.labeled, self.unlabeled, self.dev, self.test]
            .iter()
            .any(|&f| f < 0.0)
        {
            return Err(CoreError::invalid("split plan fractions must be >= 0"));
        }
        Ok(())
    }

    /// Integer counts by largest remainder so they sum to `total` exactly.
    pub fn counts(&self, total: usize) -> [usize; 4] {
        let fracs = [self.labeled, self.unlabeled, self.dev, self.test];
        let exact: Vec<f64> = fracs.iter().map(|f| f * total as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
        let mut rest: usize = total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .partial_cmp(&(exact[a] - exact[a].floor()))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &i in &order {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        [counts[0], counts[1], counts[2], counts[3]]
    }
}

/// Re-split an existing fully transcribed corpus into
/// labeled / unlabeled / dev / test with `|unlabeled| = round(ratio * |labeled|)`.
/// Unlabeled transcripts move to `hidden_refs`.
pub fn split_corpus(
    corpus: &Corpus,
    labeled_size: usize,
    ratio: f64,
    dev_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<Corpus> {
    if labeled_size == 0 {
        return Err(CoreError::invalid("labeled size must be >= 1"));
    }
    if ratio < 0.0 {
        return Err(CoreError::invalid("ratio must be >= 0"));
    }
    let unlabeled_size = (ratio * labeled_size as f64).round() as usize;
    let required = labeled_size + unlabeled_size + dev_size + test_size;
    if corpus.utterances.len() < required {
        return Err(CoreError::InsufficientData {
            required,
            got: corpus.utterances.len(),
        });
    }
    let mut order: Vec<usize> = (0..corpus.utterances.len()).collect();
    let mut rng = rng_from(murmur_nn::rng::derive_seed(seed, "split"));
    order.shuffle(&mut rng);

    let mut out = Corpus::default();
    for (pos, &idx) in order.iter().enumerate() {
        let mut u = corpus.utterances[idx].clone();
        let split = if pos < labeled_size {
            Split::Labeled
        } else if pos < labeled_size + unlabeled_size {
            Split::Unlabeled
        } else if pos < labeled_size + unlabeled_size + dev_size {
            Split::Dev
        } else if pos < required {
            Split::Test
        } else {
            continue;
        };
        u.split = split;
        if split == Split::Unlabeled {
            if let Some(text) = u.transcript.take() {
                out.hidden_refs.insert(u.id.clone(), text);
            }
        }
        out.utterances.push(u);
    }
    out.utterances.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
