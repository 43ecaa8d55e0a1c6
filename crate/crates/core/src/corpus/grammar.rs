//! Synthetic speech-like data: a bigram word grammar over a small lexicon,
//! rendered symbol-by-symbol as fixed-frequency tones plus Gaussian noise.
//! Stands in for real speech at desk scale while keeping distinct roles for
//! the acoustic model (tone identity) and the language model (word order).

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Corpus, Split, SplitPlan, Utterance, SAMPLE_RATE};
use crate::error::{CoreError, Result};
use murmur_nn::rng::{derive_seed, derive_seed_n, rng_from, Rng};

pub const LETTERS: [char; 10] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j'];
pub const WORD_SEPARATOR: char = ' ';

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SymbolTemplate {
    pub freq_hz: f64,
    pub duration_ms: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrammarConfig {
    /// Seed fixing the lexicon and transition table (not per-corpus noise).
    pub grammar_seed: u64,
    pub lexicon_size: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    /// Per-row number of successor words with nonzero probability.
    pub branching: usize,
    /// Probability of ending the sentence after each word (except the first).
    pub eos_prob: f64,
    pub max_words: usize,
    pub symbol_ms: u32,
    pub noise_sigma: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            grammar_seed: 17,
            lexicon_size: 50,
            word_len_min: 2,
            word_len_max: 4,
            branching: 5,
            eos_prob: 0.35,
            max_words: 4,
            symbol_ms: 50,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGrammar {
    pub templates: BTreeMap<char, SymbolTemplate>,
    pub lexicon: Vec<String>,
    /// Row 0 is the sentence-start context, row i+1 the context "after
    /// lexicon word i". Columns are the lexicon words followed by an
    /// end-of-sentence column. Every row sums to 1.
    pub transitions: Vec<Vec<f64>>,
    pub max_words: usize,
    pub noise_sigma: f64,
}

impl SyntheticGrammar {
    pub fn new(cfg: &GrammarConfig) -> Result<Self> {
        if cfg.lexicon_size == 0 {
            return Err(CoreError::invalid("lexicon must not be empty"));
        }
        if cfg.word_len_min == 0 || cfg.word_len_max < cfg.word_len_min {
            return Err(CoreError::invalid("bad word length bounds"));
        }
        if !(0.0..1.0).contains(&cfg.eos_prob) || cfg.max_words == 0 {
            return Err(CoreError::invalid("bad sentence length parameters"));
        }

        let mut templates = BTreeMap::new();
        // Log-spaced tone frequencies keep symbols far apart on the mel axis.
        for (i, &ch) in LETTERS.iter().enumerate() {
            templates.insert(
                ch,
                SymbolTemplate {
                    freq_hz: 200.0 * 1.35_f64.powi(i as i32),
                    duration_ms: cfg.symbol_ms,
                },
            );
        }
        templates.insert(
            WORD_SEPARATOR,
            SymbolTemplate {
                freq_hz: 120.0,
                duration_ms: cfg.symbol_ms,
            },
        );

        let mut rng = rng_from(derive_seed(cfg.grammar_seed, "lexicon"));
        let mut lexicon = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        let mut guard = 0;
        while lexicon.len() < cfg.lexicon_size {
            guard += 1;
            if guard > 100_000 {
                return Err(CoreError::invalid(
                    "cannot build lexicon: too few distinct words for requested size",
                ));
            }
            let len = rng.gen_range(cfg.word_len_min..=cfg.word_len_max);
            let w: String = (0..len)
                .map(|_| LETTERS[rng.gen_range(0..LETTERS.len())])
                .collect();
            if seen.insert(w.clone()) {
                lexicon.push(w);
            }
        }

        let n = lexicon.len();
        let mut trng = rng_from(derive_seed(cfg.grammar_seed, "transitions"));
        let branching = cfg.branching.min(n).max(1);
        let mut transitions = Vec::with_capacity(n + 1);
        for row_idx in 0..=n {
            let mut successors = std::collections::BTreeSet::new();
            while successors.len() < branching {
                successors.insert(trng.gen_range(0..n));
            }
            let mut row = vec![0.0; n + 1];
            let mut weights: Vec<f64> = (0..branching).map(|_| trng.gen_range(0.2..1.0)).collect();
            let wsum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= wsum;
            }
            let eos = if row_idx == 0 { 0.0 } else { cfg.eos_prob };
            for (k, &succ) in successors.iter().enumerate() {
                row[succ] = weights[k] * (1.0 - eos);
            }
            row[n] = eos;
            transitions.push(row);
        }

        Ok(Self {
            templates,
            lexicon,
            transitions,
            max_words: cfg.max_words,
            noise_sigma: cfg.noise_sigma,
        })
    }

    pub fn samples_per_symbol(&self) -> usize {
        let ms = self.templates[&WORD_SEPARATOR].duration_ms as usize;
        ms * SAMPLE_RATE as usize / 1000
    }

    /// Draw one sentence from the bigram chain. The length cap stops the
    /// chain before the next draw, so every draw that happens is a fair
    /// sample from its transition row.
    pub fn sample_sentence(&self, rng: &mut Rng) -> String {
        let n = self.lexicon.len();
        let mut words: Vec<&str> = Vec::new();
        let mut ctx = 0usize; // start row
        while words.len() < self.max_words {
            let row = &self.transitions[ctx];
            let mut x: f64 = rng.gen();
            let mut choice = n; // eos by default
            for (j, &p) in row.iter().enumerate() {
                if x < p {
                    choice = j;
                    break;
                }
                x -= p;
            }
            if choice == n {
                break;
            }
            words.push(&self.lexicon[choice]);
            ctx = choice + 1;
        }
        if words.is_empty() {
            // unreachable in practice: the start row has zero eos mass
            words.push(&self.lexicon[0]);
        }
        words.join(" ")
    }

    /// Render a transcript symbol-by-symbol: each letter (and the word
    /// separator) becomes one fixed-frequency tone segment plus noise.
    pub fn render(&self, transcript: &str, rng: &mut Rng) -> Result<Vec<f32>> {
        let seg = self.samples_per_symbol();
        let mut out = Vec::with_capacity(transcript.chars().count() * seg);
        for ch in transcript.chars() {
            let tpl = self
                .templates
                .get(&ch)
                .ok_or(CoreError::OutOfDomainChar(ch))?;
            let nsamp = tpl.duration_ms as usize * SAMPLE_RATE as usize / 1000;
            let omega = 2.0 * std::f64::consts::PI * tpl.freq_hz / SAMPLE_RATE as f64;
            for t in 0..nsamp {
                let tone = 0.25 * (omega * t as f64).sin();
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * self.noise_sigma;
                out.push((tone + noise) as f32);
            }
        }
        Ok(out)
    }

    /// Text-only sentences (no audio) for language-model training.
    pub fn sample_text(&self, seed: u64, sentences: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(sentences);
        for i in 0..sentences {
            let mut rng = rng_from(derive_seed_n(seed, "lm-text", i as u64));
            out.push(self.sample_sentence(&mut rng));
        }
        out
    }
}

/// Generate a corpus: transcripts from the bigram grammar, waveforms from
/// the tone renderer, split membership from the plan. Unlabeled utterances
/// keep no transcript; the reference goes to `hidden_refs`.
pub fn synth_generate(
    grammar: &SyntheticGrammar,
    seed: u64,
    utterance_count: usize,
    plan: &SplitPlan,
) -> Result<Corpus> {
    plan.validate()?;
    if grammar.lexicon.is_empty() {
        return Err(CoreError::invalid("lexicon must not be empty"));
    }
    let [n_lab, n_unl, n_dev, n_test] = plan.counts(utterance_count);
    let mut corpus = Corpus::default();
    for i in 0..utterance_count {
        let mut rng = rng_from(derive_seed_n(seed, "utt", i as u64));
        let text = grammar.sample_sentence(&mut rng);
        let samples = grammar.render(&text, &mut rng)?;
        let split = if i < n_lab {
            Split::Labeled
        } else if i < n_lab + n_unl {
            Split::Unlabeled
        } else if i < n_lab + n_unl + n_dev {
            Split::Dev
        } else {
            debug_assert!(i < n_lab + n_unl + n_dev + n_test);
            Split::Test
        };
        let id = format!("u{:05}", i);
        let transcript = if split == Split::Unlabeled {
            corpus.hidden_refs.insert(id.clone(), text);
            None
        } else {
            Some(text)
        };
        corpus.utterances.push(Utterance {
            id,
            samples,
            transcript,
            split,
            origin: None,
        });
    }
    Ok(corpus)
}
