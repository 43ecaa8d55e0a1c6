//! First-pass CTC prefix beam search with LM shallow fusion and word
//! insertion penalty, n-best pruning, second-pass rescoring, and random
//! search over the fusion weights.
//!
//! The search tracks blank/non-blank probabilities per prefix (so prefix
//! probabilities are exact when nothing is pruned) and applies the LM plus
//! the insertion penalty whenever a word boundary (separator or utterance
//! end) completes a non-empty word. All maps are ordered, which fixes the
//! log-sum-exp accumulation order and keeps runs bit-reproducible.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::Vocabulary;
use crate::ctc::validate_emissions;
use crate::error::{CoreError, Result};
use crate::eval;
use crate::lm::{Lm, LmState};
use murmur_nn::rng::{derive_seed_n, rng_from};
use murmur_nn::Tensor;

const NEG_INF: f64 = f64::NEG_INFINITY;

fn lse2(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FusionConfig {
    /// LM weight.
    pub alpha: f64,
    /// Word insertion penalty, added once per completed word.
    pub beta: f64,
    pub beam: usize,
    pub nbest: usize,
}

impl FusionConfig {
    pub fn acoustic_only(beam: usize, nbest: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            beam,
            nbest,
        }
    }

    /// Unpruned search; exact prefix probabilities (small inputs only).
    pub const EXHAUSTIVE: usize = usize::MAX;

    pub fn validate(&self) -> Result<()> {
        if self.nbest == 0 || self.beam < self.nbest {
            return Err(CoreError::invalid(format!(
                "need beam >= nbest >= 1, got beam {} nbest {}",
                self.beam, self.nbest
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Hypothesis {
    #[serde(skip)]
    pub tokens: Vec<u32>,
    pub text: String,
    #[serde(rename = "am")]
    pub acoustic: f64,
    pub lm: f64,
    pub words: usize,
    pub score: f64,
}

impl Hypothesis {
    /// The decomposition invariant: score = am + alpha*lm + beta*words.
    pub fn recompute_score(&self, alpha: f64, beta: f64) -> f64 {
        self.acoustic + alpha * self.lm + beta * self.words as f64
    }
}

#[derive(Debug, Clone)]
struct Entry {
    lp_blank: f64,
    lp_label: f64,
    lm_total: f64,
    words: usize,
    lm_state: LmState,
    /// chars of the current partial word (token ids since the last separator)
    partial: Vec<u32>,
}

impl Entry {
    fn fresh(lm: Option<&Lm>) -> Self {
        Self {
            lp_blank: 0.0,
            lp_label: NEG_INF,
            lm_total: 0.0,
            words: 0,
            lm_state: lm.map(|l| l.start()).unwrap_or_default(),
            partial: Vec::new(),
        }
    }

    fn total(&self) -> f64 {
        lse2(self.lp_blank, self.lp_label)
    }

    fn rank_score(&self, cfg: &FusionConfig) -> f64 {
        self.total() + cfg.alpha * self.lm_total + cfg.beta * self.words as f64
    }
}

fn complete_word(
    entry: &Entry,
    vocab: &Vocabulary,
    lm: Option<&Lm>,
) -> (f64, usize, LmState) {
    if entry.partial.is_empty() {
        return (entry.lm_total, entry.words, entry.lm_state.clone());
    }
    let word: String = entry
        .partial
        .iter()
        .map(|&t| vocab.token(t))
        .collect::<Vec<_>>()
        .join("");
    match lm {
        Some(lm) => {
            let (state, lp) = lm.advance(&entry.lm_state, &word);
            (entry.lm_total + lp, entry.words + 1, state)
        }
        None => (entry.lm_total, entry.words + 1, entry.lm_state.clone()),
    }
}

/// CTC prefix beam search with shallow fusion. Emissions are
/// `[T, letters + 1]` log-probabilities with the blank in the last column.
/// Returns up to `nbest` hypotheses sorted by combined score (ties broken
/// by token sequence).
pub fn fused_beam_search(
    emissions: &Tensor,
    vocab: &Vocabulary,
    lm: Option<&Lm>,
    cfg: &FusionConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    validate_emissions(emissions)?;
    let (t_len, v) = emissions.dims2().map_err(CoreError::Nn)?;
    if v != vocab.len() + 1 {
        return Err(CoreError::invalid(format!(
            "emissions have {} symbols but vocabulary needs {} letters + blank",
            v,
            vocab.len()
        )));
    }
    let blank = v - 1;
    let sep = vocab.separator_id();

    let mut beam: BTreeMap<Vec<u32>, Entry> = BTreeMap::new();
    beam.insert(Vec::new(), Entry::fresh(lm));

    for t in 0..t_len {
        let row = emissions.row(t);
        let mut next: BTreeMap<Vec<u32>, Entry> = BTreeMap::new();
        for (prefix, entry) in &beam {
            let total = entry.total();
            // blank keeps the prefix and ends in blank
            {
                let slot = next
                    .entry(prefix.clone())
                    .or_insert_with(|| Entry {
                        lp_blank: NEG_INF,
                        lp_label: NEG_INF,
                        ..entry.clone()
                    });
                slot.lp_blank = lse2(slot.lp_blank, total + row[blank]);
            }
            for c in 0..blank as u32 {
                let e_c = row[c as usize];
                if prefix.last() == Some(&c) {
                    // repeated label without blank: merges into same prefix
                    {
                        let slot = next
                            .entry(prefix.clone())
                            .or_insert_with(|| Entry {
                                lp_blank: NEG_INF,
                                lp_label: NEG_INF,
                                ..entry.clone()
                            });
                        slot.lp_label = lse2(slot.lp_label, entry.lp_label + e_c);
                    }
                    // after a blank, the same label starts a new occurrence
                    if entry.lp_blank != NEG_INF {
                        extend(
                            &mut next,
                            prefix,
                            c,
                            entry,
                            entry.lp_blank + e_c,
                            vocab,
                            lm,
                            sep,
                        );
                    }
                } else {
                    extend(&mut next, prefix, c, entry, total + e_c, vocab, lm, sep);
                }
            }
        }

        // prune to the beam
        if cfg.beam != FusionConfig::EXHAUSTIVE && next.len() > cfg.beam {
            let mut ranked: Vec<(Vec<u32>, Entry)> = next.into_iter().collect();
            ranked.sort_by(|a, b| {
                b.1.rank_score(cfg)
                    .partial_cmp(&a.1.rank_score(cfg))
                    .unwrap()
                    .then_with(|| a.0.cmp(&b.0))
            });
            ranked.truncate(cfg.beam);
            next = ranked.into_iter().collect();
        }
        beam = next;
    }

    // finalize: complete the trailing word, compute combined scores
    let mut out: Vec<Hypothesis> = beam
        .into_iter()
        .map(|(tokens, entry)| {
            let (lm_total, words, _) = complete_word(&entry, vocab, lm);
            let acoustic = entry.total();
            let text = vocab.decode(&tokens).expect("tokens from vocab");
            Hypothesis {
                tokens,
                text,
                acoustic,
                lm: lm_total,
                words,
                score: acoustic + cfg.alpha * lm_total + cfg.beta * words as f64,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    out.truncate(cfg.nbest);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn extend(
    next: &mut BTreeMap<Vec<u32>, Entry>,
    prefix: &[u32],
    c: u32,
    entry: &Entry,
    lp: f64,
    vocab: &Vocabulary,
    lm: Option<&Lm>,
    sep: Option<u32>,
) {
    let mut new_prefix = Vec::with_capacity(prefix.len() + 1);
    new_prefix.extend_from_slice(prefix);
    new_prefix.push(c);
    let slot = next.entry(new_prefix).or_insert_with(|| {
        if sep == Some(c) {
            let (lm_total, words, lm_state) = complete_word(entry, vocab, lm);
            Entry {
                lp_blank: NEG_INF,
                lp_label: NEG_INF,
                lm_total,
                words,
                lm_state,
                partial: Vec::new(),
            }
        } else {
            let mut partial = entry.partial.clone();
            partial.push(c);
            Entry {
                lp_blank: NEG_INF,
                lp_label: NEG_INF,
                lm_total: entry.lm_total,
                words: entry.words,
                lm_state: entry.lm_state.clone(),
                partial,
            }
        }
    });
    slot.lp_label = lse2(slot.lp_label, lp);
}

/// Keep the k highest-scoring entries; ties break by token sequence.
pub fn nbest_prune(mut hyps: Vec<Hypothesis>, k: usize) -> Vec<Hypothesis> {
    hyps.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    hyps.truncate(k.max(1));
    hyps
}

/// Second-pass rescoring: combined = acoustic + alpha2 * strong-LM whole
/// sentence log-probability + beta2 * word count. The `lm` field is
/// replaced by the strong-LM score; callers keep the first-pass list for
/// provenance.
pub fn rescore(
    hyps: &[Hypothesis],
    strong_lm: &Lm,
    alpha2: f64,
    beta2: f64,
) -> Vec<Hypothesis> {
    let mut out: Vec<Hypothesis> = hyps
        .iter()
        .map(|h| {
            let lm = strong_lm.sentence_logprob(&h.text);
            Hypothesis {
                tokens: h.tokens.clone(),
                text: h.text.clone(),
                acoustic: h.acoustic,
                lm,
                words: h.words,
                score: h.acoustic + alpha2 * lm + beta2 * h.words as f64,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    out
}

/// One n-best JSON line: `{"id", "hyps":[{"text","am","lm","words","score"}]}`.
pub fn nbest_json_line(id: &str, hyps: &[Hypothesis]) -> Result<String> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        hyps: &'a [Hypothesis],
    }
    Ok(serde_json::to_string(&Line { id, hyps })?)
}

#[derive(Debug, Clone, Deserialize)]
pub struct NBestLine {
    pub id: String,
    pub hyps: Vec<NBestHyp>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NBestHyp {
    pub text: String,
    pub am: f64,
    pub lm: f64,
    pub words: usize,
    pub score: f64,
}

pub fn parse_nbest_line(line: &str) -> Result<NBestLine> {
    let parsed: NBestLine =
        serde_json::from_str(line).map_err(|e| CoreError::parse("nbest", e.to_string()))?;
    if parsed.id.is_empty() {
        return Err(CoreError::parse("nbest", "empty utterance id"));
    }
    for h in &parsed.hyps {
        if h.am.is_nan() || h.score.is_nan() {
            return Err(CoreError::parse("nbest", "NaN score"));
        }
    }
    Ok(parsed)
}

// ---------------------------------------------------------------------------
// Random-search tuning of fusion weights.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneConfig {
    pub trials: usize,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    /// Also sample rescoring weights (alpha2, beta2) per trial.
    pub tune_rescoring: bool,
    pub beam: usize,
    pub nbest: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            trials: 128,
            alpha_range: (0.0, 5.0),
            beta_range: (-5.0, 5.0),
            tune_rescoring: false,
            beam: 50,
            nbest: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub alpha: f64,
    pub beta: f64,
    pub alpha2: Option<f64>,
    pub beta2: Option<f64>,
    pub dev_wer: f64,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub best: TrialResult,
    pub table: Vec<TrialResult>,
}

impl TuneOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,alpha,beta,alpha2,beta2,dev_wer\n");
        for r in &self.table {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{},{:.6}\n",
                r.trial,
                r.alpha,
                r.beta,
                r.alpha2.map(|v| format!("{:.6}", v)).unwrap_or_default(),
                r.beta2.map(|v| format!("{:.6}", v)).unwrap_or_default(),
                r.dev_wer
            ));
        }
        out
    }
}

/// The tuner's parameter draw for one trial: independent uniforms over the
/// configured ranges (alpha2/beta2 draws reuse the same ranges).
pub fn sample_trial_params(cfg: &TuneConfig, trial: usize) -> (f64, f64, f64, f64) {
    let mut rng = rng_from(derive_seed_n(cfg.seed, "trial", trial as u64));
    let alpha = rng.gen_range(cfg.alpha_range.0..cfg.alpha_range.1);
    let beta = rng.gen_range(cfg.beta_range.0..cfg.beta_range.1);
    let alpha2 = rng.gen_range(cfg.alpha_range.0..cfg.alpha_range.1);
    let beta2 = rng.gen_range(cfg.beta_range.0..cfg.beta_range.1);
    (alpha, beta, alpha2, beta2)
}

/// A dev utterance prepared for the tuner: emissions are decoded afresh per
/// trial, but computed only once.
pub struct TunerInput {
    pub id: String,
    pub emissions: Tensor,
    pub reference: String,
}

/// Uniform random search over fusion (and optionally rescoring) weights,
/// minimizing dev WER. Deterministic given the seed; ties keep the earliest
/// trial.
pub fn tune_random_search(
    inputs: &[TunerInput],
    vocab: &Vocabulary,
    lm: &Lm,
    rescore_lm: Option<&Lm>,
    cfg: &TuneConfig,
) -> Result<TuneOutcome> {
    if inputs.is_empty() {
        return Err(CoreError::invalid("tuner needs a non-empty dev set"));
    }
    if cfg.trials == 0 {
        return Err(CoreError::invalid("tuner needs at least one trial"));
    }
    use rayon::prelude::*;
    let mut table = Vec::with_capacity(cfg.trials);
    let mut best: Option<TrialResult> = None;
    for trial in 0..cfg.trials {
        let (alpha, beta, alpha2, beta2) = sample_trial_params(cfg, trial);
        let fusion = FusionConfig {
            alpha,
            beta,
            beam: cfg.beam,
            nbest: cfg.nbest,
        };
        let hyps: Vec<(String, String)> = inputs
            .par_iter()
            .map(|input| {
                let nbest = fused_beam_search(&input.emissions, vocab, Some(lm), &fusion)?;
                let top = match (rescore_lm, cfg.tune_rescoring) {
                    (Some(slm), true) => {
                        let rescored = rescore(&nbest, slm, alpha2, beta2);
                        rescored
                            .first()
                            .map(|h| h.text.clone())
                            .unwrap_or_default()
                    }
                    _ => nbest.first().map(|h| h.text.clone()).unwrap_or_default(),
                };
                Ok((input.reference.clone(), top))
            })
            .collect::<Result<_>>()?;
        let wer = eval::corpus_wer(hyps.iter().map(|(r, h)| (r.as_str(), h.as_str())))?.wer();
        let result = TrialResult {
            trial,
            alpha,
            beta,
            alpha2: cfg.tune_rescoring.then_some(alpha2),
            beta2: cfg.tune_rescoring.then_some(beta2),
            dev_wer: wer,
        };
        table.push(result);
        if best.map_or(true, |b| wer < b.dev_wer) {
            best = Some(result);
        }
    }
    Ok(TuneOutcome {
        best: best.expect("at least one trial"),
        table,
    })
}
