//! Count-based n-gram language model.
//!
//! Word conditionals are distributions over W = vocabulary ∪ {<unk>}; the
//! end of sentence is a separate stop event with its own add-k estimate.
//! This matches the usual add-k arithmetic where p(w|ctx) =
//! (c+k)/(N+k|W|) with N counting word continuations only, and keeps
//! sum over W of p(w|ctx) = 1 exactly for every context.
//!
//! Stupid backoff scores are normalized per context (the per-context
//! normalizers are precomputed at training time, so scoring stays
//! read-only and thread-safe). An unseen context therefore scores exactly
//! like its shortened context.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Smoothing {
    AddK { k: f64 },
    StupidBackoff { alpha: f64 },
}

impl Smoothing {
    pub fn validate(&self) -> Result<()> {
        match self {
            Smoothing::AddK { k } if *k < 0.0 => {
                Err(CoreError::invalid("add-k smoothing needs k >= 0"))
            }
            Smoothing::StupidBackoff { alpha } if !(0.0..=1.0).contains(alpha) => {
                Err(CoreError::invalid("backoff factor must be in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Word id within W; the last two ids are reserved for <unk> and <s>.
pub type WordId = u32;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    words: BTreeMap<WordId, u64>,
    word_total: u64,
    eos: u64,
    /// Stupid-backoff normalizer: sum over W of the unnormalized scores.
    backoff_norm: f64,
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    words: Vec<String>,
    index: BTreeMap<String, WordId>,
    smoothing: Smoothing,
    /// counts[o] maps a length-o context (most recent word last) to counts.
    counts: Vec<BTreeMap<Vec<WordId>, ContextCounts>>,
    unigram_backoff: Vec<f64>,
}

impl NGramModel {
    pub fn unk_id(&self) -> WordId {
        self.words.len() as WordId
    }

    pub fn bos_id(&self) -> WordId {
        self.words.len() as WordId + 1
    }

    /// |W| = vocabulary + unknown.
    pub fn support_size(&self) -> usize {
        self.words.len() + 1
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    pub fn vocab(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, word: &str) -> WordId {
        self.index.get(word).copied().unwrap_or(self.unk_id())
    }

    pub fn word_str(&self, id: WordId) -> &str {
        if id == self.unk_id() {
            UNK
        } else {
            &self.words[id as usize]
        }
    }

    /// Train from whitespace-tokenized sentences with boundary symbols.
    pub fn train(sentences: &[&str], order: usize, smoothing: Smoothing) -> Result<Self> {
        if order == 0 {
            return Err(CoreError::invalid("n-gram order must be >= 1"));
        }
        smoothing.validate()?;
        let tokenized: Vec<Vec<&str>> = sentences
            .iter()
            .map(|s| s.split_whitespace().collect())
            .filter(|v: &Vec<&str>| !v.is_empty())
            .collect();
        if tokenized.is_empty() {
            return Err(CoreError::invalid("empty corpus"));
        }
        let mut words: Vec<String> = tokenized
            .iter()
            .flatten()
            .map(|w| w.to_string())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        words.sort_unstable();
        let index: BTreeMap<String, WordId> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as WordId))
            .collect();

        let mut model = Self {
            order,
            words,
            index,
            smoothing,
            counts: vec![BTreeMap::new(); order],
            unigram_backoff: Vec::new(),
        };

        let bos = model.bos_id();
        for sent in &tokenized {
            let ids: Vec<WordId> = sent.iter().map(|w| model.index[&w.to_string()]).collect();
            for i in 0..=ids.len() {
                for o in 0..order {
                    let mut ctx = Vec::with_capacity(o);
                    for back in (1..=o).rev() {
                        if i >= back {
                            ctx.push(ids[i - back]);
                        } else {
                            ctx.insert(0, bos);
                        }
                    }
                    debug_assert_eq!(ctx.len(), o);
                    let slot = model.counts[o].entry(ctx).or_default();
                    if i < ids.len() {
                        *slot.words.entry(ids[i]).or_insert(0) += 1;
                        slot.word_total += 1;
                    } else {
                        slot.eos += 1;
                    }
                }
            }
        }
        model.precompute_backoff();
        Ok(model)
    }

    fn precompute_backoff(&mut self) {
        let w_size = self.support_size() as f64;
        // add-1 unigram base distribution over W
        let empty: Vec<WordId> = Vec::new();
        let base = &self.counts[0][&empty];
        let n = base.word_total as f64;
        self.unigram_backoff = (0..self.support_size())
            .map(|w| {
                let c = base.words.get(&(w as WordId)).copied().unwrap_or(0) as f64;
                (c + 1.0) / (n + w_size)
            })
            .collect();

        let Smoothing::StupidBackoff { alpha } = self.smoothing else {
            return;
        };
        for o in 1..self.order {
            let contexts: Vec<Vec<WordId>> = self.counts[o].keys().cloned().collect();
            for ctx in contexts {
                let cc = &self.counts[o][&ctx];
                let n = cc.word_total as f64;
                let mut norm = 0.0;
                let mut seen_backoff_mass = 0.0;
                for (&w, &c) in &cc.words {
                    if n > 0.0 {
                        norm += c as f64 / n;
                    }
                    seen_backoff_mass += self.backoff_prob(&ctx[1..], w);
                }
                norm += alpha * (1.0 - seen_backoff_mass);
                self.counts[o].get_mut(&ctx).unwrap().backoff_norm = norm;
            }
        }
    }

    /// Normalized backoff probability p(w | ctx) over W.
    fn backoff_prob(&self, ctx: &[WordId], w: WordId) -> f64 {
        let Smoothing::StupidBackoff { alpha } = self.smoothing else {
            unreachable!("backoff_prob on non-backoff model");
        };
        if ctx.is_empty() {
            return self.unigram_backoff[w as usize];
        }
        let o = ctx.len();
        match self.counts[o].get(ctx) {
            None => self.backoff_prob(&ctx[1..], w),
            Some(cc) => {
                let n = cc.word_total as f64;
                let score = match cc.words.get(&w) {
                    Some(&c) if n > 0.0 => c as f64 / n,
                    _ => alpha * self.backoff_prob(&ctx[1..], w),
                };
                score / cc.backoff_norm
            }
        }
    }

    /// Stored counts at context length `o`: (context, Some(word) or None
    /// for the stop event, count), in deterministic order.
    pub fn iter_counts(
        &self,
        o: usize,
    ) -> impl Iterator<Item = (&[WordId], Option<WordId>, u64)> {
        self.counts[o].iter().flat_map(|(ctx, cc)| {
            let words = cc
                .words
                .iter()
                .map(move |(&w, &c)| (ctx.as_slice(), Some(w), c));
            let eos = (cc.eos > 0)
                .then_some((ctx.as_slice(), None, cc.eos))
                .into_iter();
            words.chain(eos)
        })
    }

    /// Rebuild a model from (count, "tok1 .. tokN") gram lines, the exact
    /// inverse of serializing `iter_counts` output.
    pub fn from_count_lines(
        order: usize,
        smoothing: Smoothing,
        lines: &[(u64, String)],
    ) -> Result<Self> {
        if order == 0 {
            return Err(CoreError::invalid("n-gram order must be >= 1"));
        }
        smoothing.validate()?;
        let mut words: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for (_, gram) in lines {
            for tok in gram.split(' ') {
                if tok != BOS && tok != EOS {
                    if tok == UNK || tok.is_empty() {
                        return Err(CoreError::parse(
                            "ngram-file",
                            format!("illegal token `{}` in counts", tok),
                        ));
                    }
                    words.insert(tok.to_string());
                }
            }
        }
        if words.is_empty() {
            return Err(CoreError::parse("ngram-file", "counts name no words"));
        }
        let words: Vec<String> = words.into_iter().collect();
        let index: BTreeMap<String, WordId> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as WordId))
            .collect();
        let mut model = Self {
            order,
            words,
            index,
            smoothing,
            counts: vec![BTreeMap::new(); order],
            unigram_backoff: Vec::new(),
        };
        let bos = model.bos_id();
        for (count, gram) in lines {
            let toks: Vec<&str> = gram.split(' ').collect();
            if toks.is_empty() || toks.len() > order {
                return Err(CoreError::parse("ngram-file", "gram of invalid order"));
            }
            let o = toks.len() - 1;
            let mut ctx = Vec::with_capacity(o);
            for &tok in &toks[..o] {
                ctx.push(if tok == BOS {
                    bos
                } else {
                    *model.index.get(tok).expect("collected above")
                });
            }
            let last = toks[o];
            let slot = model.counts[o].entry(ctx).or_default();
            if last == EOS {
                slot.eos += count;
            } else if last == BOS {
                return Err(CoreError::parse("ngram-file", "<s> cannot end a gram"));
            } else {
                let w = *model.index.get(last).expect("collected above");
                *slot.words.entry(w).or_insert(0) += count;
                slot.word_total += count;
            }
        }
        if model.counts[0].is_empty() {
            return Err(CoreError::parse("ngram-file", "no unigram counts"));
        }
        model.precompute_backoff();
        Ok(model)
    }

    /// log10 of the conditional probability of the last gram token given
    /// the preceding ones ("<s>" context tokens and a trailing "</s>" are
    /// understood).
    pub fn gram_logprob10(&self, toks: &[&str]) -> Result<f64> {
        if toks.is_empty() {
            return Err(CoreError::invalid("empty gram"));
        }
        let mut ctx = Vec::with_capacity(toks.len() - 1);
        for &tok in &toks[..toks.len() - 1] {
            ctx.push(if tok == BOS { self.bos_id() } else { self.word_id(tok) });
        }
        let last = toks[toks.len() - 1];
        let p = if last == EOS {
            self.eos_prob(&ctx)
        } else {
            self.word_prob(&ctx, self.word_id(last))
        };
        Ok(p.max(1e-99).log10())
    }

    fn trim_context<'a>(&self, ctx: &'a [WordId]) -> &'a [WordId] {
        let keep = self.order - 1;
        if ctx.len() > keep {
            &ctx[ctx.len() - keep..]
        } else {
            ctx
        }
    }

    fn pad_context(&self, ctx: &[WordId]) -> Vec<WordId> {
        let keep = self.order - 1;
        let mut out = Vec::with_capacity(keep);
        for _ in 0..keep.saturating_sub(ctx.len()) {
            out.push(self.bos_id());
        }
        out.extend_from_slice(ctx);
        out
    }

    /// p(w | ctx) over W; may be 0 under MLE (k = 0).
    pub fn word_prob(&self, ctx: &[WordId], w: WordId) -> f64 {
        let ctx = self.trim_context(ctx);
        match self.smoothing {
            Smoothing::AddK { k } => {
                let padded = self.pad_context(ctx);
                let w_size = self.support_size() as f64;
                let (c, n) = match self.counts[padded.len()].get(&padded) {
                    Some(cc) => (
                        cc.words.get(&w).copied().unwrap_or(0) as f64,
                        cc.word_total as f64,
                    ),
                    None => (0.0, 0.0),
                };
                let den = n + k * w_size;
                if den == 0.0 {
                    0.0
                } else {
                    (c + k) / den
                }
            }
            Smoothing::StupidBackoff { .. } => {
                let padded = self.pad_context(ctx);
                self.backoff_prob(&padded, w)
            }
        }
    }

    /// Stop probability p(</s> | ctx): add-k over the binary stop/continue
    /// split, backing off to shorter contexts when unseen.
    pub fn eos_prob(&self, ctx: &[WordId]) -> f64 {
        let k = match self.smoothing {
            Smoothing::AddK { k } => k,
            Smoothing::StupidBackoff { .. } => 1.0,
        };
        let ctx = self.trim_context(ctx);
        let padded = self.pad_context(ctx);
        for start in 0..=padded.len() {
            let sub = &padded[start..];
            if let Some(cc) = self.counts[sub.len()].get(sub) {
                let total = (cc.word_total + cc.eos) as f64;
                let den = total + 2.0 * k;
                if den > 0.0 {
                    return (cc.eos as f64 + k) / den;
                }
            }
        }
        let empty: Vec<WordId> = Vec::new();
        let cc = &self.counts[0][&empty];
        let total = (cc.word_total + cc.eos) as f64;
        (cc.eos as f64 + k) / (total + 2.0 * k)
    }
}
