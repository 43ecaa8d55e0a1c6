//! Language models behind one scoring interface: a count-based smoothed
//! n-gram model for first-pass fusion and a small neural transformer LM for
//! rescoring, plus uniform/null scorers for tests and ablations.

pub mod neural;
pub mod ngram;

use std::path::Path;

use crate::error::{CoreError, Result};
pub use neural::{NeuralLm, NeuralLmConfig};
pub use ngram::{NGramModel, Smoothing, WordId, BOS, EOS, UNK};

/// Incremental scoring state: the word history (models use the suffix they
/// need). Kept whole so incremental and whole-sequence scoring agree
/// trivially and states stay hashable.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LmState {
    words: Vec<WordId>,
}

impl LmState {
    pub fn history(&self) -> &[WordId] {
        &self.words
    }
}

pub enum Lm {
    NGram(NGramModel),
    Neural(NeuralLm),
    /// Every conditional, including end-of-sentence, is 1/support.
    Uniform { support: usize },
}

impl Lm {
    pub fn word_id(&self, word: &str) -> WordId {
        match self {
            Lm::NGram(m) => m.word_id(word),
            Lm::Neural(m) => m.word_id(word),
            Lm::Uniform { .. } => 0,
        }
    }

    pub fn start(&self) -> LmState {
        LmState::default()
    }

    /// Extend the state with a word, returning the new state and
    /// log p(word | state).
    pub fn advance(&self, state: &LmState, word: &str) -> (LmState, f64) {
        let id = self.word_id(word);
        let logp = match self {
            Lm::NGram(m) => m.word_prob(&state.words, id).ln(),
            Lm::Neural(m) => m.word_logprob(&state.words, id),
            Lm::Uniform { support } => -(*support as f64).ln(),
        };
        let mut next = state.clone();
        next.words.push(id);
        (next, logp)
    }

    /// log p(</s> | state).
    pub fn finish(&self, state: &LmState) -> f64 {
        match self {
            Lm::NGram(m) => m.eos_prob(&state.words).ln(),
            Lm::Neural(m) => m.eos_logprob(&state.words),
            Lm::Uniform { support } => -(*support as f64).ln(),
        }
    }

    /// Whole-sequence log-probability including the end-of-sentence event.
    pub fn sentence_logprob(&self, text: &str) -> f64 {
        let mut state = self.start();
        let mut total = 0.0;
        for word in text.split_whitespace() {
            let (next, lp) = self.advance(&state, word);
            total += lp;
            state = next;
        }
        total + self.finish(&state)
    }
}

/// exp(-(1/N) * sum of log-probs), N counting words plus one sentence-end
/// per sentence. A zero-probability event under MLE yields +inf.
pub fn perplexity(lm: &Lm, texts: &[&str]) -> Result<f64> {
    let mut total = 0.0;
    let mut events = 0usize;
    for t in texts {
        let words = t.split_whitespace().count();
        if words == 0 {
            continue;
        }
        total += lm.sentence_logprob(t);
        events += words + 1;
    }
    if events == 0 {
        return Err(CoreError::invalid("empty corpus"));
    }
    if total == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok((-total / events as f64).exp())
}

// ---------------------------------------------------------------------------
// n-gram model file: ARPA-like sorted text format (see docs/FORMATS.md).
// ---------------------------------------------------------------------------

fn smoothing_line(s: Smoothing) -> String {
    match s {
        Smoothing::AddK { k } => format!("smoothing add-k {}", k),
        Smoothing::StupidBackoff { alpha } => format!("smoothing stupid-backoff {}", alpha),
    }
}

fn parse_smoothing(line: &str) -> Result<Smoothing> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["smoothing", "add-k", k] => Ok(Smoothing::AddK {
            k: k.parse()
                .map_err(|_| CoreError::parse("ngram-file", "bad add-k parameter"))?,
        }),
        ["smoothing", "stupid-backoff", a] => Ok(Smoothing::StupidBackoff {
            alpha: a
                .parse()
                .map_err(|_| CoreError::parse("ngram-file", "bad backoff parameter"))?,
        }),
        _ => Err(CoreError::parse("ngram-file", "bad smoothing line")),
    }
}

/// Serialize a trained model. Per-order sections list each seen n-gram with
/// the log10 of its smoothed conditional probability; the trailing counts
/// section carries the raw counts that allow exact reconstruction.
pub fn ngram_to_string(model: &NGramModel) -> String {
    let mut grams: Vec<Vec<(String, f64, u64)>> = Vec::new(); // per order: (gram, logp, count)
    for o in 0..model.order() {
        let mut lines = Vec::new();
        for (ctx, word, count) in model.iter_counts(o) {
            let mut toks: Vec<String> = ctx.iter().map(|&w| ctx_word(model, w)).collect();
            let (p, tok) = match word {
                Some(w) => (model.word_prob(ctx, w), model.word_str(w).to_string()),
                None => (model.eos_prob(ctx), EOS.to_string()),
            };
            toks.push(tok);
            lines.push((toks.join(" "), p.max(1e-99).log10(), count));
        }
        lines.sort_by(|a, b| a.0.cmp(&b.0));
        grams.push(lines);
    }

    let mut out = String::new();
    out.push_str("\\data\\\n");
    out.push_str(&format!("order {}\n", model.order()));
    out.push_str(&smoothing_line(model.smoothing()));
    out.push('\n');
    for (o, lines) in grams.iter().enumerate() {
        out.push_str(&format!("ngram {}={}\n", o + 1, lines.len()));
    }
    for (o, lines) in grams.iter().enumerate() {
        out.push_str(&format!("\\{}-grams:\n", o + 1));
        for (gram, logp, _) in lines {
            out.push_str(&format!("{:.6}\t{}\n", logp, gram));
        }
    }
    out.push_str("\\counts\\\n");
    for lines in &grams {
        for (gram, _, count) in lines {
            out.push_str(&format!("{}\t{}\n", count, gram));
        }
    }
    out.push_str("\\end\\\n");
    out
}

fn ctx_word(model: &NGramModel, w: WordId) -> String {
    if w == model.bos_id() {
        BOS.to_string()
    } else {
        model.word_str(w).to_string()
    }
}

/// Parse the sorted text format back into a model. Reconstruction uses the
/// counts section; the per-gram log-probabilities are validated against the
/// rebuilt model.
pub fn ngram_from_string(content: &str) -> Result<NGramModel> {
    let mut lines = content.lines();
    if lines.next() != Some("\\data\\") {
        return Err(CoreError::parse("ngram-file", "missing \\data\\ header"));
    }
    let order: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("order "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CoreError::parse("ngram-file", "missing order line"))?;
    if order == 0 || order > 16 {
        return Err(CoreError::parse("ngram-file", "order out of range"));
    }
    let smoothing = parse_smoothing(
        lines
            .next()
            .ok_or_else(|| CoreError::parse("ngram-file", "missing smoothing line"))?,
    )?;

    let mut declared = Vec::new();
    for line in lines.by_ref() {
        if line.starts_with('\\') {
            break;
        }
        let (o, n) = line
            .strip_prefix("ngram ")
            .and_then(|l| l.split_once('='))
            .ok_or_else(|| CoreError::parse("ngram-file", "bad ngram count line"))?;
        let o: usize = o
            .parse()
            .map_err(|_| CoreError::parse("ngram-file", "bad ngram order"))?;
        let n: usize = n
            .parse()
            .map_err(|_| CoreError::parse("ngram-file", "bad ngram count"))?;
        declared.push((o, n));
    }
    if declared.len() != order {
        return Err(CoreError::parse(
            "ngram-file",
            format!("expected {} ngram count lines", order),
        ));
    }

    // skip logprob sections, collecting them for validation
    let mut logprob_lines: Vec<(String, f64)> = Vec::new();
    let mut counts_lines: Vec<(u64, String)> = Vec::new();
    let mut in_counts = false;
    let mut ended = false;
    let rest: Vec<&str> = content.lines().collect();
    let mut i = rest
        .iter()
        .position(|l| l.starts_with("\\1-grams:"))
        .ok_or_else(|| CoreError::parse("ngram-file", "missing 1-grams section"))?;
    while i < rest.len() {
        let line = rest[i];
        i += 1;
        if line == "\\end\\" {
            ended = true;
            break;
        }
        if line == "\\counts\\" {
            in_counts = true;
            continue;
        }
        if line.starts_with('\\') && line.ends_with("-grams:") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (head, gram) = line
            .split_once('\t')
            .ok_or_else(|| CoreError::parse("ngram-file", "line missing tab separator"))?;
        if in_counts {
            let c: u64 = head
                .parse()
                .map_err(|_| CoreError::parse("ngram-file", "bad count"))?;
            counts_lines.push((c, gram.to_string()));
        } else {
            let lp: f64 = head
                .parse()
                .map_err(|_| CoreError::parse("ngram-file", "bad log-probability"))?;
            logprob_lines.push((gram.to_string(), lp));
        }
    }
    if !ended {
        return Err(CoreError::parse("ngram-file", "missing \\end\\"));
    }
    if counts_lines.is_empty() {
        return Err(CoreError::parse("ngram-file", "missing counts section"));
    }

    let model = NGramModel::from_count_lines(order, smoothing, &counts_lines)?;

    // declared section sizes and stored conditionals must match the rebuild
    let mut by_order = vec![0usize; order];
    for (_, gram) in &counts_lines {
        let toks = gram.split(' ').count();
        if toks == 0 || toks > order {
            return Err(CoreError::parse("ngram-file", "gram of invalid order"));
        }
        by_order[toks - 1] += 1;
    }
    for (o, n) in declared {
        if o == 0 || o > order || by_order[o - 1] != n {
            return Err(CoreError::parse(
                "ngram-file",
                format!("section {} declares {} grams, counts disagree", o, n),
            ));
        }
    }
    for (gram, lp) in &logprob_lines {
        let toks: Vec<&str> = gram.split(' ').collect();
        let rebuilt = model.gram_logprob10(&toks)?;
        if (rebuilt - lp).abs() > 1e-4 {
            return Err(CoreError::parse(
                "ngram-file",
                format!("gram `{}`: stored {} vs rebuilt {}", gram, lp, rebuilt),
            ));
        }
    }
    Ok(model)
}

pub fn save_ngram(model: &NGramModel, path: &Path) -> Result<()> {
    std::fs::write(path, ngram_to_string(model))?;
    Ok(())
}

pub fn load_ngram(path: &Path) -> Result<NGramModel> {
    ngram_from_string(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_conditionals_score_zero_logprob() {
        let sentences: Vec<&str> = std::iter::repeat("a b").take(10).collect();
        let m = NGramModel::train(&sentences, 2, Smoothing::AddK { k: 0.0 }).unwrap();
        let lm = Lm::NGram(m);
        // every conditional on the training sentence is deterministic
        assert!((lm.sentence_logprob("a b")).abs() < 1e-12);
    }

    #[test]
    fn incremental_equals_whole_sequence() {
        let sentences = ["a b c", "b c a", "c a b a", "a a b"];
        let m = NGramModel::train(&sentences, 3, Smoothing::StupidBackoff { alpha: 0.4 })
            .unwrap();
        let lm = Lm::NGram(m);
        let mut rng = murmur_nn::rng::rng_from(5);
        use rand::Rng as _;
        let vocab = ["a", "b", "c", "zzz"];
        for _ in 0..100 {
            let len = rng.gen_range(0..6);
            let words: Vec<&str> = (0..len).map(|_| vocab[rng.gen_range(0..4)]).collect();
            let text = words.join(" ");
            // incremental path
            let mut state = lm.start();
            let mut inc = 0.0;
            for w in &words {
                let (next, lp) = lm.advance(&state, w);
                inc += lp;
                state = next;
            }
            inc += lm.finish(&state);
            assert!(
                (inc - lm.sentence_logprob(&text)).abs() < 1e-12,
                "text {:?}",
                text
            );
        }
    }

    #[test]
    fn empty_sentence_scores_eos_after_bos() {
        let m = NGramModel::train(&["a b", "b"], 2, Smoothing::AddK { k: 1.0 }).unwrap();
        let eos_given_bos = m.eos_prob(&[]).ln();
        let lm = Lm::NGram(m);
        assert!((lm.sentence_logprob("") - eos_given_bos).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_perplexity_is_support_size() {
        let lm = Lm::Uniform { support: 7 };
        let pp = perplexity(&lm, &["a b c", "d e"]).unwrap();
        assert!((pp - 7.0).abs() < 1e-9);
    }

    #[test]
    fn hand_corpus_perplexity() {
        // add-1 bigram on "a b" + "a c": events per sentence are
        // p(a|<s>), p(w|a), p(</s>|w)
        let m = NGramModel::train(&["a b", "a c"], 2, Smoothing::AddK { k: 1.0 }).unwrap();
        let a = m.word_id("a");
        let b = m.word_id("b");
        let c = m.word_id("c");
        let p_a_bos = m.word_prob(&[], a); // (2+1)/(2+4) = 1/2
        assert!((p_a_bos - 0.5).abs() < 1e-12);
        let p_b_a = m.word_prob(&[a], b); // 1/3
        let p_eos_b = m.eos_prob(&[b]); // (1+1)/(1+2) = 2/3
        let p_eos_c = m.eos_prob(&[c]);
        let total = (p_a_bos.ln() + p_b_a.ln() + p_eos_b.ln())
            + (p_a_bos.ln() + p_b_a.ln() + p_eos_c.ln());
        let expect = (-total / 6.0).exp();
        let lm = Lm::NGram(m);
        let got = perplexity(&lm, &["a b", "a c"]).unwrap();
        assert!((got - expect).abs() < 1e-9, "{} vs {}", got, expect);
    }

    #[test]
    fn mle_zero_probability_reports_infinite_perplexity() {
        let m = NGramModel::train(&["a b"], 2, Smoothing::AddK { k: 0.0 }).unwrap();
        let lm = Lm::NGram(m);
        let pp = perplexity(&lm, &["b a"]).unwrap();
        assert!(pp.is_infinite());
    }

    #[test]
    fn file_round_trip_reproduces_scores_exactly() {
        let sentences = ["a b c", "b c a", "c a b a", "a a b", "b b c a"];
        for smoothing in [
            Smoothing::AddK { k: 1.0 },
            Smoothing::StupidBackoff { alpha: 0.4 },
        ] {
            let m = NGramModel::train(&sentences, 3, smoothing).unwrap();
            let s = ngram_to_string(&m);
            let back = ngram_from_string(&s).unwrap();
            let a = Lm::NGram(m);
            let b = Lm::NGram(back);
            for text in ["a b c", "c c c", "zzz a", ""] {
                let x = a.sentence_logprob(text);
                let y = b.sentence_logprob(text);
                assert!((x - y).abs() < 1e-12, "{:?}: {} vs {}", text, x, y);
            }
        }
    }

    #[test]
    fn malformed_ngram_files_error() {
        assert!(ngram_from_string("").is_err());
        assert!(ngram_from_string("\\data\\\n").is_err());
        assert!(ngram_from_string("\\data\\\norder 2\nsmoothing add-k 1\n").is_err());
        let m = NGramModel::train(&["a b"], 2, Smoothing::AddK { k: 1.0 }).unwrap();
        let good = ngram_to_string(&m);
        // corrupt a stored log-probability well past the load tolerance
        let bad: String = good
            .lines()
            .map(|l| {
                if let Some((head, gram)) = l.split_once('\t') {
                    if head.parse::<f64>().is_ok() && head.contains('.') {
                        return format!("-9.000000\t{}\n", gram);
                    }
                }
                format!("{}\n", l)
            })
            .collect();
        assert!(ngram_from_string(&bad).is_err());
        // truncate
        assert!(ngram_from_string(&good[..good.len() / 2]).is_err());
    }
}
