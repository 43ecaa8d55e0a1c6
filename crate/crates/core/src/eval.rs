//! Word error rate and experiment reports.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl WerBreakdown {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// (S + I + D) / N; may exceed 1.
    pub fn wer(&self) -> f64 {
        self.edits() as f64 / self.reference_words as f64
    }

    pub fn accumulate(&mut self, other: &WerBreakdown) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_words += other.reference_words;
    }
}

/// Word-level Levenshtein with unit costs. The S/I/D split comes from a
/// traceback with a fixed tie-break (substitution, then deletion, then
/// insertion), so it is deterministic even where the edit script is not
/// unique.
pub fn wer(reference: &[&str], hypothesis: &[&str]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(CoreError::invalid(
            "WER undefined for empty reference (division by zero)",
        ));
    }
    let m = reference.len();
    let n = hypothesis.len();
    let mut dist = vec![0usize; (m + 1) * (n + 1)];
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    for i in 0..=m {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=n {
        dist[idx(0, j)] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let diag = dist[idx(i - 1, j - 1)] + sub_cost;
            let del = dist[idx(i - 1, j)] + 1;
            let ins = dist[idx(i, j - 1)] + 1;
            dist[idx(i, j)] = diag.min(del).min(ins);
        }
    }

    let mut out = WerBreakdown {
        substitutions: 0,
        insertions: 0,
        deletions: 0,
        reference_words: m,
    };
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = dist[idx(i, j)];
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[idx(i - 1, j - 1)] + sub_cost == here {
                if sub_cost == 1 {
                    out.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[idx(i - 1, j)] + 1 == here {
            out.deletions += 1;
            i -= 1;
            continue;
        }
        out.insertions += 1;
        j -= 1;
    }
    Ok(out)
}

pub fn wer_strings(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}

/// Corpus-level WER: edits summed over pairs before dividing.
pub fn corpus_wer<'a>(
    pairs: impl Iterator<Item = (&'a str, &'a str)>,
) -> Result<WerBreakdown> {
    let mut total = WerBreakdown {
        substitutions: 0,
        insertions: 0,
        deletions: 0,
        reference_words: 0,
    };
    let mut any = false;
    for (r, h) in pairs {
        total.accumulate(&wer_strings(r, h)?);
        any = true;
    }
    if !any {
        return Err(CoreError::invalid("no utterances to score"));
    }
    Ok(total)
}

/// Relative change (base - new)/base, the arithmetic of paired report rows.
pub fn relative_change(base: f64, new: f64) -> f64 {
    (base - new) / base
}

/// One row of an experiment report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub labeled: usize,
    pub unlabeled: usize,
    pub dev_wer_lm: Option<f64>,
    pub test_wer_lm: Option<f64>,
    pub dev_wer_nolm: Option<f64>,
    pub test_wer_nolm: Option<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_CSV_HEADER: &str =
    "arm,labeled,unlabeled,dev_wer_lm,test_wer_lm,dev_wer_nolm,test_wer_nolm,pct_change_vs_baseline,config_hash";

impl ExperimentReport {
    /// CSV with one data row per arm. The % change column compares each
    /// arm's dev WER (with LM) against the first row with the same labeled
    /// size; absent pairings emit the literal `absent`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let base = self
                .rows
                .iter()
                .find(|r| r.labeled == row.labeled)
                .and_then(|r| r.dev_wer_lm);
            let change = match (base, row.dev_wer_lm) {
                (Some(b), Some(n)) if b > 0.0 => {
                    format!("{:.1}%", relative_change(b, n) * 100.0)
                }
                _ => "absent".to_string(),
            };
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{:.4}", x),
                None => "absent".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                row.arm,
                row.labeled,
                row.unlabeled,
                fmt(row.dev_wer_lm),
                fmt(row.test_wer_lm),
                fmt(row.dev_wer_nolm),
                fmt(row.test_wer_nolm),
                change,
                row.config_hash,
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn identical_sequences_have_zero_wer() {
        let b = wer_strings("a b c", "a b c").unwrap();
        assert_eq!(b.edits(), 0);
        assert_eq!(b.wer(), 0.0);
    }

    #[test]
    fn single_deletion() {
        let b = wer_strings("a b c", "a c").unwrap();
        assert_eq!(
            b,
            WerBreakdown {
                substitutions: 0,
                insertions: 0,
                deletions: 1,
                reference_words: 3
            }
        );
        assert!((b.wer() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(wer_strings("", "a b").is_err());
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let b = wer_strings("a b c d", "").unwrap();
        assert_eq!(b.deletions, 4);
        assert_eq!(b.wer(), 1.0);
    }

    #[test]
    fn wer_can_exceed_one() {
        let b = wer_strings("a", "b c d").unwrap();
        assert!(b.wer() > 1.0);
    }

    /// Exhaustive edit-script search: minimum edits over all alignments,
    /// exploring every script rather than relying on the DP recurrence.
    fn brute_force_edits(r: &[&str], h: &[&str]) -> usize {
        fn go(r: &[&str], h: &[&str]) -> usize {
            match (r.is_empty(), h.is_empty()) {
                (true, _) => h.len(),
                (_, true) => r.len(),
                _ => {
                    let sub = go(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
                    let del = go(&r[1..], h) + 1;
                    let ins = go(r, &h[1..]) + 1;
                    sub.min(del).min(ins)
                }
            }
        }
        go(r, h)
    }

    #[test]
    fn distance_matches_exhaustive_search_on_random_pairs() {
        let vocab = ["a", "b", "c", "d"];
        let mut rng = murmur_nn::rng::rng_from(42);
        for _ in 0..500 {
            let rl = rng.gen_range(1..=8);
            let hl = rng.gen_range(0..=8);
            let r: Vec<&str> = (0..rl).map(|_| vocab[rng.gen_range(0..4)]).collect();
            let h: Vec<&str> = (0..hl).map(|_| vocab[rng.gen_range(0..4)]).collect();
            let got = wer(&r, &h).unwrap();
            let expect = brute_force_edits(&r, &h);
            assert_eq!(got.edits(), expect, "r={:?} h={:?}", r, h);
        }
    }

    #[test]
    fn split_is_deterministic_under_ambiguity() {
        // "a b" -> "b": distance 1, achievable as delete-a or (sub,del).
        // The fixed tie-break must put it on one side every time.
        let b1 = wer_strings("a b", "b").unwrap();
        let b2 = wer_strings("a b", "b").unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.edits(), 1);
    }

    #[test]
    fn table_arithmetic_for_relative_change() {
        // 5.7 -> 5.3 is about a 7% relative improvement
        let change = relative_change(5.7, 5.3);
        assert!((change * 100.0 - 7.0).abs() < 0.1);
        assert_eq!(relative_change(4.0, 4.0), 0.0);
    }

    #[test]
    fn report_emits_header_and_absent_markers() {
        let report = ExperimentReport {
            rows: vec![
                ReportRow {
                    arm: "baseline".into(),
                    labeled: 50,
                    unlabeled: 430,
                    dev_wer_lm: Some(0.30),
                    test_wer_lm: Some(0.31),
                    dev_wer_nolm: Some(0.40),
                    test_wer_nolm: Some(0.41),
                    config_hash: "abc123".into(),
                },
                ReportRow {
                    arm: "missing".into(),
                    labeled: 50,
                    unlabeled: 430,
                    dev_wer_lm: None,
                    test_wer_lm: None,
                    dev_wer_nolm: None,
                    test_wer_nolm: None,
                    config_hash: "abc123".into(),
                },
            ],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_CSV_HEADER);
        assert_eq!(lines.clone().count(), 2);
        let second = lines.nth(1).unwrap();
        assert!(second.contains("absent"));
        // paired rows: relative change of identical WERs is 0%
        let first = csv.lines().nth(1).unwrap();
        assert!(first.contains("0.0%"), "{}", first);
    }
}
