//! Decoder oracles: exhaustive-mode fused beam search against brute-force
//! search over all label sequences, score decomposition, pruning and
//! rescoring behavior, and tuner determinism.

use murmur_core::corpus::vocab::Vocabulary;
use murmur_core::decode::{
    fused_beam_search, nbest_json_line, nbest_prune, parse_nbest_line, rescore,
    sample_trial_params, tune_random_search, FusionConfig, Hypothesis, TuneConfig, TunerInput,
};
use murmur_core::lm::{Lm, NGramModel, Smoothing};
use murmur_nn::rng::{derive_seed_n, rng_from};
use murmur_nn::Tensor;
use rand::Rng as _;

/// Letters "a b" + space; blank is the last emission column.
fn letter_vocab() -> Vocabulary {
    Vocabulary::letters(&["ab a b"]).unwrap()
}

fn random_emissions(t: usize, v: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|x| (x / sum).ln()));
    }
    Tensor::matrix(t, v, data).unwrap()
}

/// Exact log P(label sequence) by enumerating all |V|^T frame paths and
/// collapsing each (independent of the prefix-search implementation).
fn brute_force_label_logprob(emissions: &Tensor, blank: usize) -> Vec<(Vec<u32>, f64)> {
    let (t_len, v) = (emissions.shape()[0], emissions.shape()[1]);
    let mut acc: std::collections::BTreeMap<Vec<u32>, f64> = std::collections::BTreeMap::new();
    let mut path = vec![0usize; t_len];
    loop {
        let mut collapsed: Vec<u32> = Vec::new();
        let mut prev = usize::MAX;
        for &s in &path {
            if s != prev && s != blank {
                collapsed.push(s as u32);
            }
            prev = s;
        }
        let logp: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &s)| emissions.at2(t, s))
            .sum();
        let slot = acc.entry(collapsed).or_insert(f64::NEG_INFINITY);
        let m = slot.max(logp);
        *slot = m + ((*slot - m).exp() + (logp - m).exp()).ln();

        let mut pos = t_len;
        loop {
            if pos == 0 {
                return acc.into_iter().collect();
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < v {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Fusion arithmetic applied to a label sequence the same way the decoder
/// defines it: LM and +1 word per non-empty separator-delimited segment.
fn fusion_terms(tokens: &[u32], vocab: &Vocabulary, lm: Option<&Lm>) -> (f64, usize) {
    let sep = vocab.separator_id();
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    for &t in tokens {
        if Some(t) == sep {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else {
            current.push_str(vocab.token(t));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    let mut lm_total = 0.0;
    if let Some(lm) = lm {
        let mut state = lm.start();
        for w in &words {
            let (next, lp) = lm.advance(&state, w);
            lm_total += lp;
            state = next;
        }
    }
    (lm_total, words.len())
}

fn small_lm() -> Lm {
    Lm::NGram(
        NGramModel::train(
            &["a ab", "ab a", "b ab", "a a b"],
            2,
            Smoothing::AddK { k: 0.5 },
        )
        .unwrap(),
    )
}

#[test]
fn exhaustive_mode_matches_brute_force_argmax() {
    let vocab = letter_vocab();
    let lm = small_lm();
    let mut rng = rng_from(7);
    let mut checked = 0;
    for trial in 0..200 {
        let t = rng.gen_range(1..=4);
        let emissions = random_emissions(t, vocab.len() + 1, 9000 + trial);
        let alpha = rng.gen_range(0.0..3.0);
        let beta = rng.gen_range(-2.0..2.0);
        let cfg = FusionConfig {
            alpha,
            beta,
            beam: FusionConfig::EXHAUSTIVE,
            nbest: 5,
        };
        let got = fused_beam_search(&emissions, &vocab, Some(&lm), &cfg).unwrap();

        let blank = vocab.len();
        let mut best: Option<(Vec<u32>, f64)> = None;
        for (tokens, logp) in brute_force_label_logprob(&emissions, blank) {
            let (lm_total, words) = fusion_terms(&tokens, &vocab, Some(&lm));
            let score = logp + alpha * lm_total + beta * words as f64;
            let better = match &best {
                None => true,
                Some((bt, bs)) => {
                    score > *bs + 1e-12 || ((score - bs).abs() <= 1e-12 && tokens < *bt)
                }
            };
            if better {
                best = Some((tokens, score));
            }
        }
        let (expect_tokens, expect_score) = best.unwrap();
        assert_eq!(
            got[0].tokens, expect_tokens,
            "trial {}: {:?} vs {:?}",
            trial, got[0].text, expect_tokens
        );
        assert!(
            (got[0].score - expect_score).abs() < 1e-9,
            "trial {}: {} vs {}",
            trial,
            got[0].score,
            expect_score
        );
        checked += 1;
    }
    assert_eq!(checked, 200);
}

#[test]
fn disabled_fusion_equals_pure_acoustic_search() {
    let vocab = letter_vocab();
    let lm = small_lm();
    for trial in 0..30 {
        let emissions = random_emissions(4, vocab.len() + 1, 400 + trial);
        let with_zero = fused_beam_search(
            &emissions,
            &vocab,
            Some(&lm),
            &FusionConfig {
                alpha: 0.0,
                beta: 0.0,
                beam: 8,
                nbest: 3,
            },
        )
        .unwrap();
        let without = fused_beam_search(
            &emissions,
            &vocab,
            None,
            &FusionConfig::acoustic_only(8, 3),
        )
        .unwrap();
        assert_eq!(with_zero[0].tokens, without[0].tokens, "trial {}", trial);
        assert!((with_zero[0].score - without[0].score).abs() < 1e-12);
    }
}

#[test]
fn score_decomposition_holds_for_every_hypothesis() {
    let vocab = letter_vocab();
    let lm = small_lm();
    let emissions = random_emissions(6, vocab.len() + 1, 77);
    let (alpha, beta) = (1.3, -0.4);
    let hyps = fused_beam_search(
        &emissions,
        &vocab,
        Some(&lm),
        &FusionConfig {
            alpha,
            beta,
            beam: 16,
            nbest: 16,
        },
    )
    .unwrap();
    assert!(!hyps.is_empty());
    for h in &hyps {
        assert!(
            (h.score - h.recompute_score(alpha, beta)).abs() < 1e-9,
            "{:?}",
            h
        );
    }
    // shifting beta by delta moves each score by exactly delta * words
    let delta = 0.7;
    for h in &hyps {
        let shifted = h.recompute_score(alpha, beta + delta);
        assert!((shifted - h.score - delta * h.words as f64).abs() < 1e-9);
    }
}

#[test]
fn beam_search_scores_are_sorted_and_deduplicated() {
    let vocab = letter_vocab();
    let emissions = random_emissions(6, vocab.len() + 1, 55);
    let hyps = fused_beam_search(
        &emissions,
        &vocab,
        None,
        &FusionConfig::acoustic_only(32, 32),
    )
    .unwrap();
    for w in hyps.windows(2) {
        assert!(w[0].score >= w[1].score);
        assert_ne!(w[0].tokens, w[1].tokens);
    }
}

#[test]
fn wider_beams_approach_the_exhaustive_score_from_below() {
    // Pruning can only remove probability mass from a surviving prefix, so
    // no finite beam may report a top-1 score above the exhaustive search.
    // Strict monotonicity across adjacent beam sizes is not a theorem
    // (pruned-mass interactions produce rare counterexamples), so the
    // growth tendency is checked with a small violation budget instead.
    let vocab = letter_vocab();
    let lm = small_lm();
    let mut comparisons = 0usize;
    let mut violations = 0usize;
    for trial in 0..20 {
        let emissions = random_emissions(5, vocab.len() + 1, 7000 + trial);
        let run = |beam: usize| {
            fused_beam_search(
                &emissions,
                &vocab,
                Some(&lm),
                &FusionConfig {
                    alpha: 0.8,
                    beta: 0.3,
                    beam,
                    nbest: 1,
                },
            )
            .unwrap()[0]
                .score
        };
        let exact = run(FusionConfig::EXHAUSTIVE);
        let mut prev = f64::NEG_INFINITY;
        for beam in [1usize, 2, 4, 8, 16, 64] {
            let score = run(beam);
            assert!(
                score <= exact + 1e-9,
                "trial {} beam {}: {} exceeds exhaustive {}",
                trial,
                beam,
                score,
                exact
            );
            comparisons += 1;
            if score < prev - 1e-12 {
                violations += 1;
            }
            prev = score;
        }
        // a wide-enough beam on these tiny inputs is exact
        assert!((run(64) - exact).abs() < 1e-9, "trial {}", trial);
    }
    assert!(
        violations * 10 <= comparisons,
        "{} monotonicity violations in {} comparisons",
        violations,
        comparisons
    );
}

fn hyp(tokens: Vec<u32>, text: &str, acoustic: f64, lm: f64, words: usize, score: f64) -> Hypothesis {
    Hypothesis {
        tokens,
        text: text.into(),
        acoustic,
        lm,
        words,
        score,
    }
}

#[test]
fn prune_keeps_topk_with_stable_ties() {
    let list = vec![
        hyp(vec![1], "b", -1.0, 0.0, 1, -3.0),
        hyp(vec![0], "a", -1.0, 0.0, 1, -1.0),
        hyp(vec![2], "c", -1.0, 0.0, 1, -2.0),
        hyp(vec![0, 1], "ab", -1.0, 0.0, 1, -2.0),
    ];
    let pruned = nbest_prune(list.clone(), 3);
    assert_eq!(pruned.len(), 3);
    assert_eq!(pruned[0].text, "a");
    // tie at -2.0 broken lexicographically by token sequence: [0,1] < [2]
    assert_eq!(pruned[1].text, "ab");
    assert_eq!(pruned[2].text, "c");

    // k = 1 keeps the top hypothesis; k >= len is identity
    assert_eq!(nbest_prune(list.clone(), 1)[0].text, "a");
    assert_eq!(nbest_prune(list.clone(), 10).len(), 4);

    // oracle: independent sort then truncate
    let mut rng = rng_from(3);
    let mut random: Vec<Hypothesis> = (0..30)
        .map(|i| {
            let s: f64 = rng.gen_range(-5.0..0.0);
            hyp(vec![i as u32], &format!("w{}", i), s, 0.0, 1, s)
        })
        .collect();
    let got = nbest_prune(random.clone(), 7);
    random.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    for (g, e) in got.iter().zip(random.iter().take(7)) {
        assert_eq!(g.text, e.text);
    }
}

#[test]
fn identity_rescoring_preserves_ranking() {
    let vocab = letter_vocab();
    let lm = small_lm();
    let emissions = random_emissions(6, vocab.len() + 1, 21);
    let (alpha, beta) = (1.1, 0.2);
    let first = fused_beam_search(
        &emissions,
        &vocab,
        Some(&lm),
        &FusionConfig {
            alpha,
            beta,
            beam: 16,
            nbest: 8,
        },
    )
    .unwrap();
    let again = rescore(&first, &lm, alpha, beta);
    // same LM and weights: only the eos term is added, which reranks
    // nothing when every hypothesis gains its own eos likelihood... it can,
    // so compare against a brute re-sort of recomputed scores instead.
    let mut expect: Vec<(String, f64)> = first
        .iter()
        .map(|h| {
            let lm_score = lm.sentence_logprob(&h.text);
            (h.text.clone(), h.acoustic + alpha * lm_score + beta * h.words as f64)
        })
        .collect();
    expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (got, (text, score)) in again.iter().zip(&expect) {
        assert_eq!(&got.text, text);
        assert!((got.score - score).abs() < 1e-9);
    }
}

#[test]
fn rescoring_hand_case_and_permutation_invariance() {
    // two hypotheses with hand-set scores
    let a = hyp(vec![0], "a", -1.0, 0.0, 1, -1.0);
    let b = hyp(vec![1], "b", -1.5, 0.0, 1, -1.5);
    let lm = small_lm();
    let la = lm.sentence_logprob("a");
    let lb = lm.sentence_logprob("b");
    let (a2, b2) = (2.0, 0.5);
    let expect_a = -1.0 + a2 * la + b2;
    let expect_b = -1.5 + a2 * lb + b2;
    let out = rescore(&[a.clone(), b.clone()], &lm, a2, b2);
    let find = |t: &str, list: &[Hypothesis]| list.iter().find(|h| h.text == t).unwrap().score;
    assert!((find("a", &out) - expect_a).abs() < 1e-12);
    assert!((find("b", &out) - expect_b).abs() < 1e-12);
    if expect_a > expect_b {
        assert_eq!(out[0].text, "a");
    } else {
        assert_eq!(out[0].text, "b");
    }
    // input order must not matter
    let swapped = rescore(&[b, a], &lm, a2, b2);
    let texts: Vec<&str> = out.iter().map(|h| h.text.as_str()).collect();
    let texts2: Vec<&str> = swapped.iter().map(|h| h.text.as_str()).collect();
    assert_eq!(texts, texts2);
}

#[test]
fn nbest_json_round_trip_and_malformed_lines() {
    let hyps = vec![
        hyp(vec![0, 2, 1], "a b", -2.5, -1.2, 2, -4.1),
        hyp(vec![0], "a", -3.0, -0.5, 1, -3.9),
    ];
    let line = nbest_json_line("u42", &hyps).unwrap();
    let parsed = parse_nbest_line(&line).unwrap();
    assert_eq!(parsed.id, "u42");
    assert_eq!(parsed.hyps.len(), 2);
    assert_eq!(parsed.hyps[0].text, "a b");
    assert_eq!(parsed.hyps[0].words, 2);
    assert!((parsed.hyps[0].am + 2.5).abs() < 1e-12);

    assert!(parse_nbest_line("{").is_err());
    assert!(parse_nbest_line(r#"{"id":"","hyps":[]}"#).is_err());
    assert!(parse_nbest_line(r#"{"id":"x","hyps":[{"text":"a"}]}"#).is_err());
}

fn tuner_fixture() -> (Vec<TunerInput>, Vocabulary, Lm) {
    let vocab = letter_vocab();
    let lm = small_lm();
    let inputs: Vec<TunerInput> = (0..4)
        .map(|i| {
            let emissions = random_emissions(5, vocab.len() + 1, 600 + i);
            let cfg = FusionConfig::acoustic_only(8, 1);
            let top = fused_beam_search(&emissions, &vocab, None, &cfg).unwrap();
            TunerInput {
                id: format!("u{}", i),
                emissions,
                reference: if top[0].text.is_empty() {
                    "a".to_string()
                } else {
                    top[0].text.clone()
                },
            }
        })
        .collect();
    (inputs, vocab, lm)
}

#[test]
fn single_trial_returns_that_sample() {
    let (inputs, vocab, lm) = tuner_fixture();
    let cfg = TuneConfig {
        trials: 1,
        beam: 8,
        nbest: 4,
        seed: 5,
        ..TuneConfig::default()
    };
    let out = tune_random_search(&inputs, &vocab, &lm, None, &cfg).unwrap();
    assert_eq!(out.table.len(), 1);
    let (a, b, _, _) = sample_trial_params(&cfg, 0);
    assert_eq!(out.best.alpha, a);
    assert_eq!(out.best.beta, b);
}

#[test]
fn tuner_is_deterministic_under_fixed_seed() {
    let (inputs, vocab, lm) = tuner_fixture();
    let cfg = TuneConfig {
        trials: 12,
        beam: 8,
        nbest: 4,
        seed: 9,
        tune_rescoring: true,
        ..TuneConfig::default()
    };
    let a = tune_random_search(&inputs, &vocab, &lm, Some(&lm), &cfg).unwrap();
    let b = tune_random_search(&inputs, &vocab, &lm, Some(&lm), &cfg).unwrap();
    assert_eq!(a.best.trial, b.best.trial);
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.table.len(), 12);
    // CSV has one row per trial plus header
    assert_eq!(a.to_csv().lines().count(), 13);
}

#[test]
fn tuner_beats_a_fixed_misfit_point_when_lm_is_disjoint() {
    // LM trained on disjoint text: alpha = 0 is optimal, so the tuned
    // winner must be at least as good as the fixed point (2.5, 0).
    let vocab = letter_vocab();
    let disjoint_lm = Lm::NGram(
        NGramModel::train(&["bbb bbb", "bbb"], 2, Smoothing::AddK { k: 0.5 }).unwrap(),
    );
    let inputs: Vec<TunerInput> = (0..4)
        .map(|i| {
            // sharply peaked emissions: the acoustic evidence is right
            let t = 5;
            let v = vocab.len() + 1;
            let mut rng = rng_from(derive_seed_n(3, "peaky", i));
            let mut data = vec![0.0; t * v];
            let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
            for (ti, &tok) in tokens.iter().enumerate() {
                for s in 0..v {
                    let p = if s == tok { 0.9 } else { 0.1 / (v - 1) as f64 };
                    data[ti * v + s] = p.ln();
                }
            }
            let emissions = Tensor::matrix(t, v, data).unwrap();
            let top = fused_beam_search(
                &emissions,
                &vocab,
                None,
                &FusionConfig::acoustic_only(8, 1),
            )
            .unwrap();
            TunerInput {
                id: format!("u{}", i),
                emissions,
                reference: if top[0].text.is_empty() {
                    "a".into()
                } else {
                    top[0].text.clone()
                },
            }
        })
        .collect();

    let cfg = TuneConfig {
        trials: 32,
        beam: 8,
        nbest: 4,
        seed: 13,
        ..TuneConfig::default()
    };
    let tuned = tune_random_search(&inputs, &vocab, &disjoint_lm, None, &cfg).unwrap();

    // direct evaluation of the fixed point
    let fixed = FusionConfig {
        alpha: 2.5,
        beta: 0.0,
        beam: 8,
        nbest: 4,
    };
    let mut pairs = Vec::new();
    for input in &inputs {
        let top = fused_beam_search(&input.emissions, &vocab, Some(&disjoint_lm), &fixed)
            .unwrap();
        pairs.push((input.reference.clone(), top[0].text.clone()));
    }
    let fixed_wer = murmur_core::eval::corpus_wer(
        pairs.iter().map(|(r, h)| (r.as_str(), h.as_str())),
    )
    .unwrap()
    .wer();
    assert!(
        tuned.best.dev_wer <= fixed_wer + 1e-12,
        "tuned {} vs fixed {}",
        tuned.best.dev_wer,
        fixed_wer
    );
}
