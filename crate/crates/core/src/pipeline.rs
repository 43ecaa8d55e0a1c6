//! Pipeline orchestration: pre-train on unlabeled audio, fine-tune on
//! labeled audio with CTC, tune fusion weights on dev, pseudo-label the
//! unlabeled split with the two-pass decoder, and train a final model on
//! gold plus pseudo-labeled data (seq2seq from scratch or CTC fine-tune).
//! Single pseudo-labeling iteration by design.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticConfig, AcousticModel};
use crate::corpus::grammar::{synth_generate, GrammarConfig, SyntheticGrammar};
use crate::corpus::vocab::Vocabulary;
use crate::corpus::{manifest, split_corpus, Corpus, Origin, Split, SplitPlan, Utterance};
use crate::ctc::{finetune_run, CtcModel, FinetuneConfig};
use crate::decode::{
    fused_beam_search, nbest_json_line, rescore, sample_trial_params, tune_random_search,
    FusionConfig, Hypothesis, TuneConfig, TuneOutcome, TunerInput,
};
use crate::error::{CoreError, Result};
use crate::eval::{corpus_wer, WerBreakdown};
use crate::lm::{perplexity, Lm, NGramModel, NeuralLm, NeuralLmConfig, Smoothing};
use crate::pretrain::{pretrain_run, PretrainConfig};
use crate::seq2seq::{s2s_beam_decode, s2s_train_run, S2sConfig, S2sModel};
use murmur_nn::checkpoint::{self, Dtype};
use murmur_nn::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    S2sScratch,
    CtcFt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub utterances: usize,
    pub labeled: usize,
    pub ratio: f64,
    pub dev: usize,
    pub test: usize,
    pub grammar: GrammarConfig,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            utterances: 530,
            labeled: 50,
            ratio: 8.6,
            dev: 20,
            test: 30,
            grammar: GrammarConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmParams {
    /// Size of the text-only LM training corpus drawn from the grammar
    /// (the desk stand-in for a separate language-model corpus).
    pub corpus_sentences: usize,
    pub order: usize,
    pub smoothing: Smoothing,
    pub neural: NeuralLmConfig,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            corpus_sentences: 1500,
            order: 4,
            smoothing: Smoothing::StupidBackoff { alpha: 0.4 },
            neural: NeuralLmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    /// Beam for evaluation decoding and tuning.
    pub eval_beam: usize,
    /// Beam for pseudo-labeling.
    pub pl_beam: usize,
    /// n-best kept for rescoring.
    pub nbest: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            eval_beam: 50,
            pl_beam: 200,
            nbest: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneParams {
    pub trials: usize,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub tune_rescoring: bool,
}

impl Default for TuneParams {
    fn default() -> Self {
        Self {
            trials: 128,
            alpha_range: (0.0, 5.0),
            beta_range: (-5.0, 5.0),
            tune_rescoring: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_pretrain: bool,
    pub no_selftrain: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusParams,
    pub acoustic: AcousticConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub lm: LmParams,
    pub decode: DecodeParams,
    pub tune: TuneParams,
    pub s2s: S2sConfig,
    /// Final-training budget for the ctc-ft variant.
    pub final_finetune: FinetuneConfig,
    /// Word-piece vocabulary target size for the s2s variant.
    pub s2s_wp_target: usize,
    pub variant: Variant,
    /// ctc-ft starts from the pre-trained checkpoint by default; set to
    /// continue from the fine-tuned checkpoint instead.
    pub ctc_ft_from_finetuned: bool,
    pub ablations: Ablations,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusParams::default(),
            acoustic: AcousticConfig::desk_default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            lm: LmParams::default(),
            decode: DecodeParams::default(),
            tune: TuneParams::default(),
            s2s: S2sConfig::default(),
            final_finetune: FinetuneConfig::default(),
            s2s_wp_target: 64,
            variant: Variant::CtcFt,
            ctc_ft_from_finetuned: false,
            ablations: Ablations::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.acoustic.validate()?;
        self.pretrain.validate()?;
        self.s2s.validate()?;
        let c = &self.corpus;
        let required = c.labeled
            + (c.ratio * c.labeled as f64).round() as usize
            + c.dev
            + c.test;
        if c.utterances < required {
            return Err(CoreError::InsufficientData {
                required,
                got: c.utterances,
            });
        }
        if c.labeled == 0 || c.dev == 0 || c.test == 0 {
            return Err(CoreError::invalid(
                "corpus needs labeled, dev, and test utterances",
            ));
        }
        Ok(())
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}

/// Letter vocabulary of the synthetic domain: grammar symbols incl. the
/// word separator, fixed independent of any particular split.
pub fn letter_vocabulary(grammar: &SyntheticGrammar) -> Result<Vocabulary> {
    let all: String = grammar
        .templates
        .keys()
        .map(|&c| c.to_string())
        .collect::<Vec<_>>()
        .join("");
    Vocabulary::letters(&[all.as_str()])
}

// ---------------------------------------------------------------------------
// Pseudo-labeling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub text: String,
    pub acoustic: f64,
    pub first_pass_lm: f64,
    pub rescore_lm: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub labels: BTreeMap<String, PseudoLabel>,
    pub empty_count: usize,
    /// One n-best JSON line per utterance (first-pass list, post-pruning).
    pub nbest_lines: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct RescoreWeights {
    pub alpha2: f64,
    pub beta2: f64,
}

/// Two-pass transcription of the unlabeled split: fused beam search, prune
/// to n-best, rescore with the strong LM, keep the top hypothesis. Every
/// utterance gets exactly one label; empty transcripts are retained and
/// counted, never dropped.
pub fn pseudo_label(
    model: &CtcModel,
    lm: &Lm,
    rescore_lm: Option<(&Lm, RescoreWeights)>,
    unlabeled: &[&Utterance],
    fusion: &FusionConfig,
) -> Result<PseudoLabels> {
    let per_utt: Vec<(String, PseudoLabel, String)> = unlabeled
        .par_iter()
        .map(|u| {
            let emissions = model.emissions(&u.samples)?;
            let nbest = fused_beam_search(&emissions, &model.vocab, Some(lm), fusion)?;
            let nbest_line = nbest_json_line(&u.id, &nbest)?;
            let top = match rescore_lm {
                Some((slm, w)) => {
                    let rescored = rescore(&nbest, slm, w.alpha2, w.beta2);
                    let first = &rescored[0];
                    PseudoLabel {
                        text: first.text.clone(),
                        acoustic: first.acoustic,
                        first_pass_lm: nbest
                            .iter()
                            .find(|h| h.tokens == first.tokens)
                            .map(|h| h.lm)
                            .unwrap_or(f64::NAN),
                        rescore_lm: Some(first.lm),
                        score: first.score,
                    }
                }
                None => {
                    let first = &nbest[0];
                    PseudoLabel {
                        text: first.text.clone(),
                        acoustic: first.acoustic,
                        first_pass_lm: first.lm,
                        rescore_lm: None,
                        score: first.score,
                    }
                }
            };
            Ok((u.id.clone(), top, nbest_line))
        })
        .collect::<Result<_>>()?;

    let mut out = PseudoLabels::default();
    for (id, label, nbest_line) in per_utt {
        if label.text.is_empty() {
            out.empty_count += 1;
        }
        out.labels.insert(id, label);
        out.nbest_lines.push(nbest_line);
    }
    if out.labels.len() != unlabeled.len() {
        return Err(CoreError::invalid("duplicate utterance ids in unlabeled set"));
    }
    Ok(out)
}

/// Union of the gold labeled set and the pseudo-labeled utterances, each
/// example tagged with its origin. Inputs must be id-disjoint.
pub fn combine_sets(
    labeled: &[&Utterance],
    unlabeled: &[&Utterance],
    pseudo: &PseudoLabels,
) -> Result<Vec<Utterance>> {
    let mut out: Vec<Utterance> = Vec::with_capacity(labeled.len() + unlabeled.len());
    let mut seen = std::collections::BTreeSet::new();
    for u in labeled {
        if !seen.insert(u.id.clone()) {
            return Err(CoreError::invalid(format!("duplicate id `{}`", u.id)));
        }
        let mut g = (*u).clone();
        g.origin = Some(Origin::Gold);
        out.push(g);
    }
    for u in unlabeled {
        if !seen.insert(u.id.clone()) {
            return Err(CoreError::invalid(format!(
                "id `{}` appears in both labeled and unlabeled sets",
                u.id
            )));
        }
        let label = pseudo.labels.get(&u.id).ok_or_else(|| {
            CoreError::invalid(format!("no pseudo-label for utterance `{}`", u.id))
        })?;
        let mut p = (*u).clone();
        p.transcript = Some(label.text.clone());
        p.origin = Some(Origin::Pseudo);
        out.push(p);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Final models and evaluation
// ---------------------------------------------------------------------------

pub enum FinalModel {
    Ctc(CtcModel),
    S2s(S2sModel),
}

impl FinalModel {
    pub fn nbest(
        &self,
        utt: &Utterance,
        lm: Option<&Lm>,
        fusion: &FusionConfig,
    ) -> Result<Vec<Hypothesis>> {
        match self {
            FinalModel::Ctc(m) => {
                let emissions = m.emissions(&utt.samples)?;
                fused_beam_search(&emissions, &m.vocab, lm, fusion)
            }
            FinalModel::S2s(m) => s2s_beam_decode(m, &utt.samples, lm, fusion, None),
        }
    }

    /// Two-pass top-1 transcript.
    pub fn transcribe(
        &self,
        utt: &Utterance,
        lm: Option<&Lm>,
        rescore_lm: Option<(&Lm, RescoreWeights)>,
        fusion: &FusionConfig,
    ) -> Result<String> {
        let nbest = self.nbest(utt, lm, fusion)?;
        Ok(match rescore_lm {
            Some((slm, w)) if !nbest.is_empty() => {
                rescore(&nbest, slm, w.alpha2, w.beta2)[0].text.clone()
            }
            _ => nbest.first().map(|h| h.text.clone()).unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TunedWeights {
    pub alpha: f64,
    pub beta: f64,
    pub alpha2: Option<f64>,
    pub beta2: Option<f64>,
    pub dev_wer: f64,
}

/// Tune fusion weights for a final model on the dev split. CTC models get
/// the exact per-trial search over cached emissions; seq2seq models decode
/// a wide acoustic-only n-best once and re-ranks it per trial.
pub fn tune_final_model(
    model: &FinalModel,
    dev: &[&Utterance],
    lm: &Lm,
    rescore_lm: Option<&Lm>,
    tune: &TuneParams,
    decode: &DecodeParams,
    seed: u64,
) -> Result<TunedWeights> {
    if dev.is_empty() {
        return Err(CoreError::invalid("tuner needs a non-empty dev set"));
    }
    let cfg = TuneConfig {
        trials: tune.trials,
        alpha_range: tune.alpha_range,
        beta_range: tune.beta_range,
        tune_rescoring: tune.tune_rescoring && rescore_lm.is_some(),
        beam: decode.eval_beam,
        nbest: decode.nbest,
        seed,
    };
    match model {
        FinalModel::Ctc(m) => {
            let inputs: Vec<TunerInput> = dev
                .par_iter()
                .map(|u| {
                    Ok(TunerInput {
                        id: u.id.clone(),
                        emissions: m.emissions(&u.samples)?,
                        reference: u
                            .transcript
                            .clone()
                            .ok_or_else(|| CoreError::invalid("dev utterance lacks text"))?,
                    })
                })
                .collect::<Result<_>>()?;
            let out = tune_random_search(&inputs, &m.vocab, lm, rescore_lm, &cfg)?;
            Ok(tuned_from(&out))
        }
        FinalModel::S2s(m) => {
            // one wide acoustic-only pass, then per-trial re-ranking
            let nbests: Vec<(String, Vec<Hypothesis>)> = dev
                .par_iter()
                .map(|u| {
                    let hyps = s2s_beam_decode(
                        m,
                        &u.samples,
                        Some(lm),
                        &FusionConfig {
                            alpha: 0.0,
                            beta: 0.0,
                            beam: decode.eval_beam,
                            nbest: decode.nbest,
                        },
                        None,
                    )?;
                    Ok((
                        u.transcript
                            .clone()
                            .ok_or_else(|| CoreError::invalid("dev utterance lacks text"))?,
                        hyps,
                    ))
                })
                .collect::<Result<_>>()?;
            // strong-LM scores computed once per candidate
            let strong: Vec<Vec<f64>> = nbests
                .par_iter()
                .map(|(_, hyps)| {
                    hyps.iter()
                        .map(|h| {
                            rescore_lm
                                .map(|slm| slm.sentence_logprob(&h.text))
                                .unwrap_or(0.0)
                        })
                        .collect()
                })
                .collect();
            let mut best: Option<TunedWeights> = None;
            let mut table = Vec::new();
            for trial in 0..cfg.trials {
                let (alpha, beta, alpha2, beta2) = sample_trial_params(&cfg, trial);
                let mut pairs = Vec::with_capacity(nbests.len());
                for ((reference, hyps), slm) in nbests.iter().zip(&strong) {
                    let mut top: Option<(f64, &Hypothesis)> = None;
                    for (h, &s) in hyps.iter().zip(slm) {
                        let mut score = h.acoustic + alpha * h.lm + beta * h.words as f64;
                        if cfg.tune_rescoring {
                            score += alpha2 * s + beta2 * h.words as f64;
                        }
                        if top.map_or(true, |(ts, _)| score > ts) {
                            top = Some((score, h));
                        }
                    }
                    let text = top.map(|(_, h)| h.text.clone()).unwrap_or_default();
                    pairs.push((reference.clone(), text));
                }
                let wer =
                    corpus_wer(pairs.iter().map(|(r, h)| (r.as_str(), h.as_str())))?.wer();
                let weights = TunedWeights {
                    alpha,
                    beta,
                    alpha2: cfg.tune_rescoring.then_some(alpha2),
                    beta2: cfg.tune_rescoring.then_some(beta2),
                    dev_wer: wer,
                };
                table.push(weights);
                if best.map_or(true, |b| wer < b.dev_wer) {
                    best = Some(weights);
                }
            }
            Ok(best.expect("at least one trial"))
        }
    }
}

fn tuned_from(out: &TuneOutcome) -> TunedWeights {
    TunedWeights {
        alpha: out.best.alpha,
        beta: out.best.beta,
        alpha2: out.best.alpha2,
        beta2: out.best.beta2,
        dev_wer: out.best.dev_wer,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ArmEval {
    pub wer_with_lm: f64,
    pub wer_no_lm: f64,
}

/// Paired with/without-LM evaluation on one split. The no-LM row uses
/// alpha = beta = 0 at beam 1 (prefix search for CTC, greedy beam for
/// seq2seq); both rows decode identical utterances.
pub fn evaluate_arm(
    model: &FinalModel,
    utts: &[&Utterance],
    refs: &BTreeMap<String, String>,
    lm: &Lm,
    rescore_lm: Option<&Lm>,
    tuned: &TunedWeights,
    decode: &DecodeParams,
) -> Result<ArmEval> {
    if utts.is_empty() {
        return Err(CoreError::invalid("evaluation set is empty"));
    }
    let fusion = FusionConfig {
        alpha: tuned.alpha,
        beta: tuned.beta,
        beam: decode.eval_beam,
        nbest: decode.nbest,
    };
    let rw = match (rescore_lm, tuned.alpha2, tuned.beta2) {
        (Some(slm), Some(a2), Some(b2)) => Some((
            slm,
            RescoreWeights {
                alpha2: a2,
                beta2: b2,
            },
        )),
        _ => None,
    };
    let pairs: Vec<(String, String, String)> = utts
        .par_iter()
        .map(|u| {
            let reference = refs
                .get(&u.id)
                .cloned()
                .or_else(|| u.transcript.clone())
                .ok_or_else(|| {
                    CoreError::invalid(format!("no reference for utterance `{}`", u.id))
                })?;
            let with_lm = model.transcribe(u, Some(lm), rw, &fusion)?;
            let no_lm =
                model.transcribe(u, None, None, &FusionConfig::acoustic_only(1, 1))?;
            Ok((reference, with_lm, no_lm))
        })
        .collect::<Result<_>>()?;
    let with_lm: WerBreakdown =
        corpus_wer(pairs.iter().map(|(r, h, _)| (r.as_str(), h.as_str())))?;
    let no_lm: WerBreakdown =
        corpus_wer(pairs.iter().map(|(r, _, h)| (r.as_str(), h.as_str())))?;
    Ok(ArmEval {
        wer_with_lm: with_lm.wer(),
        wer_no_lm: no_lm.wer(),
    })
}

// ---------------------------------------------------------------------------
// The staged pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineRun {
    pub stages: Vec<StageRecord>,
    pub dev: ArmEval,
    pub test: ArmEval,
    pub tuned: TunedWeights,
}

struct StageLogger<'a> {
    out_dir: &'a Path,
    stages: Vec<StageRecord>,
    metrics: Vec<String>,
}

impl<'a> StageLogger<'a> {
    fn new(out_dir: &'a Path) -> Self {
        Self {
            out_dir,
            stages: Vec::new(),
            metrics: Vec::new(),
        }
    }

    fn stage_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .join(format!("stage-{}-{}", self.stages.len() + 1, name));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn record(
        &mut self,
        name: &str,
        started: Instant,
        artifacts: Vec<PathBuf>,
        summary: serde_json::Value,
    ) {
        let record = StageRecord {
            name: name.to_string(),
            artifacts,
            seconds: started.elapsed().as_secs_f64(),
            summary: summary.clone(),
        };
        self.metrics
            .push(serde_json::json!({"stage": name, "summary": summary}).to_string());
        self.stages.push(record);
    }

    fn finish(&self) -> Result<()> {
        std::fs::write(
            self.out_dir.join("metrics.jsonl"),
            self.metrics.join("\n") + "\n",
        )?;
        Ok(())
    }
}

/// Execute one arm of the pipeline end to end, writing stage artifacts
/// under `out_dir`. Deterministic given the config (all stage seeds derive
/// from the master seed).
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineRun> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut log = StageLogger::new(out_dir);

    // stage 1: corpus
    let started = Instant::now();
    let grammar = SyntheticGrammar::new(&cfg.corpus.grammar).map_err(|e| e.in_stage("corpus"))?;
    let full = synth_generate(
        &grammar,
        cfg.stage_seed("corpus"),
        cfg.corpus.utterances,
        &SplitPlan {
            labeled: 1.0,
            unlabeled: 0.0,
            dev: 0.0,
            test: 0.0,
        },
    )
    .map_err(|e| e.in_stage("corpus"))?;
    let corpus = split_corpus(
        &full,
        cfg.corpus.labeled,
        cfg.corpus.ratio,
        cfg.corpus.dev,
        cfg.corpus.test,
        cfg.stage_seed("split"),
    )
    .map_err(|e| e.in_stage("corpus"))?;
    let dir = log.stage_dir("corpus")?;
    let manifest_path = dir.join("corpus.jsonl");
    manifest::save(&corpus, &manifest_path, manifest::AudioMode::Inline)
        .map_err(|e| e.in_stage("corpus"))?;
    let refs_path = dir.join("refs.jsonl");
    let refs_blob: String = corpus
        .hidden_refs
        .iter()
        .map(|(id, text)| serde_json::json!({"id": id, "text": text}).to_string() + "\n")
        .collect();
    std::fs::write(&refs_path, refs_blob)?;
    log.record(
        "corpus",
        started,
        vec![manifest_path, refs_path],
        serde_json::json!({
            "labeled": corpus.split_len(Split::Labeled),
            "unlabeled": corpus.split_len(Split::Unlabeled),
            "dev": corpus.split_len(Split::Dev),
            "test": corpus.split_len(Split::Test),
        }),
    );

    let labeled: Vec<&Utterance> = corpus.split(Split::Labeled).collect();
    let unlabeled: Vec<&Utterance> = corpus.split(Split::Unlabeled).collect();
    let dev: Vec<&Utterance> = corpus.split(Split::Dev).collect();
    let test: Vec<&Utterance> = corpus.split(Split::Test).collect();
    let letters = letter_vocabulary(&grammar)?;

    // stage 2: pre-training (or random initialization)
    let started = Instant::now();
    let mut acoustic = AcousticModel::new(cfg.acoustic.clone(), cfg.stage_seed("model-init"))
        .map_err(|e| e.in_stage("pretrain"))?;
    let dir = log.stage_dir("pretrain")?;
    let ckpt = dir.join("pretrained.ckpt");
    let pretrain_summary = if cfg.ablations.no_pretrain {
        serde_json::json!({"skipped": true})
    } else {
        let mut pcfg = cfg.pretrain.clone();
        pcfg.seed = cfg.stage_seed("pretrain");
        let metrics = pretrain_run(&mut acoustic, &corpus, &pcfg)
            .map_err(|e| e.in_stage("pretrain"))?;
        let lines: String = metrics
            .iter()
            .map(|m| serde_json::to_string(m).unwrap() + "\n")
            .collect();
        std::fs::write(dir.join("metrics.jsonl"), lines)?;
        serde_json::json!({
            "epochs": metrics.len(),
            "final_loss": metrics.last().map(|m| m.loss),
            "final_acc": metrics.last().map(|m| m.contrastive_acc),
        })
    };
    checkpoint::save(&acoustic.params, &ckpt, Dtype::F64)?;
    log.record("pretrain", started, vec![ckpt.clone()], pretrain_summary);

    // stage 3: CTC fine-tuning on the labeled split
    let started = Instant::now();
    let mut ctc_model = CtcModel::with_new_head(
        AcousticModel::from_params(cfg.acoustic.clone(), checkpoint::load(&ckpt)?)?,
        letters.clone(),
        cfg.stage_seed("head"),
    )?;
    let mut ftcfg = cfg.finetune.clone();
    ftcfg.seed = cfg.stage_seed("finetune");
    let ft_metrics = finetune_run(&mut ctc_model, &labeled, &dev, &ftcfg)
        .map_err(|e| e.in_stage("finetune"))?;
    let dir = log.stage_dir("finetune")?;
    let ft_ckpt = dir.join("finetuned.ckpt");
    checkpoint::save(&ctc_model.acoustic.params, &ft_ckpt, Dtype::F64)?;
    let lines: String = ft_metrics
        .iter()
        .map(|m| serde_json::to_string(m).unwrap() + "\n")
        .collect();
    std::fs::write(dir.join("metrics.jsonl"), lines)?;
    log.record(
        "finetune",
        started,
        vec![ft_ckpt.clone()],
        serde_json::json!({"dev_greedy_wer": ft_metrics.last().map(|m| m.dev_greedy_wer)}),
    );

    // stage 4: language models on the grammar text corpus
    let started = Instant::now();
    let lm_texts = grammar.sample_text(cfg.stage_seed("lm-corpus"), cfg.lm.corpus_sentences);
    let lm_refs: Vec<&str> = lm_texts.iter().map(|s| s.as_str()).collect();
    let ngram = NGramModel::train(&lm_refs, cfg.lm.order, cfg.lm.smoothing)
        .map_err(|e| e.in_stage("lm-train"))?;
    let mut ncfg = cfg.lm.neural.clone();
    ncfg.seed = cfg.stage_seed("neural-lm");
    let mut neural_words = ngram.vocab().to_vec();
    neural_words.sort_unstable();
    let mut neural = NeuralLm::new(neural_words, ncfg).map_err(|e| e.in_stage("lm-train"))?;
    neural.train(&lm_refs).map_err(|e| e.in_stage("lm-train"))?;
    let dir = log.stage_dir("lm")?;
    let ngram_path = dir.join("ngram.lm");
    crate::lm::save_ngram(&ngram, &ngram_path)?;
    neural.save(&dir, "neural")?;
    let first_lm = Lm::NGram(ngram);
    let strong_lm = Lm::Neural(neural);
    let dev_texts: Vec<&str> = dev.iter().filter_map(|u| u.transcript.as_deref()).collect();
    let pp_ngram = perplexity(&first_lm, &dev_texts)?;
    let pp_neural = perplexity(&strong_lm, &dev_texts)?;
    log.record(
        "lm",
        started,
        vec![ngram_path],
        serde_json::json!({"ngram_dev_ppl": pp_ngram, "neural_dev_ppl": pp_neural}),
    );

    // stage 5: tune fusion weights on dev with the fine-tuned model
    let started = Instant::now();
    let ft_final = FinalModel::Ctc(CtcModel::from_parts(
        AcousticModel::from_params(cfg.acoustic.clone(), checkpoint::load(&ft_ckpt)?)?,
        letters.clone(),
    )?);
    let tuned = tune_final_model(
        &ft_final,
        &dev,
        &first_lm,
        Some(&strong_lm),
        &cfg.tune,
        &cfg.decode,
        cfg.stage_seed("tune"),
    )
    .map_err(|e| e.in_stage("tune"))?;
    let dir = log.stage_dir("tune")?;
    let tuned_path = dir.join("best.json");
    std::fs::write(&tuned_path, serde_json::to_string_pretty(&tuned)?)?;
    log.record(
        "tune",
        started,
        vec![tuned_path],
        serde_json::to_value(tuned)?,
    );

    // stage 6: pseudo-labeling (exactly one iteration)
    let started = Instant::now();
    let dir = log.stage_dir("pseudo-label")?;
    let pseudo = if cfg.ablations.no_selftrain {
        None
    } else {
        let FinalModel::Ctc(ref ctc_ref) = ft_final else {
            unreachable!()
        };
        let fusion = FusionConfig {
            alpha: tuned.alpha,
            beta: tuned.beta,
            beam: cfg.decode.pl_beam,
            nbest: cfg.decode.nbest,
        };
        let rw = tuned.alpha2.zip(tuned.beta2).map(|(alpha2, beta2)| {
            (&strong_lm, RescoreWeights { alpha2, beta2 })
        });
        let labels = pseudo_label(ctc_ref, &first_lm, rw, &unlabeled, &fusion)
            .map_err(|e| e.in_stage("pseudo-label"))?;
        let blob: String = labels
            .labels
            .iter()
            .map(|(id, l)| serde_json::json!({"id": id, "label": l}).to_string() + "\n")
            .collect();
        std::fs::write(dir.join("pseudo.jsonl"), blob)?;
        std::fs::write(dir.join("nbest.jsonl"), labels.nbest_lines.join("\n") + "\n")?;
        // pseudo-label quality against hidden references
        let pl_wer = corpus_wer(labels.labels.iter().filter_map(|(id, l)| {
            corpus
                .hidden_refs
                .get(id)
                .map(|r| (r.as_str(), l.text.as_str()))
        }))
        .map(|b| b.wer())
        .unwrap_or(f64::NAN);
        log.record(
            "pseudo-label",
            started,
            vec![dir.join("pseudo.jsonl")],
            serde_json::json!({
                "count": labels.labels.len(),
                "empty": labels.empty_count,
                "wer_vs_hidden_refs": pl_wer,
            }),
        );
        Some(labels)
    };
    if pseudo.is_none() {
        log.record(
            "pseudo-label",
            started,
            vec![],
            serde_json::json!({"skipped": true}),
        );
    }

    // stage 7: final model
    let started = Instant::now();
    let dir = log.stage_dir("final")?;
    let final_model = match &pseudo {
        None => {
            // self-training disabled: the final model IS the fine-tuned one
            let final_ckpt = dir.join("final.ckpt");
            std::fs::copy(&ft_ckpt, &final_ckpt)?;
            log.record(
                "final",
                started,
                vec![final_ckpt],
                serde_json::json!({"variant": "finetuned-passthrough"}),
            );
            ft_final
        }
        Some(pseudo) => {
            let train_set = combine_sets(&labeled, &unlabeled, pseudo)?;
            let train_refs: Vec<&Utterance> = train_set.iter().collect();
            let combined_path = dir.join("combined.jsonl");
            manifest::save(
                &Corpus {
                    utterances: train_set.clone(),
                    hidden_refs: BTreeMap::new(),
                },
                &combined_path,
                manifest::AudioMode::Inline,
            )?;
            match cfg.variant {
                Variant::CtcFt => {
                    let start_ckpt = if cfg.ctc_ft_from_finetuned {
                        &ft_ckpt
                    } else {
                        &ckpt
                    };
                    let mut model = CtcModel::with_new_head(
                        AcousticModel::from_params(
                            cfg.acoustic.clone(),
                            checkpoint::load(start_ckpt)?,
                        )?,
                        letters.clone(),
                        cfg.stage_seed("final-head"),
                    )?;
                    let mut fcfg = cfg.final_finetune.clone();
                    fcfg.seed = cfg.stage_seed("final-train");
                    let metrics = finetune_run(&mut model, &train_refs, &dev, &fcfg)
                        .map_err(|e| e.in_stage("final-train"))?;
                    let final_ckpt = dir.join("final.ckpt");
                    checkpoint::save(&model.acoustic.params, &final_ckpt, Dtype::F64)?;
                    log.record(
                        "final",
                        started,
                        vec![final_ckpt, combined_path],
                        serde_json::json!({
                            "variant": "ctc-ft",
                            "dev_greedy_wer": metrics.last().map(|m| m.dev_greedy_wer),
                        }),
                    );
                    FinalModel::Ctc(model)
                }
                Variant::S2sScratch => {
                    // word pieces from the gold transcripts; the domain
                    // alphabet is guaranteed so pseudo-labels stay encodable
                    let gold_texts: Vec<&str> = labeled
                        .iter()
                        .filter_map(|u| u.transcript.as_deref())
                        .collect();
                    let alphabet: Vec<char> =
                        grammar.templates.keys().copied().collect();
                    let wp = crate::corpus::vocab::bpe_train_with_alphabet(
                        &gold_texts,
                        &alphabet,
                        cfg.s2s_wp_target,
                    )
                    .map_err(|e| e.in_stage("final-train"))?;
                    let mut scfg = cfg.s2s.clone();
                    scfg.seed = cfg.stage_seed("final-train");
                    let mut model =
                        S2sModel::new(scfg, wp, cfg.stage_seed("final-init"))?;
                    let metrics = s2s_train_run(&mut model, &train_refs, &dev)
                        .map_err(|e| e.in_stage("final-train"))?;
                    let final_ckpt = dir.join("final.ckpt");
                    checkpoint::save(&model.params, &final_ckpt, Dtype::F64)?;
                    log.record(
                        "final",
                        started,
                        vec![final_ckpt, combined_path],
                        serde_json::json!({
                            "variant": "s2s-scratch",
                            "dev_loss": metrics.last().map(|m| m.dev_loss),
                        }),
                    );
                    FinalModel::S2s(model)
                }
            }
        }
    };

    // stage 8: re-tune for the final model and evaluate dev/test
    let started = Instant::now();
    let final_tuned = tune_final_model(
        &final_model,
        &dev,
        &first_lm,
        Some(&strong_lm),
        &cfg.tune,
        &cfg.decode,
        cfg.stage_seed("final-tune"),
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    let dev_eval = evaluate_arm(
        &final_model,
        &dev,
        &corpus.hidden_refs,
        &first_lm,
        Some(&strong_lm),
        &final_tuned,
        &cfg.decode,
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    let test_eval = evaluate_arm(
        &final_model,
        &test,
        &corpus.hidden_refs,
        &first_lm,
        Some(&strong_lm),
        &final_tuned,
        &cfg.decode,
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    let dir = log.stage_dir("eval")?;
    let eval_path = dir.join("eval.json");
    std::fs::write(
        &eval_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "tuned": final_tuned,
            "dev": dev_eval,
            "test": test_eval,
        }))?,
    )?;
    log.record(
        "eval",
        started,
        vec![eval_path],
        serde_json::json!({"dev": dev_eval, "test": test_eval}),
    );

    log.finish()?;
    Ok(PipelineRun {
        stages: log.stages,
        dev: dev_eval,
        test: test_eval,
        tuned: final_tuned,
    })
}
