//! CTC: exact forward-algorithm loss over the blank-interleaved target
//! lattice in log space, alpha-beta gradients, greedy decoding, and the
//! fine-tuning loop that attaches a letter output head to the acoustic
//! model. The blank is always the last emission column.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticModel;
use crate::corpus::vocab::Vocabulary;
use crate::corpus::Utterance;
use crate::error::{CoreError, Result};
use crate::eval;
use murmur_nn::rng::{derive_seed, derive_seed_n, rng_from};
use murmur_nn::{
    adam_step, AdamConfig, Binder, CustomOp, Init, NodeId, OptimizerState, Tape, Tensor,
};

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

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Frames required for a target: |target| plus one per adjacent repeat.
pub fn required_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Blank-interleaved lattice labels: blank, y1, blank, y2, ..., blank.
fn lattice(target: &[usize], blank: usize) -> Vec<usize> {
    let mut states = Vec::with_capacity(2 * target.len() + 1);
    states.push(blank);
    for &y in target {
        states.push(y);
        states.push(blank);
    }
    states
}

fn check_instance(emissions: &Tensor, target: &[usize], blank: usize) -> Result<(usize, usize)> {
    let (t_len, v) = emissions.dims2().map_err(CoreError::Nn)?;
    if blank >= v {
        return Err(CoreError::invalid(format!(
            "blank index {} outside vocabulary of size {}",
            blank, v
        )));
    }
    if target.iter().any(|&y| y >= v || y == blank) {
        return Err(CoreError::invalid(
            "target contains blank or out-of-range token",
        ));
    }
    let required = required_frames(target);
    if t_len < required {
        return Err(CoreError::InfeasibleTarget {
            required,
            got: t_len,
        });
    }
    Ok((t_len, v))
}

fn forward_alphas(emissions: &Tensor, states: &[usize]) -> Vec<Vec<f64>> {
    let t_len = emissions.shape()[0];
    let s_len = states.len();
    let mut alpha = vec![vec![NEG_INF; s_len]; t_len];
    alpha[0][0] = emissions.at2(0, states[0]);
    if s_len > 1 {
        alpha[0][1] = emissions.at2(0, states[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[t - 1][s];
            let step = if s >= 1 { alpha[t - 1][s - 1] } else { NEG_INF };
            let skip = if s >= 2 && states[s] != states[s - 2] && s % 2 == 1 {
                alpha[t - 1][s - 2]
            } else {
                NEG_INF
            };
            let prev = lse3(stay, step, skip);
            alpha[t][s] = if prev == NEG_INF {
                NEG_INF
            } else {
                prev + emissions.at2(t, states[s])
            };
        }
    }
    alpha
}

/// Negative log-likelihood of the target under the emission log-probs.
pub fn ctc_loss_value(emissions: &Tensor, target: &[usize], blank: usize) -> Result<f64> {
    check_instance(emissions, target, blank)?;
    let states = lattice(target, blank);
    let alpha = forward_alphas(emissions, &states);
    let t_last = emissions.shape()[0] - 1;
    let s_len = states.len();
    let mut logp = alpha[t_last][s_len - 1];
    if s_len > 1 {
        logp = lse2(logp, alpha[t_last][s_len - 2]);
    }
    if logp == NEG_INF {
        return Err(CoreError::invalid(
            "no valid alignment despite feasible lengths (emissions contain -inf)",
        ));
    }
    Ok(-logp)
}

struct CtcLossOp {
    target: Vec<usize>,
    blank: usize,
}

impl CustomOp for CtcLossOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(
        &self,
        upstream: &Tensor,
        inputs: &[&Tensor],
    ) -> murmur_nn::Result<Vec<Tensor>> {
        let emissions = inputs[0];
        let (t_len, v) = emissions.dims2()?;
        let states = lattice(&self.target, self.blank);
        let s_len = states.len();
        let alpha = forward_alphas(emissions, &states);

        let mut beta = vec![vec![NEG_INF; s_len]; t_len];
        beta[t_len - 1][s_len - 1] = 0.0;
        if s_len > 1 {
            beta[t_len - 1][s_len - 2] = 0.0;
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let stay = beta[t + 1][s] + emissions.at2(t + 1, states[s]);
                let step = if s + 1 < s_len {
                    beta[t + 1][s + 1] + emissions.at2(t + 1, states[s + 1])
                } else {
                    NEG_INF
                };
                let skip = if s + 2 < s_len && states[s + 2] != states[s] && (s + 2) % 2 == 1 {
                    beta[t + 1][s + 2] + emissions.at2(t + 1, states[s + 2])
                } else {
                    NEG_INF
                };
                beta[t][s] = lse3(stay, step, skip);
            }
        }

        let mut logp = alpha[t_len - 1][s_len - 1];
        if s_len > 1 {
            logp = lse2(logp, alpha[t_len - 1][s_len - 2]);
        }

        let scale = upstream.item();
        let mut grad = vec![0.0; t_len * v];
        for t in 0..t_len {
            for (s, &lab) in states.iter().enumerate() {
                let g = alpha[t][s] + beta[t][s];
                if g != NEG_INF {
                    grad[t * v + lab] -= (g - logp).exp() * scale;
                }
            }
        }
        Ok(vec![Tensor::matrix(t_len, v, grad)?])
    }
}

/// CTC loss as a differentiable node over emission log-probs.
pub fn ctc_loss_node(
    tape: &mut Tape,
    emissions: NodeId,
    target: &[usize],
    blank: usize,
) -> Result<NodeId> {
    let value = ctc_loss_value(tape.value(emissions), target, blank)?;
    Ok(tape.custom(
        &[emissions],
        Tensor::scalar(value),
        Box::new(CtcLossOp {
            target: target.to_vec(),
            blank,
        }),
    )?)
}

/// Best-path decode: per-frame argmax, collapse adjacent repeats, drop
/// blanks.
pub fn ctc_greedy_decode(emissions: &Tensor, blank: usize) -> Vec<usize> {
    let (t_len, v) = emissions.dims2().expect("emission matrix");
    let mut out = Vec::new();
    let mut prev = blank;
    for t in 0..t_len {
        let row = emissions.row(t);
        let mut best = 0;
        for k in 1..v {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best != blank && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Emission rows must log-sum-exp to 0 within 1e-6.
pub fn validate_emissions(emissions: &Tensor) -> Result<()> {
    let (t_len, _v) = emissions.dims2().map_err(CoreError::Nn)?;
    for t in 0..t_len {
        let row = emissions.row(t);
        let m = row.iter().cloned().fold(NEG_INF, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        if lse.abs() > 1e-6 {
            return Err(CoreError::invalid(format!(
                "emission row {} log-sum-exps to {}, expected 0",
                t, lse
            )));
        }
    }
    Ok(())
}

/// Binary export of an emission matrix: `T: u32 LE, V: u32 LE`, then
/// `T*V` row-major f32 LE values.
pub fn emissions_to_bytes(emissions: &Tensor) -> Result<Vec<u8>> {
    let (t_len, v) = emissions.dims2().map_err(CoreError::Nn)?;
    let mut out = Vec::with_capacity(8 + t_len * v * 4);
    out.extend_from_slice(&(t_len as u32).to_le_bytes());
    out.extend_from_slice(&(v as u32).to_le_bytes());
    for &x in emissions.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn emissions_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(CoreError::parse("emissions", "truncated header"));
    }
    let t_len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let v = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let numel = t_len
        .checked_mul(v)
        .ok_or_else(|| CoreError::parse("emissions", "size overflow"))?;
    if numel > (1 << 24) {
        return Err(CoreError::parse("emissions", "matrix too large"));
    }
    if bytes.len() != 8 + numel * 4 {
        return Err(CoreError::parse(
            "emissions",
            format!("expected {} bytes, got {}", 8 + numel * 4, bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::matrix(t_len, v, data).map_err(murmur_nn::NnError::from)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Feature-encoder parameters receive no updates for this many initial
    /// epochs.
    pub freeze_encoder_epochs: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            lr: 1e-3,
            freeze_encoder_epochs: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_greedy_wer: f64,
}

/// Acoustic model plus letter vocabulary and CTC output head.
pub struct CtcModel {
    pub acoustic: AcousticModel,
    pub vocab: Vocabulary,
}

impl CtcModel {
    /// Attach a randomly initialized output head (letters + blank) to an
    /// acoustic model (pre-trained or fresh).
    pub fn with_new_head(
        mut acoustic: AcousticModel,
        vocab: Vocabulary,
        head_seed: u64,
    ) -> Result<Self> {
        let dim = acoustic.cfg.context.dim;
        let out = vocab.len() + 1;
        let old_seed = acoustic.params.seed();
        acoustic.params.set_seed(derive_seed(head_seed, "ctc-head"));
        if acoustic.params.contains("head.w") {
            acoustic.params.remove("head.w");
            acoustic.params.remove("head.b");
        }
        acoustic.params.create("head.w", vec![dim, out], Init::FanIn(dim))?;
        acoustic.params.create("head.b", vec![out], Init::Zeros)?;
        acoustic.params.set_seed(old_seed);
        Ok(Self { acoustic, vocab })
    }

    pub fn from_parts(acoustic: AcousticModel, vocab: Vocabulary) -> Result<Self> {
        if !acoustic.params.contains("head.w") {
            return Err(CoreError::invalid("acoustic model has no CTC head"));
        }
        let head_cols = acoustic.params.get("head.w")?.shape()[1];
        if head_cols != vocab.len() + 1 {
            return Err(CoreError::invalid(format!(
                "CTC head emits {} symbols but vocabulary needs {} (+1 blank)",
                head_cols,
                vocab.len() + 1
            )));
        }
        Ok(Self { acoustic, vocab })
    }

    pub fn blank(&self) -> usize {
        self.vocab.len()
    }

    fn forward_emissions(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        samples: &[f32],
    ) -> Result<NodeId> {
        let z = self.acoustic.forward_encoder(tape, binder, samples)?;
        let c = self.acoustic.forward_context(tape, binder, z, None)?;
        let w = binder.param(tape, "head.w")?;
        let b = binder.param(tape, "head.b")?;
        let logits = tape.affine(c, w, b)?;
        Ok(tape.log_softmax_rows(logits)?)
    }

    /// Emission log-probabilities `[frames, letters + 1]` for one utterance.
    pub fn emissions(&self, samples: &[f32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.acoustic.params);
        let e = self.forward_emissions(&mut tape, &mut binder, samples)?;
        Ok(tape.value(e).clone())
    }

    pub fn greedy_transcript(&self, samples: &[f32]) -> Result<String> {
        let e = self.emissions(samples)?;
        let ids: Vec<u32> = ctc_greedy_decode(&e, self.blank())
            .into_iter()
            .map(|t| t as u32)
            .collect();
        self.vocab.decode(&ids)
    }

    fn encode_target(&self, text: &str) -> Result<Vec<usize>> {
        Ok(self
            .vocab
            .encode(text)?
            .into_iter()
            .map(|t| t as usize)
            .collect())
    }
}

/// Greedy dev WER of the current parameters.
pub fn dev_greedy_wer(model: &CtcModel, dev: &[&Utterance]) -> Result<f64> {
    let hyps: Vec<(String, String)> = dev
        .par_iter()
        .map(|u| {
            let hyp = model.greedy_transcript(&u.samples)?;
            let reference = u.transcript.clone().ok_or_else(|| {
                CoreError::invalid(format!("dev utterance {} lacks a transcript", u.id))
            })?;
            Ok((reference, hyp))
        })
        .collect::<Result<_>>()?;
    Ok(eval::corpus_wer(hyps.iter().map(|(r, h)| (r.as_str(), h.as_str())))?.wer())
}

/// CTC fine-tuning over a training list. Per-utterance losses are
/// normalized by target length and averaged; gradients are reduced in
/// utterance order so runs are bit-reproducible at any thread count.
pub fn finetune_run(
    model: &mut CtcModel,
    train: &[&Utterance],
    dev: &[&Utterance],
    cfg: &FinetuneConfig,
) -> Result<Vec<FinetuneMetrics>> {
    if train.is_empty() {
        return Err(CoreError::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(CoreError::invalid("batch size must be >= 1"));
    }
    // validate targets up front: encodable and feasible
    let blank = model.blank();
    let mut targets: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for u in train {
        let text = u.transcript.as_deref().ok_or_else(|| {
            CoreError::invalid(format!("training utterance {} lacks a transcript", u.id))
        })?;
        let target = model.encode_target(text)?;
        let frames = model
            .acoustic
            .cfg
            .encoder
            .output_len(u.samples.len())?;
        let required = required_frames(&target);
        if frames < required {
            return Err(CoreError::InfeasibleTarget {
                required,
                got: frames,
            });
        }
        targets.insert(u.id.as_str(), target);
    }

    let mut state = OptimizerState::new(AdamConfig::with_lr(cfg.lr));
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom as _;
        order.shuffle(&mut rng_from(derive_seed_n(cfg.seed, "ft-order", epoch as u64)));

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<(BTreeMap<String, Tensor>, f64)> = chunk
                .par_iter()
                .map(|&i| {
                    let u = train[i];
                    let target = &targets[u.id.as_str()];
                    let mut tape = Tape::new();
                    let mut binder = Binder::new(&model.acoustic.params);
                    let e = model.forward_emissions(&mut tape, &mut binder, &u.samples)?;
                    let nll = ctc_loss_node(&mut tape, e, target, blank)?;
                    let loss = tape.scale(nll, 1.0 / target.len().max(1) as f64)?;
                    let grads = tape.backward(loss)?;
                    let mut by_name = BTreeMap::new();
                    for (name, &node) in binder.bound() {
                        if let Some(t) = grads.get(node) {
                            by_name.insert(name.clone(), t.clone());
                        }
                    }
                    Ok((by_name, tape.value(loss).item()))
                })
                .collect::<Result<_>>()?;

            // fixed-order reduction
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let scale = 1.0 / results.len() as f64;
            for (grads, loss) in &results {
                loss_sum += loss;
                seen += 1;
                for (name, g) in grads {
                    if epoch < cfg.freeze_encoder_epochs && name.starts_with("enc.") {
                        continue;
                    }
                    match acc.get_mut(name) {
                        Some(t) => {
                            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a += b * scale;
                            }
                        }
                        None => {
                            let mut t = Tensor::zeros(g.shape().to_vec());
                            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a = b * scale;
                            }
                            acc.insert(name.clone(), t);
                        }
                    }
                }
            }
            adam_step(&mut model.acoustic.params, &acc, &mut state)?;
        }

        let dev_wer = if dev.is_empty() {
            f64::NAN
        } else {
            dev_greedy_wer(model, dev)?
        };
        metrics.push(FinetuneMetrics {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            dev_greedy_wer: dev_wer,
        });
    }
    Ok(metrics)
}
