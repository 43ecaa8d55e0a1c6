//! Masked contrastive pre-training: identify the true quantized latent at
//! each masked position among distractors drawn from other masked time
//! steps, with a codebook diversity penalty on batch-averaged usage.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::acoustic::{sample_masks, AcousticModel, QuantizeMode};
use crate::corpus::{Corpus, Split, Utterance};
use crate::error::{CoreError, Result};
use murmur_nn::rng::{derive_seed, derive_seed_n, rng_from, Rng};
use murmur_nn::{adam_step, AdamConfig, Binder, NodeId, OptimizerState, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Distractor count K.
    pub distractors: usize,
    /// Diversity penalty weight.
    pub diversity_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Divisor on cosine similarities before the softmax.
    pub similarity_temperature: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            distractors: 20,
            diversity_weight: 0.1,
            epochs: 5,
            batch_size: 8,
            lr: 1e-3,
            similarity_temperature: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.diversity_weight < 0.0 {
            return Err(CoreError::invalid("diversity weight must be >= 0"));
        }
        if self.similarity_temperature <= 0.0 {
            return Err(CoreError::invalid("similarity temperature must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::invalid("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// K distractor indices for masked position `t`, uniform over the other
/// masked positions; sampling is with replacement only when fewer than K
/// candidates exist.
pub fn sample_distractors(
    mask: &crate::acoustic::MaskSet,
    t: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if t >= mask.covered.len() || !mask.covered[t] {
        return Err(CoreError::invalid(format!(
            "distractor anchor {} is not a masked position",
            t
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let candidates: Vec<usize> = mask
        .masked_positions()
        .into_iter()
        .filter(|&p| p != t)
        .collect();
    if candidates.is_empty() {
        return Err(CoreError::invalid(
            "no other masked positions to draw distractors from; batch rejected",
        ));
    }
    if candidates.len() <= k {
        if candidates.len() == k {
            return Ok(candidates);
        }
        // fewer than K: with replacement
        return Ok((0..k)
            .map(|_| candidates[rng.gen_range(0..candidates.len())])
            .collect());
    }
    // uniform without replacement via partial Fisher-Yates
    let mut pool = candidates;
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::invalid("zero-norm vector, cosine undefined"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// The contrastive objective at one masked position, evaluated directly:
/// `-log exp(sim(c,q)) / sum over {q} ∪ distractors of exp(sim(c,.))`.
pub fn contrastive_loss_value(
    c_t: &[f64],
    q_t: &[f64],
    distractors: &[Vec<f64>],
    similarity_temperature: f64,
) -> Result<f64> {
    let mut sims = Vec::with_capacity(distractors.len() + 1);
    sims.push(cosine(c_t, q_t)? / similarity_temperature);
    for d in distractors {
        sims.push(cosine(c_t, d)? / similarity_temperature);
    }
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = sims.iter().map(|s| (s - max).exp()).sum();
    Ok(-(sims[0] - max - z.ln()))
}

/// Diversity penalty over batch-averaged per-codebook distributions:
/// `(1/G) * sum_g (1 - H(p_g)/ln V)`, 0 at uniform usage, 1 at collapse.
pub fn diversity_penalty(dists: &[Vec<f64>]) -> Result<f64> {
    if dists.is_empty() {
        return Err(CoreError::invalid("diversity penalty needs distributions"));
    }
    let mut total = 0.0;
    for p in dists {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CoreError::invalid(format!(
                "distribution sums to {}, expected 1",
                sum
            )));
        }
        if p.iter().any(|&v| v < 0.0) {
            return Err(CoreError::invalid("negative probability"));
        }
        let v = p.len();
        if v == 1 {
            continue; // a single entry cannot be diverse or collapsed
        }
        let h: f64 = -p
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * x.ln())
            .sum::<f64>();
        total += 1.0 - h / (v as f64).ln();
    }
    Ok(total / dists.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub contrastive_acc: f64,
    pub diversity: f64,
}

struct BatchOutcome {
    grads: BTreeMap<String, Tensor>,
    loss: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    contrastive: f64,
    diversity: f64,
    positions: usize,
    correct: usize,
}

/// Forward one batch on a single tape, returning the loss node components.
/// Gradients span the whole batch so the diversity penalty sees the batch
/// average, as configured.
fn batch_step(
    model: &AcousticModel,
    batch: &[&Utterance],
    cfg: &PretrainConfig,
    temperature: f64,
    epoch: usize,
    compute_grads: bool,
) -> Result<Option<BatchOutcome>> {
    let k = cfg.distractors;
    let groups = model.cfg.quantizer.groups;

    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params);
    let mut terms: Vec<NodeId> = Vec::new();
    let mut soft_by_group: Vec<Vec<NodeId>> = vec![Vec::new(); groups];
    let mut correct = 0usize;

    for utt in batch {
        let mut rng = rng_from(derive_seed_n(
            derive_seed(cfg.seed, &utt.id),
            "epoch",
            epoch as u64,
        ));
        let z = model.forward_encoder(&mut tape, &mut binder, &utt.samples)?;
        let t_len = tape.value(z).shape()[0];
        let mask = sample_masks(t_len, &model.cfg.mask, &mut rng);
        let positions = mask.masked_positions();
        if positions.len() < 2 {
            // cannot draw distractors from other masked steps; skip
            continue;
        }
        let quantized = model.quantize_positions(
            &mut tape,
            &mut binder,
            z,
            &positions,
            QuantizeMode::Train,
            temperature,
            &mut rng,
        )?;
        let c = model.forward_context(&mut tape, &mut binder, z, Some(&mask.covered))?;

        let index_of: BTreeMap<usize, usize> =
            positions.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        for (i, &t) in positions.iter().enumerate() {
            let distractors = sample_distractors(&mask, t, k, &mut rng)?;
            let c_t = tape.row(c, t)?;
            let mut sims = Vec::with_capacity(k + 1);
            sims.push(tape.cosine_sim(c_t, quantized[i].codeword)?);
            for &d in &distractors {
                let qd = quantized[index_of[&d]].codeword;
                sims.push(tape.cosine_sim(c_t, qd)?);
            }
            let stacked = tape.stack_scalars(&sims)?;
            let scaled = tape.scale(stacked, 1.0 / cfg.similarity_temperature)?;
            let logp = tape.log_softmax_rows(scaled)?;
            let target_lp = tape.pick(logp, 0)?;
            terms.push(tape.scale(target_lp, -1.0)?);

            let sim_vals = tape.value(stacked).data();
            let target_sim = sim_vals[0];
            if sim_vals[1..].iter().all(|&s| s <= target_sim) {
                correct += 1;
            }
        }
        for (g, group_soft) in soft_by_group.iter_mut().enumerate() {
            for q in &quantized {
                group_soft.push(q.soft[g]);
            }
        }
    }

    if terms.is_empty() {
        return Ok(None);
    }

    let stacked = tape.stack_scalars(&terms)?;
    let contrastive = tape.mean_all(stacked)?;

    // diversity penalty on batch-averaged soft distributions
    let v = model.cfg.quantizer.entries;
    let mut penalty_terms = Vec::with_capacity(groups);
    for group_soft in &soft_by_group {
        let stacked = tape.stack_rows(group_soft)?;
        let pbar = tape.mean_rows(stacked)?;
        if v > 1 {
            let lnp = tape.ln(pbar)?;
            let plogp = tape.mul(pbar, lnp)?;
            let neg_h = tape.sum_all(plogp)?; // -H
            // 1 - H/lnV = 1 + neg_h/lnV
            let scaled = tape.scale(neg_h, 1.0 / (v as f64).ln())?;
            penalty_terms.push(tape.add_scalar(scaled, 1.0)?);
        }
    }
    let diversity = if penalty_terms.is_empty() {
        tape.scalar(0.0)?
    } else {
        let st = tape.stack_scalars(&penalty_terms)?;
        tape.mean_all(st)?
    };

    let weighted_penalty = tape.scale(diversity, cfg.diversity_weight)?;
    let loss = tape.add(contrastive, weighted_penalty)?;

    let loss_val = tape.value(loss).item();
    let contrastive_val = tape.value(contrastive).item();
    let diversity_val = tape.value(diversity).item();
    if !loss_val.is_finite() {
        return Err(CoreError::invalid(format!(
            "non-finite pre-training loss at epoch {}",
            epoch
        )));
    }

    let grads = if compute_grads {
        let g = tape.backward(loss)?;
        let mut by_name = BTreeMap::new();
        for (name, &node) in binder.bound() {
            if let Some(t) = g.get(node) {
                by_name.insert(name.clone(), t.clone());
            }
        }
        by_name
    } else {
        BTreeMap::new()
    };

    Ok(Some(BatchOutcome {
        grads,
        loss: loss_val,
        contrastive: contrastive_val,
        diversity: diversity_val,
        positions: terms.len(),
        correct,
    }))
}

/// Contrastive accuracy of the current parameters over a set of utterances
/// (no updates). Used for the untrained-baseline comparison.
pub fn contrastive_accuracy(
    model: &AcousticModel,
    utterances: &[&Utterance],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let temperature = model.cfg.quantizer.temperature(0);
    let mut positions = 0usize;
    let mut correct = 0usize;
    for chunk in utterances.chunks(cfg.batch_size) {
        if let Some(out) = batch_step(model, chunk, cfg, temperature, 0, false)? {
            positions += out.positions;
            correct += out.correct;
        }
    }
    if positions == 0 {
        return Err(CoreError::invalid("no masked positions in accuracy eval"));
    }
    Ok(correct as f64 / positions as f64)
}

/// Optimize contrastive + diversity loss with Adam over the unlabeled split.
/// Deterministic given the config seed. Returns per-epoch metrics.
pub fn pretrain_run(
    model: &mut AcousticModel,
    corpus: &Corpus,
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainMetrics>> {
    cfg.validate()?;
    let utterances: Vec<&Utterance> = corpus.split(Split::Unlabeled).collect();
    if utterances.is_empty() {
        return Err(CoreError::invalid("unlabeled split is empty"));
    }
    let mut state = OptimizerState::new(AdamConfig::with_lr(cfg.lr));
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let temperature = model.cfg.quantizer.temperature(epoch);
        let mut order: Vec<usize> = (0..utterances.len()).collect();
        use rand::seq::SliceRandom as _;
        order.shuffle(&mut rng_from(derive_seed_n(cfg.seed, "order", epoch as u64)));

        let mut loss_sum = 0.0;
        let mut div_sum = 0.0;
        let mut batches = 0usize;
        let mut positions = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| utterances[i]).collect();
            let out = batch_step(model, &batch, cfg, temperature, epoch, true)?
                .ok_or_else(|| CoreError::invalid("batch had no usable masked positions"))?;
            adam_step(&mut model.params, &out.grads, &mut state)?;
            loss_sum += out.loss;
            div_sum += out.diversity;
            batches += 1;
            positions += out.positions;
            correct += out.correct;
        }
        metrics.push(PretrainMetrics {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            contrastive_acc: correct as f64 / positions.max(1) as f64,
            diversity: div_sum / batches.max(1) as f64,
        });
    }
    Ok(metrics)
}
