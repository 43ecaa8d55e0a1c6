//! Small causal transformer language model over words, used for n-best
//! rescoring. Prediction classes are the vocabulary plus <unk> and </s>;
//! the input stream is <s> followed by (unk-mapped) words.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ngram::WordId;
use crate::error::{CoreError, Result};
use crate::transformer::{self, TransformerConfig};
use murmur_nn::rng::{derive_seed_n, rng_from};
use murmur_nn::{
    adam_step, AdamConfig, Binder, Init, NodeId, OptimizerState, ParameterSet, Tape, Tensor,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralLmConfig {
    pub blocks: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NeuralLmConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            dim: 32,
            ffn_dim: 64,
            heads: 4,
            epochs: 6,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

impl NeuralLmConfig {
    fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            blocks: self.blocks,
            dim: self.dim,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
        }
    }
}

pub struct NeuralLm {
    cfg: NeuralLmConfig,
    words: Vec<String>,
    index: BTreeMap<String, WordId>,
    pub params: ParameterSet,
}

impl NeuralLm {
    pub fn vocab_len(&self) -> usize {
        self.words.len()
    }

    pub fn unk_id(&self) -> WordId {
        self.words.len() as WordId
    }

    fn bos_embed_id(&self) -> usize {
        self.words.len() + 1
    }

    fn eos_class(&self) -> usize {
        self.words.len() + 1
    }

    /// words + unk + eos.
    pub fn class_count(&self) -> usize {
        self.words.len() + 2
    }

    pub fn word_id(&self, word: &str) -> WordId {
        self.index.get(word).copied().unwrap_or(self.unk_id())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn cfg(&self) -> &NeuralLmConfig {
        &self.cfg
    }

    pub fn new(vocab: Vec<String>, cfg: NeuralLmConfig) -> Result<Self> {
        cfg.transformer().validate()?;
        if vocab.is_empty() {
            return Err(CoreError::invalid("neural LM needs a vocabulary"));
        }
        let index: BTreeMap<String, WordId> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as WordId))
            .collect();
        if index.len() != vocab.len() {
            return Err(CoreError::invalid("duplicate words in vocabulary"));
        }
        let mut params = ParameterSet::new(cfg.seed);
        let n_embed = vocab.len() + 2;
        let n_class = vocab.len() + 2;
        params.create("lm.embed", vec![n_embed, cfg.dim], Init::FanIn(cfg.dim))?;
        transformer::register(&mut params, "lm", &cfg.transformer(), false)?;
        // zero head: an untrained model emits exactly uniform distributions
        params.create("lm.head.w", vec![cfg.dim, n_class], Init::Zeros)?;
        params.create("lm.head.b", vec![n_class], Init::Zeros)?;
        Ok(Self {
            cfg,
            words: vocab,
            index,
            params,
        })
    }

    pub fn from_parts(vocab: Vec<String>, cfg: NeuralLmConfig, params: ParameterSet) -> Result<Self> {
        let mut lm = Self::new(vocab, cfg)?;
        lm.params = params;
        Ok(lm)
    }

    /// Log-probability rows for every prefix position: input <s> w1..wn,
    /// row i predicts the i+1-th event. `[n+1, classes]`.
    fn forward_rows(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        history: &[WordId],
    ) -> Result<NodeId> {
        let mut ids: Vec<usize> = Vec::with_capacity(history.len() + 1);
        ids.push(self.bos_embed_id());
        for &w in history {
            let w = (w as usize).min(self.unk_id() as usize);
            ids.push(w);
        }
        let embed = binder.param(tape, "lm.embed")?;
        let mut x = tape.gather_rows(embed, &ids)?;
        let pos = tape.constant(transformer::sinusoidal_positions(ids.len(), self.cfg.dim))?;
        x = tape.add(x, pos)?;
        let limits = transformer::causal_limits(ids.len());
        let h = transformer::forward(
            tape,
            binder,
            "lm",
            &self.cfg.transformer(),
            x,
            Some(&limits),
            None,
        )?;
        let w = binder.param(tape, "lm.head.w")?;
        let b = binder.param(tape, "lm.head.b")?;
        let logits = tape.affine(h, w, b)?;
        Ok(tape.log_softmax_rows(logits)?)
    }

    /// log p(word | history).
    pub fn word_logprob(&self, history: &[WordId], w: WordId) -> f64 {
        self.event_logprob(history, (w as usize).min(self.unk_id() as usize))
    }

    /// log p(</s> | history).
    pub fn eos_logprob(&self, history: &[WordId]) -> f64 {
        self.event_logprob(history, self.eos_class())
    }

    fn event_logprob(&self, history: &[WordId], class: usize) -> f64 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let rows = self
            .forward_rows(&mut tape, &mut binder, history)
            .expect("lm forward");
        let last = tape.value(rows).shape()[0] - 1;
        tape.value(rows).at2(last, class)
    }

    /// Whole-sentence log-probability (one forward pass), including </s>.
    pub fn sentence_logprob_ids(&self, ids: &[WordId]) -> f64 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let rows = self
            .forward_rows(&mut tape, &mut binder, ids)
            .expect("lm forward");
        let v = tape.value(rows);
        let mut total = 0.0;
        for (i, &w) in ids.iter().enumerate() {
            total += v.at2(i, (w as usize).min(self.unk_id() as usize));
        }
        total + v.at2(ids.len(), self.eos_class())
    }

    /// Next-token cross-entropy training. Deterministic given the seed.
    pub fn train(&mut self, sentences: &[&str]) -> Result<Vec<f64>> {
        let encoded: Vec<Vec<WordId>> = sentences
            .iter()
            .map(|s| s.split_whitespace().map(|w| self.word_id(w)).collect())
            .filter(|v: &Vec<WordId>| !v.is_empty())
            .collect();
        if encoded.is_empty() {
            return Err(CoreError::invalid("empty LM training corpus"));
        }
        let mut state = OptimizerState::new(AdamConfig::with_lr(self.cfg.lr));
        let mut losses = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..encoded.len()).collect();
            use rand::seq::SliceRandom as _;
            order.shuffle(&mut rng_from(derive_seed_n(
                self.cfg.seed,
                "lm-order",
                epoch as u64,
            )));
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                let results: Vec<(BTreeMap<String, Tensor>, f64)> = chunk
                    .par_iter()
                    .map(|&i| {
                        let ids = &encoded[i];
                        let mut tape = Tape::new();
                        let mut binder = Binder::new(&self.params);
                        let rows = self.forward_rows(&mut tape, &mut binder, ids)?;
                        let n_class = self.class_count();
                        let mut picks = Vec::with_capacity(ids.len() + 1);
                        for (pos, &w) in ids.iter().enumerate() {
                            let class = (w as usize).min(self.unk_id() as usize);
                            picks.push(tape.pick(rows, pos * n_class + class)?);
                        }
                        picks.push(
                            tape.pick(rows, ids.len() * n_class + self.eos_class())?,
                        );
                        let stacked = tape.stack_scalars(&picks)?;
                        let mean = tape.mean_all(stacked)?;
                        let loss = tape.scale(mean, -1.0)?;
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
                let scale = 1.0 / results.len() as f64;
                let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
                for (grads, loss) in &results {
                    loss_sum += loss;
                    seen += 1;
                    for (name, g) in grads {
                        let slot = acc
                            .entry(name.clone())
                            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                        for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                            *a += b * scale;
                        }
                    }
                }
                adam_step(&mut self.params, &acc, &mut state)?;
            }
            losses.push(loss_sum / seen.max(1) as f64);
        }
        Ok(losses)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        murmur_nn::checkpoint::save(
            &self.params,
            &dir.join(format!("{stem}.ckpt")),
            murmur_nn::checkpoint::Dtype::F64,
        )?;
        let meta = serde_json::json!({
            "config": self.cfg,
            "words": self.words,
        });
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let cfg: NeuralLmConfig = serde_json::from_value(meta["config"].clone())?;
        let words: Vec<String> = serde_json::from_value(meta["words"].clone())?;
        let params = murmur_nn::checkpoint::load(&dir.join(format!("{stem}.ckpt")))?;
        Self::from_parts(words, cfg, params)
    }
}
