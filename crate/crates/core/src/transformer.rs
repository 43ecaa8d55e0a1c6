//! Pre-norm transformer blocks shared by the acoustic context network, the
//! seq2seq encoder/decoder, and the neural language model.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use murmur_nn::{Binder, Init, NodeId, ParameterSet, Tape, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(crate::CoreError::invalid(format!(
                "model dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 || self.ffn_dim == 0 {
            return Err(crate::CoreError::invalid(
                "transformer needs at least one block and a nonzero FFN dim",
            ));
        }
        Ok(())
    }
}

fn create_linear(params: &mut ParameterSet, name: &str, d_in: usize, d_out: usize) -> Result<()> {
    params.create(&format!("{name}.w"), vec![d_in, d_out], Init::FanIn(d_in))?;
    params.create(&format!("{name}.b"), vec![d_out], Init::Zeros)?;
    Ok(())
}

fn create_norm(params: &mut ParameterSet, name: &str, dim: usize) -> Result<()> {
    params.create(&format!("{name}.g"), vec![dim], Init::Ones)?;
    params.create(&format!("{name}.b"), vec![dim], Init::Zeros)?;
    Ok(())
}

/// Register parameters for a stack of blocks under `prefix`.
/// With `cross` set, each block also carries a cross-attention sublayer.
pub fn register(
    params: &mut ParameterSet,
    prefix: &str,
    cfg: &TransformerConfig,
    cross: bool,
) -> Result<()> {
    for i in 0..cfg.blocks {
        let b = format!("{prefix}.block{i}");
        create_norm(params, &format!("{b}.ln1"), cfg.dim)?;
        for part in ["wq", "wk", "wv", "wo"] {
            create_linear(params, &format!("{b}.attn.{part}"), cfg.dim, cfg.dim)?;
        }
        if cross {
            create_norm(params, &format!("{b}.lnx"), cfg.dim)?;
            for part in ["wq", "wk", "wv", "wo"] {
                create_linear(params, &format!("{b}.cross.{part}"), cfg.dim, cfg.dim)?;
            }
        }
        create_norm(params, &format!("{b}.ln2"), cfg.dim)?;
        create_linear(params, &format!("{b}.ffn.in"), cfg.dim, cfg.ffn_dim)?;
        create_linear(params, &format!("{b}.ffn.out"), cfg.ffn_dim, cfg.dim)?;
    }
    create_norm(params, &format!("{prefix}.ln_out"), cfg.dim)?;
    Ok(())
}

fn linear(
    tape: &mut Tape,
    binder: &mut Binder,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = binder.param(tape, &format!("{name}.w"))?;
    let b = binder.param(tape, &format!("{name}.b"))?;
    Ok(tape.affine(x, w, b)?)
}

fn norm(tape: &mut Tape, binder: &mut Binder, name: &str, x: NodeId) -> Result<NodeId> {
    let g = binder.param(tape, &format!("{name}.g"))?;
    let b = binder.param(tape, &format!("{name}.b"))?;
    Ok(tape.layer_norm_rows(x, g, b, 1e-5)?)
}

/// Multi-head attention with queries from `q_in` and keys/values from
/// `kv_in`. `limits[i]` restricts row i of the score matrix to its first
/// `limits[i]` columns (causal masking); `None` is full attention.
fn attention(
    tape: &mut Tape,
    binder: &mut Binder,
    name: &str,
    q_in: NodeId,
    kv_in: NodeId,
    heads: usize,
    limits: Option<&[usize]>,
) -> Result<NodeId> {
    let dim = *tape.value(q_in).shape().last().unwrap();
    let dh = dim / heads;
    let q = linear(tape, binder, &format!("{name}.wq"), q_in)?;
    let k = linear(tape, binder, &format!("{name}.wk"), kv_in)?;
    let v = linear(tape, binder, &format!("{name}.wv"), kv_in)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = tape.softmax_rows(scores, limits.map(|l| l.to_vec()))?;
        outs.push(tape.matmul(probs, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    linear(tape, binder, &format!("{name}.wo"), cat)
}

fn ffn(tape: &mut Tape, binder: &mut Binder, name: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(tape, binder, &format!("{name}.in"), x)?;
    let h = tape.gelu(h)?;
    linear(tape, binder, &format!("{name}.out"), h)
}

/// Pre-norm block stack. `self_limits` applies causal masking to
/// self-attention; `memory` adds a cross-attention sublayer over the given
/// encoder states.
pub fn forward(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    cfg: &TransformerConfig,
    mut x: NodeId,
    self_limits: Option<&[usize]>,
    memory: Option<NodeId>,
) -> Result<NodeId> {
    for i in 0..cfg.blocks {
        let b = format!("{prefix}.block{i}");
        let n1 = norm(tape, binder, &format!("{b}.ln1"), x)?;
        let a = attention(
            tape,
            binder,
            &format!("{b}.attn"),
            n1,
            n1,
            cfg.heads,
            self_limits,
        )?;
        x = tape.add(x, a)?;
        if let Some(mem) = memory {
            let nx = norm(tape, binder, &format!("{b}.lnx"), x)?;
            let c = attention(tape, binder, &format!("{b}.cross"), nx, mem, cfg.heads, None)?;
            x = tape.add(x, c)?;
        }
        let n2 = norm(tape, binder, &format!("{b}.ln2"), x)?;
        let f = ffn(tape, binder, &format!("{b}.ffn"), n2)?;
        x = tape.add(x, f)?;
    }
    norm(tape, binder, &format!("{prefix}.ln_out"), x)
}

/// Fixed sinusoidal position matrix `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[t * dim + 2 * i] = (t as f64 * rate).sin();
            if 2 * i + 1 < dim {
                data[t * dim + 2 * i + 1] = (t as f64 * rate).cos();
            }
        }
    }
    Tensor::matrix(len, dim, data).expect("shape is consistent")
}

/// Causal limits for a length-`t` sequence: row i may see columns 0..=i.
pub fn causal_limits(t: usize) -> Vec<usize> {
    (1..=t).collect()
}
