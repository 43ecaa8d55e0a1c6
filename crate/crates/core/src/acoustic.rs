//! The pre-trainable acoustic model: convolutional feature encoder,
//! Gumbel-softmax product quantizer, span masking, and transformer context
//! network.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::transformer::{self, TransformerConfig};
use murmur_nn::{Binder, Init, NodeId, ParameterSet, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Gelu,
    Tanh,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConvLayer {
    pub stride: usize,
    pub kernel: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureEncoderConfig {
    pub layers: Vec<ConvLayer>,
    pub nonlinearity: Nonlinearity,
    pub layer_norm: bool,
}

impl FeatureEncoderConfig {
    /// The 7-layer full-scale layout: strides (5,2,2,2,2,2,2), kernel widths
    /// (10,3,3,3,3,2,2).
    pub fn full_scale() -> Self {
        let strides = [5, 2, 2, 2, 2, 2, 2];
        let kernels = [10, 3, 3, 3, 3, 2, 2];
        Self {
            layers: strides
                .iter()
                .zip(kernels)
                .map(|(&stride, kernel)| ConvLayer {
                    stride,
                    kernel,
                    channels: 512,
                })
                .collect(),
            nonlinearity: Nonlinearity::Gelu,
            layer_norm: true,
        }
    }

    pub fn desk_default() -> Self {
        let strides = [5, 2, 2];
        let kernels = [10, 4, 4];
        Self {
            layers: strides
                .iter()
                .zip(kernels)
                .map(|(&stride, kernel)| ConvLayer {
                    stride,
                    kernel,
                    channels: 64,
                })
                .collect(),
            nonlinearity: Nonlinearity::Gelu,
            layer_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CoreError::invalid("feature encoder needs layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 || l.kernel < l.stride || l.channels == 0 {
                return Err(CoreError::invalid(format!(
                    "encoder layer {}: need stride >= 1, kernel >= stride, channels >= 1 \
                     (got stride {}, kernel {}, channels {})",
                    i, l.stride, l.kernel, l.channels
                )));
            }
        }
        Ok(())
    }

    /// Output length under valid convolution: per layer
    /// `t_out = (t_in - kernel)/stride + 1`.
    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        let mut t = input_len;
        for l in &self.layers {
            if t < l.kernel {
                return Err(CoreError::InputTooShort {
                    required: self.min_input_len(),
                    got: input_len,
                });
            }
            t = (t - l.kernel) / l.stride + 1;
        }
        Ok(t)
    }

    /// Smallest input producing one output frame; equals the receptive field.
    pub fn min_input_len(&self) -> usize {
        self.receptive_field().0
    }

    /// (receptive field, stride) in samples: backward recurrence
    /// `rf <- (rf - 1) * stride + kernel` from the last layer to the first;
    /// total stride is the product of the per-layer strides.
    pub fn receptive_field(&self) -> (usize, usize) {
        let mut rf = 1usize;
        for l in self.layers.iter().rev() {
            rf = (rf - 1) * l.stride + l.kernel;
        }
        let stride = self.layers.iter().map(|l| l.stride).product();
        (rf, stride)
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.channels).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuantizerConfig {
    /// Codebook count G.
    pub groups: usize,
    /// Entries per codebook V.
    pub entries: usize,
    /// Codeword dim per codebook; G * codeword_dim must equal the context
    /// model dim so quantized targets live in the same space as c_t.
    pub codeword_dim: usize,
    pub temp_start: f64,
    pub temp_min: f64,
    pub temp_decay: f64,
}

impl QuantizerConfig {
    pub fn desk_default(context_dim: usize) -> Self {
        Self {
            groups: 2,
            entries: 32,
            codeword_dim: context_dim / 2,
            temp_start: 2.0,
            temp_min: 0.5,
            temp_decay: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.entries == 0 || self.codeword_dim == 0 {
            return Err(CoreError::invalid("quantizer needs G, V, dim >= 1"));
        }
        if self.temp_start <= 0.0 || self.temp_min <= 0.0 || self.temp_decay <= 0.0 {
            return Err(CoreError::invalid("quantizer temperatures must be > 0"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.groups * self.codeword_dim
    }

    /// Temperature for an epoch: multiplicative decay clamped at temp_min.
    pub fn temperature(&self, epoch: usize) -> f64 {
        (self.temp_start * self.temp_decay.powi(epoch as i32)).max(self.temp_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    None,
    Sinusoidal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextConfig {
    pub blocks: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub positional: Positional,
}

impl ContextConfig {
    pub fn desk_default() -> Self {
        Self {
            blocks: 4,
            dim: 128,
            ffn_dim: 256,
            heads: 4,
            positional: Positional::Sinusoidal,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            blocks: self.blocks,
            dim: self.dim,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Span length M.
    pub span: usize,
    /// Per-step probability of starting a span.
    pub prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            span: 10,
            prob: 0.065,
        }
    }
}

/// Masked time steps: starts plus the covered union of truncated spans.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub starts: Vec<usize>,
    pub covered: Vec<bool>,
}

impl MaskSet {
    pub fn masked_positions(&self) -> Vec<usize> {
        self.covered
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn coverage(&self) -> f64 {
        if self.covered.is_empty() {
            return 0.0;
        }
        self.covered.iter().filter(|&&m| m).count() as f64 / self.covered.len() as f64
    }
}

/// Each index is independently a span start with probability `prob`; spans
/// of length `span` are truncated at T and may overlap.
pub fn sample_masks(t: usize, cfg: &MaskConfig, rng: &mut murmur_nn::rng::Rng) -> MaskSet {
    let mut starts = Vec::new();
    let mut covered = vec![false; t];
    for i in 0..t {
        if rng.gen::<f64>() < cfg.prob {
            starts.push(i);
            for c in covered.iter_mut().take((i + cfg.span).min(t)).skip(i) {
                *c = true;
            }
        }
    }
    MaskSet { starts, covered }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub encoder: FeatureEncoderConfig,
    pub quantizer: QuantizerConfig,
    pub context: ContextConfig,
    pub mask: MaskConfig,
}

impl AcousticConfig {
    pub fn desk_default() -> Self {
        let context = ContextConfig::desk_default();
        Self {
            encoder: FeatureEncoderConfig::desk_default(),
            quantizer: QuantizerConfig::desk_default(context.dim),
            context,
            mask: MaskConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.quantizer.validate()?;
        self.context.transformer().validate()?;
        if self.quantizer.output_dim() != self.context.dim {
            return Err(CoreError::invalid(format!(
                "quantizer output dim {} must equal context dim {}",
                self.quantizer.output_dim(),
                self.context.dim
            )));
        }
        if self.mask.span == 0 || !(0.0..=1.0).contains(&self.mask.prob) {
            return Err(CoreError::invalid("mask span >= 1 and 0 <= p <= 1 required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    Train,
    Eval,
}

/// One quantized position: the forwarded hard codeword (dim G*codeword_dim)
/// and the per-codebook soft distributions feeding the diversity penalty.
pub struct Quantized {
    pub codeword: NodeId,
    pub soft: Vec<NodeId>,
}

pub struct AcousticModel {
    pub cfg: AcousticConfig,
    pub params: ParameterSet,
}

impl AcousticModel {
    pub fn new(cfg: AcousticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParameterSet::new(seed);
        Self::register(&mut params, &cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: AcousticConfig, params: ParameterSet) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params })
    }

    fn register(params: &mut ParameterSet, cfg: &AcousticConfig) -> Result<()> {
        let mut c_in = 1usize;
        for (i, l) in cfg.encoder.layers.iter().enumerate() {
            params.create(
                &format!("enc.l{i}.kernel"),
                vec![l.kernel, c_in, l.channels],
                Init::FanIn(l.kernel * c_in),
            )?;
            params.create(&format!("enc.l{i}.bias"), vec![l.channels], Init::Zeros)?;
            if cfg.encoder.layer_norm {
                params.create(&format!("enc.l{i}.ln.g"), vec![l.channels], Init::Ones)?;
                params.create(&format!("enc.l{i}.ln.b"), vec![l.channels], Init::Zeros)?;
            }
            c_in = l.channels;
        }
        let gv = cfg.quantizer.groups * cfg.quantizer.entries;
        params.create(&format!("quant.logits.w"), vec![c_in, gv], Init::FanIn(c_in))?;
        params.create(&format!("quant.logits.b"), vec![gv], Init::Zeros)?;
        for g in 0..cfg.quantizer.groups {
            params.create(
                &format!("quant.codebook{g}"),
                vec![cfg.quantizer.entries, cfg.quantizer.codeword_dim],
                Init::Uniform { lo: -0.5, hi: 0.5 },
            )?;
        }
        params.create(
            "ctx.proj.w",
            vec![c_in, cfg.context.dim],
            Init::FanIn(c_in),
        )?;
        params.create("ctx.proj.b", vec![cfg.context.dim], Init::Zeros)?;
        params.create(
            "ctx.mask_embed",
            vec![cfg.context.dim],
            Init::Uniform { lo: -0.1, hi: 0.1 },
        )?;
        transformer::register(params, "ctx", &cfg.context.transformer(), false)?;
        Ok(())
    }

    /// Latents z_1..z_T from raw samples: `[T, channels]`.
    pub fn forward_encoder(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        samples: &[f32],
    ) -> Result<NodeId> {
        let min = self.cfg.encoder.min_input_len();
        if samples.len() < min {
            return Err(CoreError::InputTooShort {
                required: min,
                got: samples.len(),
            });
        }
        let data: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
        let mut x = tape.constant(Tensor::matrix(samples.len(), 1, data).map_err(murmur_nn::NnError::from)?)?;
        for (i, l) in self.cfg.encoder.layers.iter().enumerate() {
            let kernel = binder.param(tape, &format!("enc.l{i}.kernel"))?;
            let bias = binder.param(tape, &format!("enc.l{i}.bias"))?;
            let y = tape.conv1d(x, kernel, l.stride)?;
            let y = tape.add_row(y, bias)?;
            let y = if self.cfg.encoder.layer_norm {
                let g = binder.param(tape, &format!("enc.l{i}.ln.g"))?;
                let b = binder.param(tape, &format!("enc.l{i}.ln.b"))?;
                tape.layer_norm_rows(y, g, b, 1e-5)?
            } else {
                y
            };
            x = match self.cfg.encoder.nonlinearity {
                Nonlinearity::Relu => tape.relu(y)?,
                Nonlinearity::Gelu => tape.gelu(y)?,
                Nonlinearity::Tanh => tape.tanh(y)?,
            };
        }
        Ok(x)
    }

    /// Context representations c_1..c_T. Masked latent rows are replaced by
    /// the learned mask embedding after projection to model dim.
    pub fn forward_context(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        latents: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let w = binder.param(tape, "ctx.proj.w")?;
        let b = binder.param(tape, "ctx.proj.b")?;
        let mut h = tape.affine(latents, w, b)?;
        if let Some(mask) = mask {
            let embed = binder.param(tape, "ctx.mask_embed")?;
            h = tape.replace_rows(h, embed, mask)?;
        }
        let t = tape.value(h).shape()[0];
        if self.cfg.context.positional == Positional::Sinusoidal {
            let pos = tape.constant(transformer::sinusoidal_positions(t, self.cfg.context.dim))?;
            h = tape.add(h, pos)?;
        }
        transformer::forward(
            tape,
            binder,
            "ctx",
            &self.cfg.context.transformer(),
            h,
            None,
            None,
        )
    }

    /// Quantize the latent rows at `positions`. Train mode adds Gumbel noise
    /// and forwards the hard selection with straight-through gradients; eval
    /// mode is a pure argmax with no noise.
    pub fn quantize_positions(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        latents: NodeId,
        positions: &[usize],
        mode: QuantizeMode,
        temperature: f64,
        rng: &mut murmur_nn::rng::Rng,
    ) -> Result<Vec<Quantized>> {
        if temperature <= 0.0 {
            return Err(CoreError::invalid("Gumbel temperature must be > 0"));
        }
        let q = &self.cfg.quantizer;
        let w = binder.param(tape, "quant.logits.w")?;
        let b = binder.param(tape, "quant.logits.b")?;
        let logits = tape.affine(latents, w, b)?; // [T, G*V]
        let codebooks: Vec<NodeId> = (0..q.groups)
            .map(|g| binder.param(tape, &format!("quant.codebook{g}")))
            .collect::<murmur_nn::Result<_>>()?;

        let mut out = Vec::with_capacity(positions.len());
        for &t in positions {
            let row = tape.row(logits, t)?; // [G*V]
            let mut soft = Vec::with_capacity(q.groups);
            let mut words = Vec::with_capacity(q.groups);
            for g in 0..q.groups {
                let lg = tape.slice_cols(row, g * q.entries, q.entries)?;
                let noisy = match mode {
                    QuantizeMode::Train => {
                        let noise: Vec<f64> = (0..q.entries)
                            .map(|_| {
                                let u: f64 = rng.gen_range(1e-12..1.0);
                                -(-u.ln()).ln()
                            })
                            .collect();
                        let n = tape.constant(Tensor::vector(noise))?;
                        tape.add(lg, n)?
                    }
                    QuantizeMode::Eval => lg,
                };
                let tempered = tape.scale(noisy, 1.0 / temperature)?;
                let sg = tape.softmax_rows(tempered, None)?;
                let selected = tape.st_select(sg, codebooks[g])?;
                soft.push(sg);
                words.push(selected);
            }
            let codeword = tape.concat_cols(&words)?;
            out.push(Quantized { codeword, soft });
        }
        Ok(out)
    }
}
