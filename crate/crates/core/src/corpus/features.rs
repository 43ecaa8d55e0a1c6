//! Log-Mel filterbank features.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::SAMPLE_RATE;
use crate::error::{CoreError, Result};
use murmur_nn::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogMelConfig {
    pub window: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            window: 400,
            hop: 160,
            mel_bins: 40,
            floor: 1e-10,
        }
    }
}

impl LogMelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window < self.hop {
            return Err(CoreError::invalid(format!(
                "log-mel window {} must be >= hop {} > 0",
                self.window, self.hop
            )));
        }
        if self.mel_bins == 0 {
            return Err(CoreError::invalid("log-mel needs at least one bin"));
        }
        if self.floor <= 0.0 {
            return Err(CoreError::invalid("log-mel floor must be positive"));
        }
        Ok(())
    }

    /// Frame count for an input length: floor((len - window)/hop) + 1.
    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.window {
            return Err(CoreError::InputTooShort {
                required: self.window,
                got: len,
            });
        }
        Ok((len - self.window) / self.hop + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency (Hz) of mel bin `b` under the standard triangular
/// filterbank over [0, sample_rate/2].
pub fn mel_bin_center_hz(cfg: &LogMelConfig, b: usize) -> f64 {
    let fmax = SAMPLE_RATE as f64 / 2.0;
    let mel_max = hz_to_mel(fmax);
    let point = (b + 1) as f64 * mel_max / (cfg.mel_bins + 1) as f64;
    mel_to_hz(point)
}

/// Triangular unit-height mel filters as (fft_bin, weight) lists.
fn filterbank(cfg: &LogMelConfig) -> Vec<Vec<(usize, f64)>> {
    let n_fft = cfg.window;
    let fmax = SAMPLE_RATE as f64 / 2.0;
    let mel_max = hz_to_mel(fmax);
    let points: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(i as f64 * mel_max / (cfg.mel_bins + 1) as f64))
        .collect();
    let hz_per_bin = SAMPLE_RATE as f64 / n_fft as f64;
    let n_bins = n_fft / 2 + 1;
    (0..cfg.mel_bins)
        .map(|m| {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            let mut taps = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * hz_per_bin;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                if w > 0.0 {
                    taps.push((k, w));
                }
            }
            taps
        })
        .collect()
}

/// Log-Mel feature matrix `[frames, mel_bins]`. Frames are Hann-windowed,
/// no padding (the tail shorter than a window is dropped).
pub fn logmel(samples: &[f32], cfg: &LogMelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let frames = cfg.frames(samples.len())?;
    let filters = filterbank(cfg);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.window);
    let hann: Vec<f64> = (0..cfg.window)
        .map(|i| {
            0.5 - 0.5
                * (2.0 * std::f64::consts::PI * i as f64 / (cfg.window - 1) as f64).cos()
        })
        .collect();

    let mut out = Vec::with_capacity(frames * cfg.mel_bins);
    let mut buf = vec![Complex::new(0.0f64, 0.0); cfg.window];
    for f in 0..frames {
        let start = f * cfg.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(samples[start + i] as f64 * hann[i], 0.0);
        }
        fft.process(&mut buf);
        let n_bins = cfg.window / 2 + 1;
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for taps in &filters {
            let mut e = 0.0;
            for &(k, w) in taps {
                e += w * power[k];
            }
            out.push((e + cfg.floor).ln());
        }
    }
    Ok(Tensor::matrix(frames, cfg.mel_bins, out).map_err(murmur_nn::NnError::from)?)
}
