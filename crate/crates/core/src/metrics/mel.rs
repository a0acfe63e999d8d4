use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mel spectrogram parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 256,
            n_mels: 128,
            sample_rate: 44100,
            fmin: 0.0,
            fmax: 22050.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.hop == 0 || self.hop > self.fft_size || self.n_mels == 0 {
            return Err(Error::Config(format!("invalid mel framing {self:?}")));
        }
        if !(0.0..self.fmax).contains(&self.fmin) || self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "mel band [{}, {}] must lie within [0, {}]",
                self.fmin,
                self.fmax,
                self.sample_rate as f64 / 2.0
            )));
        }
        Ok(())
    }
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn logstep() -> f64 {
    6.4f64.ln() / 27.0
}

pub(crate) fn hz_to_mel(f: f64) -> f64 {
    if f >= MIN_LOG_HZ {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / logstep()
    } else {
        f / F_SP
    }
}

pub(crate) fn mel_to_hz(m: f64) -> f64 {
    if m >= MIN_LOG_MEL {
        MIN_LOG_HZ * (logstep() * (m - MIN_LOG_MEL)).exp()
    } else {
        F_SP * m
    }
}

/// Triangular filters with area normalization, `n_mels x (fft_size / 2 + 1)`.
pub(crate) fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.fft_size / 2 + 1;
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64)
        .collect();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            fft_freqs
                .iter()
                .map(|&f| {
                    let rise = (f - left) / (center - left);
                    let fall = (right - f) / (right - center);
                    rise.min(fall).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

/// Precomputed STFT + mel projection.
pub struct MelSpectrogram {
    cfg: MelConfig,
    window: Vec<f64>,
    filterbank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelSpectrogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelSpectrogram").field("cfg", &self.cfg).finish()
    }
}

impl MelSpectrogram {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.fft_size;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filterbank: mel_filterbank(cfg),
            fft: FftPlanner::new().plan_fft_forward(n),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &[Vec<f64>] {
        &self.filterbank
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.cfg.fft_size {
            0
        } else {
            1 + (len - self.cfg.fft_size) / self.cfg.hop
        }
    }

    /// Mel magnitudes, frame-major (`frames x n_mels`). Frames start at
    /// multiples of `hop` with no centering pad.
    pub fn magnitudes(&self, x: &[f64]) -> Result<Vec<f64>> {
        let frames = self.num_frames(x.len());
        if frames == 0 {
            return Err(Error::Metric(format!(
                "{} samples is shorter than one {}-sample frame",
                x.len(),
                self.cfg.fft_size
            )));
        }
        let n = self.cfg.fft_size;
        let n_bins = n / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut mag = vec![0.0; n_bins];
        let mut out = Vec::with_capacity(frames * self.cfg.n_mels);
        for f in 0..frames {
            let start = f * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(x[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for row in &self.filterbank {
                out.push(row.iter().zip(&mag).map(|(w, m)| w * m).sum());
            }
        }
        Ok(out)
    }

    /// `log(1e-5 + mel)`, frame-major.
    pub fn log_mel(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.magnitudes(x)?.into_iter().map(|v| (1e-5 + v).ln()).collect())
    }

    /// Mean absolute difference of log-mel magnitudes over all bins.
    pub fn l1(&self, y: &[f64], y_hat: &[f64]) -> Result<f64> {
        if y.len() != y_hat.len() {
            return Err(Error::Metric(format!(
                "mel_l1 needs equal lengths, got {} and {}",
                y.len(),
                y_hat.len()
            )));
        }
        let a = self.log_mel(y)?;
        let b = self.log_mel(y_hat)?;
        Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
    }
}

/// Mel-spectrum L1 distance between a target and a prediction.
pub fn mel_l1(y: &[f64], y_hat: &[f64], cfg: &MelConfig) -> Result<f64> {
    MelSpectrogram::new(cfg)?.l1(y, y_hat)
}
