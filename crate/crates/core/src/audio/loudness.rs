//! Integrated loudness (K-weighted, gated) and two-stage normalization.

use super::AudioBuffer;
use crate::error::{Error, Result};

pub const DEFAULT_PEAK_DB: f64 = -1.0;
pub const DEFAULT_TARGET_LUFS: f64 = -12.0;

const BLOCK_SECS: f64 = 0.4;
const OVERLAP: f64 = 0.75;
const ABSOLUTE_GATE: f64 = -70.0;
const RELATIVE_GATE: f64 = -10.0;

/// Result of an integrated-loudness measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loudness {
    Lufs(f64),
    /// Every gating block fell below the gates (or the input is shorter
    /// than one block).
    Unmeasurable,
}

impl Loudness {
    pub fn lufs(self) -> Option<f64> {
        match self {
            Loudness::Lufs(v) => Some(v),
            Loudness::Unmeasurable => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 3],
}

impl Biquad {
    fn high_shelf(gain_db: f64, q: f64, fc: f64, rate: f64) -> Self {
        let a = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * std::f64::consts::PI * fc / rate;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        let sa = 2.0 * a.sqrt() * alpha;
        Self {
            b: [
                a * ((a + 1.0) + (a - 1.0) * c + sa),
                -2.0 * a * ((a - 1.0) + (a + 1.0) * c),
                a * ((a + 1.0) + (a - 1.0) * c - sa),
            ],
            a: [
                (a + 1.0) - (a - 1.0) * c + sa,
                2.0 * ((a - 1.0) - (a + 1.0) * c),
                (a + 1.0) - (a - 1.0) * c - sa,
            ],
        }
    }

    fn high_pass(q: f64, fc: f64, rate: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * fc / rate;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self {
            b: [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            a: [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        }
    }

    /// Direct form I over the whole signal from a zero state.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let [b0, b1, b2] = self.b.map(|v| v / self.a[0]);
        let [_, a1, a2] = self.a.map(|v| v / self.a[0]);
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

/// K-weighting: a +4 dB high shelf around 1.5 kHz followed by a 38 Hz
/// high-pass.
fn k_weight(x: &[f64], rate: f64) -> Vec<f64> {
    let shelf = Biquad::high_shelf(4.0, std::f64::consts::FRAC_1_SQRT_2, 1500.0, rate);
    let hp = Biquad::high_pass(0.5, 38.0, rate);
    hp.apply(&shelf.apply(x))
}

fn block_loudness(z: f64) -> f64 {
    -0.691 + 10.0 * z.log10()
}

/// Gated integrated loudness of a mono signal.
pub fn measure_integrated_loudness_raw(x: &[f64], rate: u32) -> Loudness {
    let rate_f = rate as f64;
    let duration = x.len() as f64 / rate_f;
    if duration < BLOCK_SECS {
        return Loudness::Unmeasurable;
    }
    let step = 1.0 - OVERLAP;
    let num_blocks = (((duration - BLOCK_SECS) / (BLOCK_SECS * step)).round() as usize) + 1;
    let y = k_weight(x, rate_f);
    let block_len = BLOCK_SECS * rate_f;
    let powers: Vec<f64> = (0..num_blocks)
        .map(|j| {
            let lo = (BLOCK_SECS * (j as f64 * step) * rate_f) as usize;
            let hi = ((BLOCK_SECS * (j as f64 * step + 1.0) * rate_f) as usize).min(y.len());
            y[lo..hi].iter().map(|v| v * v).sum::<f64>() / block_len
        })
        .collect();
    let above_abs: Vec<f64> = powers
        .iter()
        .copied()
        .filter(|&z| z > 0.0 && block_loudness(z) >= ABSOLUTE_GATE)
        .collect();
    if above_abs.is_empty() {
        return Loudness::Unmeasurable;
    }
    let relative = block_loudness(above_abs.iter().sum::<f64>() / above_abs.len() as f64) + RELATIVE_GATE;
    let gated: Vec<f64> = above_abs
        .into_iter()
        .filter(|&z| block_loudness(z) > relative)
        .collect();
    if gated.is_empty() {
        return Loudness::Unmeasurable;
    }
    Loudness::Lufs(block_loudness(gated.iter().sum::<f64>() / gated.len() as f64))
}

/// Integrated loudness in LUFS: K-weighting, 400 ms blocks with 75% overlap,
/// an absolute gate at -70 LUFS and a relative gate 10 LU below the
/// absolute-gated loudness.
pub fn measure_integrated_loudness(buf: &AudioBuffer) -> Loudness {
    measure_integrated_loudness_raw(&buf.to_f64(), buf.sample_rate)
}

/// Output of [`normalize_loudness`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub buffer: AudioBuffer,
    /// The loudness gain was reduced to keep the peak at full scale.
    pub clamped: bool,
    pub loudness: f64,
}

/// Scale to a sample peak of `peak_db` dBFS, then to `target_lufs`
/// integrated loudness. If the loudness gain would push the peak above
/// 1.0, it is reduced to land the peak exactly at 1.0 and the result is
/// flagged as clamped.
pub fn normalize_loudness(buf: &AudioBuffer, peak_db: f64, target_lufs: f64) -> Result<Normalized> {
    let fail = |reason: &str| Error::Normalization {
        source_id: buf.source_id.clone(),
        reason: reason.to_string(),
    };
    let x = buf.to_f64();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(fail("signal is silent"));
    }
    let stage1 = 10f64.powf(peak_db / 20.0) / peak;
    let x1: Vec<f64> = x.iter().map(|v| v * stage1).collect();
    let measured = measure_integrated_loudness_raw(&x1, buf.sample_rate)
        .lufs()
        .ok_or_else(|| fail("integrated loudness is unmeasurable"))?;
    let mut stage2 = 10f64.powf((target_lufs - measured) / 20.0);
    let peak1 = peak * stage1;
    let mut clamped = false;
    if peak1 * stage2 > 1.0 {
        stage2 = 1.0 / peak1;
        clamped = true;
        log::warn!(
            "{}: reaching {target_lufs} LUFS would clip; gain limited to unit peak",
            buf.source_id
        );
    }
    let gain = stage1 * stage2;
    let samples: Vec<f32> = x.iter().map(|v| (v * gain) as f32).collect();
    let loudness = measured + 20.0 * stage2.log10();
    Ok(Normalized {
        buffer: AudioBuffer::new(samples, buf.sample_rate, buf.source_id.clone())?,
        clamped,
        loudness,
    })
}
