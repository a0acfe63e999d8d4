//! A synthetic amplifier-modeling task small enough for a laptop.
//!
//! Clean audio is a mixture of band-limited sawtooth bursts at random
//! pitches, loudness-normalized like real input. The "amplifier" is the
//! memoryless high-gain curve `tanh(5 x)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{normalize_loudness, segment_audio, AudioBuffer, PairedPool, SegmentPool, DEFAULT_PEAK_DB, DEFAULT_TARGET_LUFS, SAMPLE_RATE};
use crate::error::Result;
use crate::trainer::TrainData;

pub const TOY_DRIVE: f64 = 5.0;

/// PolyBLEP residual for a discontinuity at phase 0 with increment `dt`.
fn poly_blep(t: f64, dt: f64) -> f64 {
    if t < dt {
        let x = t / dt;
        2.0 * x - x * x - 1.0
    } else if t > 1.0 - dt {
        let x = (t - 1.0) / dt;
        x * x + 2.0 * x + 1.0
    } else {
        0.0
    }
}

/// `seconds` of overlapping sawtooth bursts (70 to 880 Hz, 80 to 600 ms,
/// percussive envelopes), normalized to -1 dBFS peak then -12 LUFS.
pub fn saw_bursts(seconds: f64, seed: u64, source_id: &str) -> Result<AudioBuffer> {
    let rate = SAMPLE_RATE as f64;
    let n = (seconds * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f64; n];
    let events = (seconds * 6.0).ceil() as usize;
    for _ in 0..events {
        let start = rng.gen_range(0..n);
        let dur = (rng.gen_range(0.08..0.6) * rate) as usize;
        let f0 = 70.0 * (880.0f64 / 70.0).powf(rng.gen::<f64>());
        let amp = rng.gen_range(0.2..1.0);
        let decay = rng.gen_range(2.0..12.0);
        let dt = f0 / rate;
        let mut phase = rng.gen::<f64>();
        for (i, o) in out[start..(start + dur).min(n)].iter_mut().enumerate() {
            let t = i as f64 / rate;
            let attack = (t / 0.005).min(1.0);
            let release = ((dur - i) as f64 / (0.01 * rate)).min(1.0);
            let env = amp * attack * release * (-decay * t).exp();
            *o += env * (2.0 * phase - 1.0 - poly_blep(phase, dt));
            phase += dt;
            if phase >= 1.0 {
                phase -= 1.0;
            }
        }
    }
    let raw = AudioBuffer::new(out.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE, source_id)?;
    Ok(normalize_loudness(&raw, DEFAULT_PEAK_DB, DEFAULT_TARGET_LUFS)?.buffer)
}

/// The toy amplifier: `tanh(5 x)` per sample.
pub fn toy_amp(x: &AudioBuffer) -> AudioBuffer {
    AudioBuffer {
        samples: x
            .samples
            .iter()
            .map(|&v| (TOY_DRIVE * v as f64).tanh() as f32)
            .collect(),
        ..x.clone()
    }
}

/// Clean/rendered recording pairs split into train, validation and test.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub train: Vec<(AudioBuffer, AudioBuffer)>,
    pub val: Vec<(AudioBuffer, AudioBuffer)>,
    pub test: Vec<(AudioBuffer, AudioBuffer)>,
}

impl ToyTask {
    /// Train audio comes in 10-second files; validation and test are one
    /// file each.
    pub fn generate(train_secs: f64, val_secs: f64, test_secs: f64, seed: u64) -> Result<Self> {
        let pair = |secs: f64, s: u64, id: String| -> Result<(AudioBuffer, AudioBuffer)> {
            let c = saw_bursts(secs, s, &id)?;
            let r = toy_amp(&c);
            Ok((c, r))
        };
        let files = (train_secs / 10.0).ceil().max(1.0) as usize;
        let per_file = train_secs / files as f64;
        let train = (0..files)
            .map(|i| pair(per_file, seed.wrapping_mul(1000).wrapping_add(i as u64), format!("train{i:02}")))
            .collect::<Result<_>>()?;
        let val = vec![pair(val_secs, seed.wrapping_mul(1000).wrapping_add(900), "val".into())?];
        let test = vec![pair(test_secs, seed.wrapping_mul(1000).wrapping_add(901), "test".into())?];
        Ok(Self { train, val, test })
    }

    fn pairs(set: &[(AudioBuffer, AudioBuffer)], length: usize) -> Result<PairedPool> {
        let mut pairs = Vec::new();
        for (c, r) in set {
            let c = segment_audio(&Arc::new(c.clone()), length)?;
            let r = segment_audio(&Arc::new(r.clone()), length)?;
            pairs.extend(c.into_iter().zip(r));
        }
        Ok(PairedPool { pairs })
    }

    /// Training pools at `segment_length` and validation pairs at
    /// `val_length`.
    pub fn data(&self, segment_length: usize, val_length: usize) -> Result<TrainData> {
        let train = Self::pairs(&self.train, segment_length)?;
        Ok(TrainData {
            clean_pools: vec![SegmentPool::new(train.pairs.iter().map(|p| p.0.clone()).collect())],
            rendered_pool: SegmentPool::new(train.pairs.iter().map(|p| p.1.clone()).collect()),
            paired_train: Some(train),
            val: Self::pairs(&self.val, val_length)?,
        })
    }

    /// Held-out pairs cut into `length`-sample segments.
    pub fn test_pairs(&self, length: usize) -> Result<PairedPool> {
        Self::pairs(&self.test, length)
    }
}
