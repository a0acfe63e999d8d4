//! Audio ingestion, loudness normalization, segmentation and batching.

mod dataset;
mod loudness;
mod manifest;
mod resample;
mod wav;

pub use dataset::{
    assign_splits, make_paired_batch, make_unpaired_batch, segment_audio, Batch, PairedPool, Role, Segment,
    SegmentDataset, SegmentEntry, SegmentPool, SourceFile, Split, SplitRatios, DEFAULT_SEGMENT_LENGTH,
};
pub use loudness::{
    measure_integrated_loudness, normalize_loudness, Loudness, Normalized, DEFAULT_PEAK_DB, DEFAULT_TARGET_LUFS,
};
pub use manifest::{cache_path, Manifest, ManifestEntry};
pub use resample::resample;
pub use wav::{load_audio, write_wav};

use crate::error::{Error, Result};

/// Canonical sample rate of every buffer after ingestion.
pub const SAMPLE_RATE: u32 = 44100;

/// Mono audio with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioBuffer {
    /// Wrap samples, rejecting empty or non-finite input.
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if samples.is_empty() {
            return Err(Error::EmptyInput(source_id));
        }
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { index });
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| v as f64).collect()
    }
}
