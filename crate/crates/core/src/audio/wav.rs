use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

fn ingest_err(path: &Path, reason: impl ToString) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Read a PCM (8/16/24/32-bit) or 32-bit float WAV file as canonical mono
/// 44.1 kHz audio. Channels are averaged; other rates are resampled.
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| ingest_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(ingest_err(path, "zero channels"));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ingest_err(path, e))?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ingest_err(path, e))?
        }
    };
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if interleaved.len() < channels {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    if interleaved.iter().any(|v| !v.is_finite()) {
        return Err(ingest_err(path, "non-finite sample"));
    }
    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| (frame.iter().map(|&v| v as f64).sum::<f64>() / channels as f64) as f32)
            .collect()
    };
    let mono = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, SAMPLE_RATE)
    };
    AudioBuffer::new(mono, SAMPLE_RATE, source_id)
}

/// Write mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    };
    let mut w = WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &buf.samples {
        w.write_sample(s).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}
