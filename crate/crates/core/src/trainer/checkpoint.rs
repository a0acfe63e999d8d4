//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"AMPG"  u32 version
//! u32 blob count, then per blob:
//!     u32 name length, UTF-8 name, u32 rank, u32 dims[rank], f32 values[prod(dims)]
//! u64 metadata length, UTF-8 JSON metadata
//! 32-byte SHA-256 of everything before it
//! ```
//!
//! Blob names are prefixed by their role: `gen/`, `gen_m/`, `gen_v/` for the
//! generator and its moments, `disc/`, `disc_m/`, `disc_v/` for the
//! discriminators and `disc_sn/` for their power-iteration vectors.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BestRecord, Moments, TrainConfig, TrainState};
use crate::discriminators::{copy_by_name, DiscriminatorEnsemble, EnsembleConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMPG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    digest: String,
    step: u64,
    rng: ChaCha8Rng,
    generator: GeneratorConfig,
    ensemble: Option<EnsembleConfig>,
    train: TrainConfig,
    gen_updates: u64,
    disc_updates: Option<u64>,
    best: Option<BestRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_store(out: &mut Vec<u8>, prefix: &str, store: &ParamStore<f32>) {
    for (name, t) in store.iter() {
        let full = format!("{prefix}/{name}");
        put_u32(out, full.len() as u32);
        out.extend_from_slice(full.as_bytes());
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize a training state to bytes.
pub fn encode(state: &TrainState<f32>) -> Vec<u8> {
    let mut stores: Vec<(&str, &ParamStore<f32>)> = vec![
        ("gen", state.generator.params()),
        ("gen_m", &state.gen_moments.m),
        ("gen_v", &state.gen_moments.v),
    ];
    if let (Some(d), Some(m)) = (&state.discriminator, &state.disc_moments) {
        stores.extend([
            ("disc", d.params()),
            ("disc_sn", d.buffers()),
            ("disc_m", &m.m),
            ("disc_v", &m.v),
        ]);
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, stores.iter().map(|(_, s)| s.len() as u32).sum());
    for (prefix, store) in stores {
        put_store(&mut out, prefix, store);
    }
    let meta = Metadata {
        digest: state.digest.clone(),
        step: state.step,
        rng: state.rng.clone(),
        generator: state.generator.config().clone(),
        ensemble: state.discriminator.as_ref().map(|d| d.config().clone()),
        train: state.config.clone(),
        gen_updates: state.gen_moments.t,
        disc_updates: state.disc_moments.as_ref().map(|m| m.t),
        best: state.best.clone(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let hash = Sha256::digest(&out);
    out.extend_from_slice(&hash);
    out
}

/// Write `state` to `path` (via a temporary file, so an interrupted write
/// never leaves a truncated checkpoint under the final name).
pub fn save_checkpoint(state: &TrainState<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ampg.tmp");
    std::fs::write(&tmp, encode(state))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(reason.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parse bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<TrainState<f32>> {
    if bytes.len() < 4 + 4 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing AMPG header"));
    }
    let (body, hash) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    if Sha256::digest(body).as_slice() != hash {
        return Err(corrupt("content hash mismatch (truncated or modified file)"));
    }
    let count = r.u32()?;
    let mut blobs: std::collections::BTreeMap<String, ParamStore<f32>> = Default::default();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| corrupt("blob name is not UTF-8"))?;
        let (prefix, param) = name
            .split_once('/')
            .ok_or_else(|| corrupt(format!("blob name {name} lacks a role prefix")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("blob too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blobs
            .entry(prefix.to_string())
            .or_default()
            .push(param.to_string(), Tensor::new(shape, data));
    }
    let meta_len = r.u64()? as usize;
    let meta: Metadata =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(format!("metadata: {e}")))?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after metadata"));
    }

    let mut blob = |prefix: &str| blobs.remove(prefix).unwrap_or_default();
    // Initial values are overwritten below; the seed is irrelevant.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut generator = Generator::build(&meta.generator, &mut scratch)?;
    generator.load_params(&blob("gen"))?;
    let mut gen_moments = Moments::zeros_like(generator.params());
    copy_by_name(&mut gen_moments.m, &blob("gen_m"), "generator first moments")?;
    copy_by_name(&mut gen_moments.v, &blob("gen_v"), "generator second moments")?;
    gen_moments.t = meta.gen_updates;

    let (discriminator, disc_moments) = match &meta.ensemble {
        Some(ens) => {
            let mut d = DiscriminatorEnsemble::build(ens, &mut scratch)?;
            d.load_state(&blob("disc"), &blob("disc_sn"))?;
            let mut m = Moments::zeros_like(d.params());
            copy_by_name(&mut m.m, &blob("disc_m"), "discriminator first moments")?;
            copy_by_name(&mut m.v, &blob("disc_v"), "discriminator second moments")?;
            m.t = meta
                .disc_updates
                .ok_or_else(|| corrupt("discriminator update count missing"))?;
            (Some(d), Some(m))
        }
        None => (None, None),
    };
    Ok(TrainState {
        config: meta.train,
        step: meta.step,
        generator,
        discriminator,
        gen_moments,
        disc_moments,
        rng: meta.rng,
        digest: meta.digest,
        best: meta.best,
    })
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
