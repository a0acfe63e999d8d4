//! Fréchet distance between Gaussian fits of two embedding sets, plus the
//! plug point for audio embedders.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

use super::mel::{MelConfig, MelSpectrogram};

/// `N x d` embedding matrix tagged with the model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: DMatrix<f64>,
    pub model_id: String,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<Vec<f64>>, model_id: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Metric("embedding rows differ in dimension".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Metric("embedding contains non-finite entries".into()));
        }
        Ok(Self {
            vectors: DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]),
            model_id: model_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (n, d) = self.vectors.shape();
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 embeddings, got {n}")));
        }
        if n < d + 1 {
            log::warn!("{n} embeddings of dimension {d}: covariance estimate is rank deficient");
        }
        let mean = self.vectors.row_mean().transpose();
        let mut centered = self.vectors.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok((mean, cov))
    }
}

const EIG_TOLERANCE: f64 = 1e-8;
/// Eigenvalues below this fraction of the largest are rounding noise of a
/// rank-deficient matrix and are treated as zero before the square root.
const EIG_RELATIVE_FLOOR: f64 = 1e-12;

fn sqrt_eigenvalue(v: f64, largest: f64) -> f64 {
    if v <= EIG_RELATIVE_FLOOR * largest {
        0.0
    } else {
        v.sqrt()
    }
}

/// Symmetric PSD square root with small negative eigenvalues clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    let largest = vals.max();
    for v in vals.iter_mut() {
        if *v < -EIG_TOLERANCE {
            return Err(Error::Numerical(format!(
                "{what} has eigenvalue {v:e}, below the -{EIG_TOLERANCE:e} clamping tolerance"
            )));
        }
        *v = sqrt_eigenvalue(*v, largest);
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between `N(mu1, cov1)` and `N(mu2, cov2)`:
/// `|mu1 - mu2|^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))`.
///
/// The cross term is evaluated as `tr((S cov2 S)^(1/2))` with
/// `S = cov1^(1/2)`, which is symmetric and so has a real square root.
pub fn frechet_distance_gaussian(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    if mu1.len() != mu2.len() || cov1.shape() != cov2.shape() || cov1.nrows() != mu1.len() {
        return Err(Error::Metric(format!(
            "dimension mismatch: {} vs {}",
            mu1.len(),
            mu2.len()
        )));
    }
    let s = sqrt_psd(cov1, "reference covariance")?;
    let inner = &s * cov2 * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut tr_sqrt = 0.0;
    let largest = eig.eigenvalues.max();
    for &v in eig.eigenvalues.iter() {
        if v < -EIG_TOLERANCE {
            return Err(Error::Numerical(format!(
                "covariance product has eigenvalue {v:e}; eigenvalues {:?}",
                eig.eigenvalues.as_slice()
            )));
        }
        tr_sqrt += sqrt_eigenvalue(v, largest);
    }
    let diff = mu1 - mu2;
    let fd = diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    if !fd.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite distance: mean term {}, traces {} and {}, cross term {}",
            diff.dot(&diff),
            cov1.trace(),
            cov2.trace(),
            tr_sqrt
        )));
    }
    Ok(fd)
}

/// Fréchet distance between the Gaussian fits of two embedding sets.
pub fn frechet_distance(reference: &EmbeddingSet, generated: &EmbeddingSet) -> Result<f64> {
    if reference.dim() != generated.dim() {
        return Err(Error::Metric(format!(
            "embedding dimensions differ: {} vs {}",
            reference.dim(),
            generated.dim()
        )));
    }
    let (mu1, cov1) = reference.moments()?;
    let (mu2, cov2) = generated.moments()?;
    frechet_distance_gaussian(&mu1, &cov1, &mu2, &cov2)
}

/// Maps a fixed-length audio window to an embedding vector.
pub trait Embedder {
    fn model_id(&self) -> &str;
    fn window_len(&self) -> usize;
    fn dim(&self) -> usize;
    fn embed(&self, window: &[f32]) -> std::result::Result<Vec<f64>, String>;
}

/// Desk-scale embedder: per-band means of a 32-band log-mel spectrogram
/// over a window of `window_len` samples.
#[derive(Debug)]
pub struct ToyEmbedder {
    mel: MelSpectrogram,
    window_len: usize,
}

impl ToyEmbedder {
    pub const DIM: usize = 32;

    pub fn new(window_len: usize) -> Result<Self> {
        let cfg = MelConfig {
            fft_size: 1024,
            hop: 512,
            n_mels: Self::DIM,
            ..MelConfig::default()
        };
        if window_len < cfg.fft_size {
            return Err(Error::Config(format!(
                "toy embedder window must be at least {} samples",
                cfg.fft_size
            )));
        }
        Ok(Self {
            mel: MelSpectrogram::new(&cfg)?,
            window_len,
        })
    }
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self::new(16384).expect("valid default window")
    }
}

impl Embedder for ToyEmbedder {
    fn model_id(&self) -> &str {
        "toy-logmel32"
    }

    fn window_len(&self) -> usize {
        self.window_len
    }

    fn dim(&self) -> usize {
        Self::DIM
    }

    fn embed(&self, window: &[f32]) -> std::result::Result<Vec<f64>, String> {
        let x: Vec<f64> = window.iter().map(|&v| v as f64).collect();
        let logmel = self.mel.log_mel(&x).map_err(|e| e.to_string())?;
        let frames = logmel.len() / Self::DIM;
        let mut out = vec![0.0; Self::DIM];
        for frame in logmel.chunks(Self::DIM) {
            for (o, v) in out.iter_mut().zip(frame) {
                *o += v / frames as f64;
            }
        }
        Ok(out)
    }
}

/// Embed every non-overlapping full window of every buffer.
pub fn embed_for_fad(buffers: &[AudioBuffer], embedder: &dyn Embedder) -> Result<EmbeddingSet> {
    let w = embedder.window_len();
    let mut rows = Vec::new();
    for buf in buffers {
        for window in buf.samples.chunks_exact(w) {
            let e = embedder.embed(window).map_err(|reason| Error::Embedder {
                source_id: buf.source_id.clone(),
                reason,
            })?;
            if e.len() != embedder.dim() {
                return Err(Error::Embedder {
                    source_id: buf.source_id.clone(),
                    reason: format!("expected dimension {}, got {}", embedder.dim(), e.len()),
                });
            }
            rows.push(e);
        }
    }
    if rows.is_empty() {
        return Err(Error::Metric(format!("no audio window of {w} samples to embed")));
    }
    EmbeddingSet::new(rows, embedder.model_id())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: Vec<Vec<f64>>) -> EmbeddingSet {
        EmbeddingSet::new(rows, "test").unwrap()
    }

    #[test]
    fn one_dimensional_closed_form() {
        // unbiased variance of {-a, a} is 2a^2
        let a = 0.5f64.sqrt();
        let r = set(vec![vec![-a], vec![a]]);
        let g = set(vec![vec![1.0 - a], vec![1.0 + a]]);
        assert!((frechet_distance(&r, &g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn commuting_covariances_closed_form() {
        // corners (+-a, +-b) have unbiased covariance diag(4a^2/3, 4b^2/3)
        let corners = |a: f64, b: f64| {
            vec![vec![a, b], vec![a, -b], vec![-a, b], vec![-a, -b]]
        };
        let r = set(corners(0.75f64.sqrt(), 3.0f64.sqrt()));
        let g = set(corners(3.0f64.sqrt(), 0.75f64.sqrt()));
        assert!((frechet_distance(&r, &g).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let r = set(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let g = set(vec![vec![0.0], vec![1.0]]);
        assert!(frechet_distance(&r, &g).is_err());
    }

    #[test]
    fn toy_embedder_shape_and_identity() {
        let buf = AudioBuffer::new(
            (0..16384 * 3).map(|i| ((i as f32) * 0.01).sin() * ((i / 1000) as f32 * 0.1).cos()).collect(),
            44100,
            "tone",
        )
        .unwrap();
        let e = ToyEmbedder::default();
        let a = embed_for_fad(std::slice::from_ref(&buf), &e).unwrap();
        assert_eq!((a.len(), a.dim()), (3, 32));
        let b = embed_for_fad(std::slice::from_ref(&buf), &e).unwrap();
        assert_eq!(a, b);
        assert!(frechet_distance(&a, &b).unwrap().abs() < 1e-8);
    }
}
