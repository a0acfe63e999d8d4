//! Multi-scale (MSD) and multi-period (MPD) waveform discriminators.
//!
//! The MSD keeps two sub-discriminators: one on the raw waveform (spectral
//! normalized) and one on the x4 average-pooled waveform (weight normalized).
//! The MPD has one sub-discriminator per period in `[2, 3, 5, 7, 11]`; each
//! folds the waveform into a `(T / p, p)` map and convolves along time with
//! kernels of width 1, which is computed here as a 1-D convolution over each
//! of the `p` columns with shared weights.
//!
//! Each MSD sub ends in a 1-channel output projection (kernel 3, stride 1,
//! padding 1). The MPD output projection uses stride 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, Eager, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Norm, ParamStore};
use crate::ops::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// One convolution row of a sub-discriminator. For MPD layers `kernel`,
/// `stride` and `padding` act along the time (height) axis; the width axis
/// always has kernel 1, stride 1 and no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub const fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            padding,
        }
    }

    fn geom(&self) -> ConvGeom {
        ConvGeom::symmetric(self.stride, self.padding, self.groups)
    }
}

/// MSD rows: (in, out, kernel, stride, groups, padding).
pub const MSD_TABLE: [LayerSpec; 7] = [
    LayerSpec::new(1, 128, 15, 1, 1, 0),
    LayerSpec::new(128, 128, 41, 2, 4, 20),
    LayerSpec::new(128, 256, 41, 2, 16, 20),
    LayerSpec::new(256, 512, 41, 4, 16, 20),
    LayerSpec::new(512, 1024, 41, 4, 16, 20),
    LayerSpec::new(1024, 1024, 41, 1, 16, 20),
    LayerSpec::new(1024, 1024, 5, 1, 2, 0),
];

/// Logit projection appended after [`MSD_TABLE`].
pub const MSD_HEAD: LayerSpec = LayerSpec::new(1024, 1, 3, 1, 1, 1);

/// MPD rows along the time axis; the last row is the logit projection and
/// runs at stride 1.
pub const MPD_TABLE: [LayerSpec; 6] = [
    LayerSpec::new(1, 32, 5, 3, 1, 2),
    LayerSpec::new(32, 128, 5, 3, 1, 2),
    LayerSpec::new(128, 512, 5, 3, 1, 2),
    LayerSpec::new(512, 1024, 5, 3, 1, 2),
    LayerSpec::new(1024, 1024, 5, 1, 1, 2),
    LayerSpec::new(1024, 1, 1, 1, 1, 2),
];

pub const MPD_PERIODS: [usize; 5] = [2, 3, 5, 7, 11];

/// Which discriminators take part in adversarial training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorSet {
    MsdOnly,
    MsdMpd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdSubSpec {
    /// Average-pooling factor applied to the waveform before this sub.
    pub pool: usize,
    pub norm: Norm,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpdSubSpec {
    pub period: usize,
    pub layers: Vec<LayerSpec>,
}

/// Full topology of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub msd: Vec<MsdSubSpec>,
    pub mpd: Vec<MpdSubSpec>,
    pub leaky_slope: f64,
}

fn scale_layer(l: &LayerSpec, divisor: usize) -> LayerSpec {
    let scale = |c: usize| if c == 1 { 1 } else { (c / divisor).max(1) };
    let (cin, cout) = (scale(l.in_channels), scale(l.out_channels));
    let mut groups = l.groups.min(cin).min(cout);
    while cin % groups != 0 || cout % groups != 0 {
        groups -= 1;
    }
    LayerSpec {
        in_channels: cin,
        out_channels: cout,
        groups,
        ..*l
    }
}

impl EnsembleConfig {
    /// Full-width MSD + MPD topology.
    pub fn full() -> Self {
        Self::scaled(1)
    }

    /// Same topology with every hidden channel count divided by `divisor`
    /// (group counts reduced only when they no longer divide the channels).
    pub fn scaled(divisor: usize) -> Self {
        assert!(divisor >= 1);
        let msd_layers: Vec<LayerSpec> = MSD_TABLE
            .iter()
            .chain(std::iter::once(&MSD_HEAD))
            .map(|l| scale_layer(l, divisor))
            .collect();
        let mpd_layers: Vec<LayerSpec> = MPD_TABLE.iter().map(|l| scale_layer(l, divisor)).collect();
        Self {
            msd: vec![
                MsdSubSpec {
                    pool: 1,
                    norm: Norm::Spectral,
                    layers: msd_layers.clone(),
                },
                MsdSubSpec {
                    pool: 4,
                    norm: Norm::Weight,
                    layers: msd_layers,
                },
            ],
            mpd: MPD_PERIODS
                .iter()
                .map(|&period| MpdSubSpec {
                    period,
                    layers: mpd_layers.clone(),
                })
                .collect(),
            leaky_slope: 0.1,
        }
    }

    /// Two layers per sub with a handful of channels, for hand checks and
    /// gradient verification.
    pub fn micro() -> Self {
        let msd_layers = vec![LayerSpec::new(1, 4, 5, 2, 1, 2), LayerSpec::new(4, 1, 3, 1, 1, 1)];
        let mpd_layers = vec![LayerSpec::new(1, 4, 5, 3, 1, 2), LayerSpec::new(4, 1, 1, 1, 1, 2)];
        Self {
            msd: vec![
                MsdSubSpec {
                    pool: 1,
                    norm: Norm::Spectral,
                    layers: msd_layers.clone(),
                },
                MsdSubSpec {
                    pool: 4,
                    norm: Norm::Weight,
                    layers: msd_layers,
                },
            ],
            mpd: MPD_PERIODS
                .iter()
                .map(|&period| MpdSubSpec {
                    period,
                    layers: mpd_layers.clone(),
                })
                .collect(),
            leaky_slope: 0.1,
        }
    }

    /// Restrict to the chosen discriminator set.
    pub fn with_set(mut self, set: DiscriminatorSet) -> Self {
        if set == DiscriminatorSet::MsdOnly {
            self.mpd.clear();
        }
        self
    }

    pub fn num_subs(&self) -> usize {
        self.msd.len() + self.mpd.len()
    }

    /// Logit-map shape `(height, width)` of every sub for a `len`-sample
    /// input, or a shape error naming the first sub that cannot run.
    pub fn map_shapes(&self, len: usize) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.num_subs());
        for (i, sub) in self.msd.iter().enumerate() {
            let name = format!("msd{}", i + 1);
            if len < sub.pool {
                return Err(shape_err(&name, format!("input of {len} samples is shorter than the pooling window {}", sub.pool)));
            }
            let h = chain_len(&name, len / sub.pool, &sub.layers)?;
            out.push((h, 1));
        }
        for sub in &self.mpd {
            let name = format!("mpd_p{}", sub.period);
            if len == 0 || ops::period_fold_height(len, sub.period) * sub.period - len >= len {
                return Err(shape_err(&name, format!("input of {len} samples is too short to fold at period {}", sub.period)));
            }
            let h = chain_len(&name, ops::period_fold_height(len, sub.period), &sub.layers)?;
            out.push((h, sub.period));
        }
        Ok(out)
    }

    /// Shortest input accepted by every sub.
    pub fn min_input_len(&self) -> usize {
        (1..).find(|&n| self.map_shapes(n).is_ok()).unwrap()
    }
}

fn shape_err(name: &str, reason: String) -> Error {
    Error::Shape {
        component: name.to_string(),
        reason,
    }
}

fn chain_len(name: &str, mut len: usize, layers: &[LayerSpec]) -> Result<usize> {
    for (i, l) in layers.iter().enumerate() {
        len = l.geom().output_len(len, l.kernel).ok_or_else(|| {
            shape_err(name, format!("layer {} receives {len} frames, fewer than its kernel footprint", i + 1))
        })?;
    }
    Ok(len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubKind {
    Scale { pool: usize },
    Period { period: usize },
}

/// One sub-discriminator: a stack of convolutions with leaky rectifiers in
/// between.
#[derive(Debug, Clone, PartialEq)]
pub struct SubDiscriminator {
    pub name: String,
    pub kind: SubKind,
    pub convs: Vec<Conv1d>,
}

impl SubDiscriminator {
    fn forward_with<T: Real, B: Backend<T>>(
        &self,
        be: &mut B,
        params: &[B::V],
        buffers: &ParamStore<T>,
        x: &B::V,
        slope: T,
    ) -> B::V {
        let mut h = match self.kind {
            SubKind::Scale { pool: 1 } => x.clone(),
            SubKind::Scale { pool } => be.avg_pool(x, pool),
            SubKind::Period { period } => be.period_fold(x, period),
        };
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(be, params, buffers, &h);
            if i != last {
                h = be.leaky_relu(&h, slope);
            }
        }
        h
    }
}

/// Raw logits of every sub-discriminator for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMaps<T> {
    pub maps: Vec<LogitMap<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap<T> {
    pub name: String,
    /// `(height, width)` per batch item: width 1 for MSD, the period for MPD.
    pub shape: (usize, usize),
    pub values: Tensor<T>,
}

impl<T: Real> LogitMaps<T> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn means(&self) -> Vec<T> {
        self.maps.iter().map(|m| m.values.mean()).collect()
    }

    /// Maps filled with a constant, shaped like `self`.
    pub fn filled(&self, value: T) -> Self {
        Self {
            maps: self
                .maps
                .iter()
                .map(|m| LogitMap {
                    values: Tensor::full(m.values.shape().to_vec(), value),
                    ..m.clone()
                })
                .collect(),
        }
    }
}

/// The MSD + MPD ensemble with its parameters and power-iteration state.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorEnsemble<T> {
    config: EnsembleConfig,
    params: ParamStore<T>,
    buffers: ParamStore<T>,
    subs: Vec<SubDiscriminator>,
}

impl<T: Real> DiscriminatorEnsemble<T> {
    pub fn build<R: Rng + ?Sized>(config: &EnsembleConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut subs = Vec::new();
        let mut make = |name: String, kind: SubKind, norm: Norm, layers: &[LayerSpec]| -> Result<SubDiscriminator> {
            let mut prev_out = 1;
            let mut convs = Vec::new();
            for (i, l) in layers.iter().enumerate() {
                if l.in_channels != prev_out
                    || l.groups == 0
                    || l.in_channels % l.groups != 0
                    || l.out_channels % l.groups != 0
                {
                    return Err(Error::Config(format!("{name} layer {} has inconsistent channels/groups", i + 1)));
                }
                prev_out = l.out_channels;
                convs.push(Conv1d::build(
                    &format!("disc.{name}.conv{i}"),
                    l.in_channels,
                    l.out_channels,
                    l.kernel,
                    l.geom(),
                    norm,
                    &mut params,
                    &mut buffers,
                    rng,
                ));
            }
            if prev_out != 1 {
                return Err(Error::Config(format!("{name} must end in a 1-channel projection")));
            }
            Ok(SubDiscriminator { name, kind, convs })
        };
        for (i, sub) in config.msd.iter().enumerate() {
            subs.push(make(format!("msd{}", i + 1), SubKind::Scale { pool: sub.pool }, sub.norm, &sub.layers)?);
        }
        for sub in &config.mpd {
            subs.push(make(
                format!("mpd_p{}", sub.period),
                SubKind::Period { period: sub.period },
                Norm::Weight,
                &sub.layers,
            )?);
        }
        Ok(Self {
            config: config.clone(),
            params,
            buffers,
            subs,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn subs(&self) -> &[SubDiscriminator] {
        &self.subs
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Power-iteration vectors of the spectral-normalized layers.
    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// One power-iteration step for every spectral-normalized layer.
    pub fn refresh_spectral(&mut self) {
        for sub in &self.subs {
            for conv in &sub.convs {
                conv.refresh_spectral(&self.params, &mut self.buffers);
            }
        }
    }

    /// Effective kernels of every spectral-normalized layer.
    pub fn spectral_weights(&self) -> Vec<Tensor<T>> {
        let vals = self.params.values();
        self.subs
            .iter()
            .flat_map(|s| s.convs.iter())
            .filter(|c| c.norm == Norm::Spectral)
            .map(|c| c.effective_weight(&mut Eager, &vals, &self.buffers))
            .collect()
    }

    pub fn check_input(&self, len: usize) -> Result<Vec<(usize, usize)>> {
        self.config.map_shapes(len)
    }

    /// Run every sub on `x: (batch, 1, time)`; one output per sub in
    /// MSD-then-MPD order.
    pub fn forward_with<B: Backend<T>>(&self, be: &mut B, params: &[B::V], x: &B::V) -> Vec<B::V> {
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        self.subs
            .iter()
            .map(|s| s.forward_with(be, params, &self.buffers, x, slope))
            .collect()
    }

    /// Record the ensemble on `graph`. Parameters become differentiable
    /// leaves when `trainable`, constants otherwise.
    pub fn forward_graph(&self, graph: &mut Graph<T>, x: Var, trainable: bool) -> (Vec<Var>, Vec<Var>) {
        let leaves = if trainable {
            self.params.leaves(graph)
        } else {
            self.params.constants(graph)
        };
        let outs = self.forward_with(graph, &leaves, &x);
        (leaves, outs)
    }

    fn wrap(&self, outs: Vec<Tensor<T>>, shapes: &[(usize, usize)]) -> LogitMaps<T> {
        LogitMaps {
            maps: outs
                .into_iter()
                .zip(&self.subs)
                .zip(shapes)
                .map(|((values, sub), &shape)| LogitMap {
                    name: sub.name.clone(),
                    shape,
                    values,
                })
                .collect(),
        }
    }

    /// Logit maps for a `(batch, 1, time)` waveform batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<LogitMaps<T>> {
        let len = *x.shape().last().unwrap_or(&0);
        let shapes = self.check_input(len)?;
        let params = self.params.values();
        let outs = self.forward_with(&mut Eager, &params, x);
        Ok(self.wrap(outs, &shapes))
    }

    /// Wrap graph outputs as [`LogitMaps`] values.
    pub fn maps_from_graph(&self, graph: &Graph<T>, outs: &[Var], len: usize) -> Result<LogitMaps<T>> {
        let shapes = self.check_input(len)?;
        Ok(self.wrap(outs.iter().map(|&v| graph.get(v).clone()).collect(), &shapes))
    }

    /// Replace parameters and power-iteration state by name.
    pub fn load_state(&mut self, params: &ParamStore<T>, buffers: &ParamStore<T>) -> Result<()> {
        copy_by_name(&mut self.params, params, "discriminator")?;
        copy_by_name(&mut self.buffers, buffers, "discriminator state")
    }
}

pub(crate) fn copy_by_name<T: Real>(dst: &mut ParamStore<T>, src: &ParamStore<T>, what: &str) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{what} expects {} tensors, found {}",
            dst.len(),
            src.len()
        )));
    }
    for i in 0..dst.len() {
        let name = dst.name(i).to_string();
        let j = src
            .index_of(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        if src.get(j).shape() != dst.get(i).shape() {
            return Err(Error::CorruptCheckpoint(format!("shape mismatch for {name}")));
        }
        *dst.get_mut(i) = src.get(j).clone();
    }
    Ok(())
}

/// Non-overlapping x4 mean pooling of a waveform.
pub fn avg_pool_x4(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 4 {
        return Err(Error::Shape {
            component: "avg_pool_x4".into(),
            reason: format!("needs at least 4 samples, got {}", x.len()),
        });
    }
    let t = Tensor::new(vec![1, 1, x.len()], x.to_vec());
    Ok(ops::avg_pool_forward(&t, 4).into_data())
}

/// Fold a waveform into a `(ceil(T / p), p)` row-major map with right
/// reflection padding.
pub fn reshape_for_period(x: &[f64], period: usize) -> Result<(usize, usize, Vec<f64>)> {
    if x.is_empty() || period == 0 {
        return Err(Error::Shape {
            component: "reshape_for_period".into(),
            reason: "empty input or zero period".into(),
        });
    }
    let height = ops::period_fold_height(x.len(), period);
    if height * period - x.len() >= x.len() {
        return Err(Error::Shape {
            component: "reshape_for_period".into(),
            reason: format!("{} samples cannot be reflect-padded to a multiple of {period}", x.len()),
        });
    }
    let folded = ops::period_fold_forward(&Tensor::new(vec![1, 1, x.len()], x.to_vec()), period);
    // folded is column-major (one row per phase); transpose to (height, period)
    let d = folded.data();
    let mut map = vec![0.0; height * period];
    for c in 0..period {
        for h in 0..height {
            map[h * period + c] = d[c * height + h];
        }
    }
    Ok((height, period, map))
}
