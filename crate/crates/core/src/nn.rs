//! Named parameter storage and normalized convolution layers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Backend, Graph, Var};
use crate::ops::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// A zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Register every tensor as a differentiable leaf on `graph`.
    pub fn leaves(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.tensors().map(|t| graph.param(t.clone())).collect()
    }

    /// Register every tensor as a gradient-blocking leaf on `graph`.
    pub fn constants(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.tensors().map(|t| graph.constant(t.clone())).collect()
    }

    /// Owned copies for the eager backend.
    pub fn values(&self) -> Vec<Tensor<T>> {
        self.tensors().cloned().collect()
    }
}

/// Reparameterization applied to a convolution kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// Per-output-channel magnitude times unit direction.
    Weight,
    /// Kernel divided by its leading singular value estimate.
    Spectral,
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
enum KernelParams {
    Weight { direction: usize, magnitude: usize },
    Spectral { weight: usize, u: usize, v: usize },
    Plain { weight: usize },
}

/// A 1-D convolution whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
    pub norm: Norm,
    kernel_params: KernelParams,
    bias: usize,
}

impl Conv1d {
    /// Allocate parameters under `prefix` in `params` (and power-iteration
    /// vectors in `buffers` for spectral norm).
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real, R: Rng + ?Sized>(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
        norm: Norm,
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        assert!(in_channels.is_multiple_of(geom.groups) && out_channels.is_multiple_of(geom.groups));
        let cin_g = in_channels / geom.groups;
        let fan_in = (cin_g * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let shape = vec![out_channels, cin_g, kernel];
        let n = out_channels * cin_g * kernel;
        let weight = Tensor::new(
            shape,
            (0..n)
                .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                .collect(),
        );
        let kernel_params = match norm {
            Norm::Weight => {
                let magnitude = Tensor::new(
                    vec![out_channels],
                    weight
                        .data()
                        .chunks(cin_g * kernel)
                        .map(|r| r.iter().map(|&a| a * a).sum::<T>().sqrt())
                        .collect(),
                );
                let direction = params.push(format!("{prefix}.direction"), weight);
                let magnitude = params.push(format!("{prefix}.magnitude"), magnitude);
                KernelParams::Weight {
                    direction,
                    magnitude,
                }
            }
            Norm::Spectral => {
                let mut u: Vec<T> = (0..out_channels)
                    .map(|_| T::from_f64_lossy(StandardNormal.sample(rng)))
                    .collect();
                let mut v = vec![T::zero(); cin_g * kernel];
                for _ in 0..50 {
                    ops::power_iteration(&weight, &mut u, &mut v);
                }
                let weight = params.push(format!("{prefix}.weight"), weight);
                let u = buffers.push(format!("{prefix}.sn_u"), Tensor::new(vec![out_channels], u));
                let v = buffers.push(format!("{prefix}.sn_v"), Tensor::new(vec![cin_g * kernel], v));
                KernelParams::Spectral { weight, u, v }
            }
            Norm::Plain => KernelParams::Plain {
                weight: params.push(format!("{prefix}.weight"), weight),
            },
        };
        let bias = Tensor::new(
            vec![out_channels],
            (0..out_channels)
                .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                .collect(),
        );
        let bias = params.push(format!("{prefix}.bias"), bias);
        Self {
            in_channels,
            out_channels,
            kernel,
            geom,
            norm,
            kernel_params,
            bias,
        }
    }

    /// Number of scalar parameters owned by this layer (power-iteration
    /// vectors are state, not parameters).
    pub fn num_params(&self) -> usize {
        let w = self.out_channels * self.in_channels / self.geom.groups * self.kernel;
        let mag = if self.norm == Norm::Weight { self.out_channels } else { 0 };
        w + mag + self.out_channels
    }

    /// Parameter count of the plain weight and bias only, as it would be
    /// before any reparameterization.
    pub fn num_plain_params(&self) -> usize {
        self.out_channels * self.in_channels / self.geom.groups * self.kernel + self.out_channels
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }

    /// Index of the raw kernel tensor (direction for weight norm).
    pub fn kernel_index(&self) -> usize {
        match self.kernel_params {
            KernelParams::Weight { direction, .. } => direction,
            KernelParams::Spectral { weight, .. } => weight,
            KernelParams::Plain { weight } => weight,
        }
    }

    pub fn magnitude_index(&self) -> Option<usize> {
        match self.kernel_params {
            KernelParams::Weight { magnitude, .. } => Some(magnitude),
            _ => None,
        }
    }

    /// Buffer indices of the power-iteration vectors for spectral norm.
    pub fn spectral_buffers(&self) -> Option<(usize, usize)> {
        match self.kernel_params {
            KernelParams::Spectral { u, v, .. } => Some((u, v)),
            _ => None,
        }
    }

    /// The effective (reparameterized) kernel.
    pub fn effective_weight<T: Real, B: Backend<T>>(
        &self,
        be: &mut B,
        params: &[B::V],
        buffers: &ParamStore<T>,
    ) -> B::V {
        match self.kernel_params {
            KernelParams::Weight {
                direction,
                magnitude,
            } => be.weight_norm(&params[direction], &params[magnitude]),
            KernelParams::Spectral { weight, u, v } => {
                be.spectral_norm(&params[weight], buffers.get(u).data(), buffers.get(v).data())
            }
            KernelParams::Plain { weight } => params[weight].clone(),
        }
    }

    pub fn forward<T: Real, B: Backend<T>>(
        &self,
        be: &mut B,
        params: &[B::V],
        buffers: &ParamStore<T>,
        x: &B::V,
    ) -> B::V {
        let w = self.effective_weight(be, params, buffers);
        be.conv1d(x, &w, Some(&params[self.bias]), self.geom)
    }

    /// Copy this layer into `out` with its reparameterization folded into a
    /// plain kernel.
    pub fn collapse<T: Real>(
        &self,
        prefix: &str,
        params: &ParamStore<T>,
        buffers: &ParamStore<T>,
        out: &mut ParamStore<T>,
    ) -> Self {
        let vals = params.values();
        let w = self.effective_weight(&mut crate::autograd::Eager, &vals, buffers);
        let weight = out.push(format!("{prefix}.weight"), w);
        let bias = out.push(format!("{prefix}.bias"), params.get(self.bias).clone());
        Self {
            norm: Norm::Plain,
            kernel_params: KernelParams::Plain { weight },
            bias,
            ..self.clone()
        }
    }

    /// Advance the spectral-norm power iteration by one step.
    pub fn refresh_spectral<T: Real>(&self, params: &ParamStore<T>, buffers: &mut ParamStore<T>) {
        if let KernelParams::Spectral { weight, u, v } = self.kernel_params {
            let w = params.get(weight).clone();
            let mut uu = buffers.get(u).data().to_vec();
            let mut vv = buffers.get(v).data().to_vec();
            ops::power_iteration(&w, &mut uu, &mut vv);
            buffers.get_mut(u).data_mut().copy_from_slice(&uu);
            buffers.get_mut(v).data_mut().copy_from_slice(&vv);
        }
    }
}

/// Largest singular value of a kernel viewed as `(out, in * k)`, by power
/// iteration run to convergence.
pub fn spectral_norm_of<T: Real>(w: &Tensor<T>, iterations: usize) -> f64 {
    let rows = w.shape()[0];
    let width = w.len() / rows;
    let mut u = vec![T::one() / T::from_usize(rows).unwrap().sqrt(); rows];
    let mut v = vec![T::zero(); width];
    for _ in 0..iterations {
        ops::power_iteration(w, &mut u, &mut v);
    }
    ops::bilinear_sigma(w, &u, &v).to_f64_lossy().abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_norm_init_preserves_raw_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamStore::<f64>::new();
        let mut buffers = ParamStore::new();
        let conv = Conv1d::build(
            "c",
            4,
            6,
            3,
            ConvGeom::causal(3, 2),
            Norm::Weight,
            &mut params,
            &mut buffers,
            &mut rng,
        );
        let vals = params.values();
        let w = conv.effective_weight(&mut Eager, &vals, &buffers);
        for (a, b) in w.data().iter().zip(params.get(conv.kernel_index()).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(conv.num_params(), 6 * 4 * 3 + 6 + 6);
    }

    #[test]
    fn spectral_norm_layer_has_unit_leading_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamStore::<f64>::new();
        let mut buffers = ParamStore::new();
        let conv = Conv1d::build(
            "s",
            4,
            8,
            5,
            ConvGeom::symmetric(1, 2, 1),
            Norm::Spectral,
            &mut params,
            &mut buffers,
            &mut rng,
        );
        let vals = params.values();
        let w = conv.effective_weight(&mut Eager, &vals, &buffers);
        let s = spectral_norm_of(&w, 500);
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}
