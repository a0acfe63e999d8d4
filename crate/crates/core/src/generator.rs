//! Causal feed-forward WaveNet generator.
//!
//! Layout: a 1x1 input projection to `residual_channels`, then
//! `stacks * layers_per_stack` gated layers. Each gated layer runs a causal
//! dilated convolution producing `2 * residual_channels` channels, applies
//! `tanh(a) * sigmoid(b)` over the two halves, and feeds the result through a
//! 1x1 skip projection (summed across layers) and a 1x1 residual projection
//! (added back to the layer input). A 1x1 head maps the summed skips to the
//! output waveform with no output nonlinearity. Every convolution is weight
//! normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, Eager, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Norm, ParamStore};
use crate::ops::ConvGeom;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub stacks: usize,
    pub layers_per_stack: usize,
    pub kernel_size: usize,
    pub dilation_growth: usize,
    pub residual_channels: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            stacks: 2,
            layers_per_stack: 9,
            kernel_size: 3,
            dilation_growth: 2,
            residual_channels: 16,
            input_channels: 1,
            output_channels: 1,
        }
    }
}

impl GeneratorConfig {
    /// A tiny configuration for hand checks and gradient verification.
    pub fn micro(layers: usize, channels: usize) -> Self {
        Self {
            stacks: 1,
            layers_per_stack: layers,
            residual_channels: channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stacks", self.stacks),
            ("layers_per_stack", self.layers_per_stack),
            ("kernel_size", self.kernel_size),
            ("dilation_growth", self.dilation_growth),
            ("residual_channels", self.residual_channels),
            ("input_channels", self.input_channels),
            ("output_channels", self.output_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("generator.{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Dilation of every gated layer in evaluation order; the schedule
    /// restarts at 1 for each stack.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.stacks)
            .flat_map(|_| (0..self.layers_per_stack).map(|j| self.dilation_growth.pow(j as u32)))
            .collect()
    }

    /// Number of input samples (including the current one) that influence
    /// each output sample.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations().iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GatedLayer {
    dilated: Conv1d,
    skip: Conv1d,
    residual: Conv1d,
}

/// A parameterized generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamStore<T>,
    input: Conv1d,
    layers: Vec<GatedLayer>,
    head: Conv1d,
}

impl<T: Real> Generator<T> {
    /// Build with deterministic initialization drawn from `rng`.
    pub fn build<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        Self::build_with_norm(config, Norm::Weight, rng)
    }

    fn build_with_norm<R: Rng + ?Sized>(config: &GeneratorConfig, norm: Norm, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        // Weight norm carries no extra state.
        let mut buffers = ParamStore::new();
        let c = config.residual_channels;
        let pointwise = ConvGeom::symmetric(1, 0, 1);
        let input = Conv1d::build(
            "gen.input",
            config.input_channels,
            c,
            1,
            pointwise,
            norm,
            &mut params,
            &mut buffers,
            rng,
        );
        let layers = config
            .dilations()
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let dilated = Conv1d::build(
                    &format!("gen.layer{i}.dilated"),
                    c,
                    2 * c,
                    config.kernel_size,
                    ConvGeom::causal(config.kernel_size, d),
                    norm,
                    &mut params,
                    &mut buffers,
                    rng,
                );
                let skip = Conv1d::build(
                    &format!("gen.layer{i}.skip"),
                    c,
                    c,
                    1,
                    pointwise,
                    norm,
                    &mut params,
                    &mut buffers,
                    rng,
                );
                let residual = Conv1d::build(
                    &format!("gen.layer{i}.residual"),
                    c,
                    c,
                    1,
                    pointwise,
                    norm,
                    &mut params,
                    &mut buffers,
                    rng,
                );
                GatedLayer {
                    dilated,
                    skip,
                    residual,
                }
            })
            .collect();
        let head = Conv1d::build(
            "gen.head",
            c,
            config.output_channels,
            1,
            pointwise,
            norm,
            &mut params,
            &mut buffers,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            params,
            input,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Exact number of scalar parameters, magnitudes and biases included.
    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn receptive_field(&self) -> usize {
        self.config.receptive_field()
    }

    /// All convolutions in evaluation order.
    pub fn convs(&self) -> Vec<&Conv1d> {
        let mut out = vec![&self.input];
        for l in &self.layers {
            out.extend([&l.dilated, &l.skip, &l.residual]);
        }
        out.push(&self.head);
        out
    }

    /// Forward pass on any backend. `x` is `(batch, input_channels, time)`.
    pub fn forward_with<B: Backend<T>>(&self, be: &mut B, params: &[B::V], x: &B::V) -> B::V {
        let empty = ParamStore::new();
        let mut h = self.input.forward(be, params, &empty, x);
        let mut skips: Option<B::V> = None;
        for layer in &self.layers {
            let a = layer.dilated.forward(be, params, &empty, &h);
            let z = be.gated_tanh(&a);
            let s = layer.skip.forward(be, params, &empty, &z);
            skips = Some(match skips {
                Some(acc) => be.add(&acc, &s),
                None => s,
            });
            let r = layer.residual.forward(be, params, &empty, &z);
            h = be.add(&h, &r);
        }
        let skips = skips.expect("at least one gated layer");
        self.head.forward(be, params, &empty, &skips)
    }

    /// Record a forward pass on `graph` with parameters as differentiable
    /// leaves. Returns the parameter leaves (in [`ParamStore`] order) and
    /// the output node.
    pub fn forward_graph(&self, graph: &mut Graph<T>, x: Var) -> (Vec<Var>, Var) {
        let leaves = self.params.leaves(graph);
        let y = self.forward_with(graph, &leaves, &x);
        (leaves, y)
    }

    /// Evaluate a `(batch, input_channels, time)` tensor without recording.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if let Some(index) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { index });
        }
        if x.shape().len() != 3 || x.shape()[1] != self.config.input_channels || x.shape()[2] == 0 {
            return Err(Error::Shape {
                component: "generator".into(),
                reason: format!(
                    "expected (batch, {}, time >= 1), got {:?}",
                    self.config.input_channels,
                    x.shape()
                ),
            });
        }
        let params = self.params.values();
        Ok(self.forward_with(&mut Eager, &params, x))
    }

    /// Run a mono signal through the generator.
    pub fn process(&self, signal: &[T]) -> Result<Vec<T>> {
        let x = Tensor::new(vec![1, 1, signal.len()], signal.to_vec());
        Ok(self.forward(&x)?.into_data())
    }

    /// Process a mono signal in chunks of `chunk` output samples, each fed with
    /// up to `receptive_field - 1` samples of history. The result is
    /// bit-identical to [`Generator::process`] on the whole signal.
    pub fn process_chunked(&self, signal: &[T], chunk: usize) -> Result<Vec<T>> {
        assert!(chunk > 0);
        let history = self.receptive_field() - 1;
        let mut out = Vec::with_capacity(signal.len());
        let mut start = 0;
        while start < signal.len() {
            let end = (start + chunk).min(signal.len());
            // Before the history is full, start from 0 so zero padding is
            // applied layer by layer exactly as in the one-shot pass.
            let from = start.saturating_sub(history);
            let y = self.process(&signal[from..end])?;
            out.extend_from_slice(&y[start - from..]);
            start = end;
        }
        Ok(out)
    }

    /// An equivalent generator whose kernels are plain weights with the
    /// weight-norm reparameterization folded in.
    pub fn collapse_weight_norm(&self) -> Self {
        let empty = ParamStore::new();
        let mut params = ParamStore::new();
        let input = self.input.collapse("gen.input", &self.params, &empty, &mut params);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| GatedLayer {
                dilated: l
                    .dilated
                    .collapse(&format!("gen.layer{i}.dilated"), &self.params, &empty, &mut params),
                skip: l
                    .skip
                    .collapse(&format!("gen.layer{i}.skip"), &self.params, &empty, &mut params),
                residual: l
                    .residual
                    .collapse(&format!("gen.layer{i}.residual"), &self.params, &empty, &mut params),
            })
            .collect();
        let head = self.head.collapse("gen.head", &self.params, &empty, &mut params);
        Self {
            config: self.config.clone(),
            params,
            input,
            layers,
            head,
        }
    }

    /// Replace parameter values by name; shapes must match.
    pub fn load_params(&mut self, source: &ParamStore<T>) -> Result<()> {
        if source.len() != self.params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "generator expects {} tensors, found {}",
                self.params.len(),
                source.len()
            )));
        }
        for i in 0..self.params.len() {
            let name = self.params.name(i).to_string();
            let j = source
                .index_of(&name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
            if source.get(j).shape() != self.params.get(i).shape() {
                return Err(Error::CorruptCheckpoint(format!("shape mismatch for {name}")));
            }
            *self.params.get_mut(i) = source.get(j).clone();
        }
        Ok(())
    }
}
