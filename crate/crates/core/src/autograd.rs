//! Tape-based reverse-mode differentiation and the eager (no-tape) backend.
//!
//! Models are written once against [`Backend`]; [`Graph`] records a tape for
//! training and gradient checks, [`Eager`] evaluates directly and keeps no
//! intermediates, which is what inference over long files needs.

use crate::ops::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Operator set shared by the models.
pub trait Backend<T: Real> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    fn conv1d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, geom: ConvGeom) -> Self::V;
    fn weight_norm(&mut self, v: &Self::V, g: &Self::V) -> Self::V;
    fn spectral_norm(&mut self, w: &Self::V, u: &[T], v: &[T]) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn gated_tanh(&mut self, x: &Self::V) -> Self::V;
    fn leaky_relu(&mut self, x: &Self::V, slope: T) -> Self::V;
    fn avg_pool(&mut self, x: &Self::V, k: usize) -> Self::V;
    fn period_fold(&mut self, x: &Self::V, period: usize) -> Self::V;
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    WeightNorm {
        v: Var,
        g: Var,
    },
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
    Add(Var, Var),
    GatedTanh(Var),
    LeakyRelu(Var, T),
    AvgPool(Var, usize),
    PeriodFold(Var, usize),
    Mean(Var),
    NegMean(Var),
    HingeReal(Var),
    HingeFake(Var),
    Sum(Vec<Var>),
    Esr {
        pred: Var,
        target_p: Vec<T>,
        coeff: Option<T>,
        denom: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that blocks gradient flow.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.get(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// `-mean(x)`
    pub fn neg_mean(&mut self, x: Var) -> Var {
        let m = -self.get(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::NegMean(x), rg)
    }

    /// `mean(max(0, 1 - x))`
    pub fn hinge_real(&mut self, x: Var) -> Var {
        let t = self.get(x);
        let n = T::from_usize(t.len()).unwrap();
        let s = t
            .data()
            .iter()
            .map(|&a| (T::one() - a).max(T::zero()))
            .sum::<T>()
            / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::HingeReal(x), rg)
    }

    /// `mean(max(0, 1 + x))`
    pub fn hinge_fake(&mut self, x: Var) -> Var {
        let t = self.get(x);
        let n = T::from_usize(t.len()).unwrap();
        let s = t
            .data()
            .iter()
            .map(|&a| (T::one() + a).max(T::zero()))
            .sum::<T>()
            / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::HingeFake(x), rg)
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let s = xs.iter().map(|&v| self.get(v).data()[0]).sum::<T>();
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::scalar(s), Op::Sum(xs.to_vec()), rg)
    }

    /// Batch-pooled error-to-signal ratio of `pred` against a constant target,
    /// both shaped `(B, 1, L)`, with optional per-row pre-emphasis.
    ///
    /// Returns `None` when the (pre-emphasized) target has zero energy.
    pub fn esr(&mut self, pred: Var, target: &Tensor<T>, coeff: Option<T>) -> Option<Var> {
        let p = self.get(pred);
        assert_eq!(p.shape(), target.shape(), "esr shape mismatch");
        let row = *p.shape().last().unwrap();
        let (target_p, pred_p) = match coeff {
            Some(c) => (
                ops::preemphasis_rows(target.data(), row, c),
                ops::preemphasis_rows(p.data(), row, c),
            ),
            None => (target.data().to_vec(), p.data().to_vec()),
        };
        let denom: T = target_p.iter().map(|&a| a * a).sum();
        if denom <= T::zero() {
            return None;
        }
        let num: T = target_p
            .iter()
            .zip(&pred_p)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let rg = self.rg(pred);
        Some(self.push(
            Tensor::scalar(num / denom),
            Op::Esr {
                pred,
                target_p,
                coeff,
                denom,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node. Gradients are retained for `param`
    /// leaves only; interior gradients are dropped once propagated.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.get(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gy);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.map(|b| self.rg(b)).unwrap_or(false));
                let g = ops::conv1d_backward(self.get(*x), self.get(*w), gy, geom, need);
                if let Some(gx) = g.x {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = g.w {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, g.b) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::WeightNorm { v, g } => {
                let (gv, gg) = ops::weight_norm_backward(self.get(*v), self.get(*g), gy);
                self.accumulate(grads, *v, gv);
                self.accumulate(grads, *g, gg);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let gw = ops::spectral_norm_backward(self.get(*w), u, v, *sigma, gy);
                self.accumulate(grads, *w, gw);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::GatedTanh(x) => {
                let gx = ops::gated_tanh_backward(self.get(*x), gy);
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let gx = ops::leaky_relu_backward(self.get(*x), gy, *slope);
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool(x, k) => {
                let gx = ops::avg_pool_backward(self.get(*x).shape(), gy, *k);
                self.accumulate(grads, *x, gx);
            }
            Op::PeriodFold(x, p) => {
                let gx = ops::period_fold_backward(self.get(*x).shape(), gy, *p);
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) | Op::NegMean(x) => {
                let xv = self.get(*x);
                let n = T::from_usize(xv.len()).unwrap();
                let sign = if matches!(op, Op::NegMean(_)) { -T::one() } else { T::one() };
                let g = sign * gy.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), g));
            }
            Op::HingeReal(x) | Op::HingeFake(x) => {
                let xv = self.get(*x);
                let n = T::from_usize(xv.len()).unwrap();
                let g = gy.data()[0] / n;
                let real = matches!(op, Op::HingeReal(_));
                let gx = xv.map(|a| {
                    if real {
                        if a < T::one() {
                            -g
                        } else {
                            T::zero()
                        }
                    } else if a > -T::one() {
                        g
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(xs) => {
                for &x in xs {
                    self.accumulate(grads, x, gy.clone());
                }
            }
            Op::Esr {
                pred,
                target_p,
                coeff,
                denom,
            } => {
                let p = self.get(*pred);
                let row = *p.shape().last().unwrap();
                let pred_p = match coeff {
                    Some(c) => ops::preemphasis_rows(p.data(), row, *c),
                    None => p.data().to_vec(),
                };
                let scale = T::from_f64_lossy(-2.0) * gy.data()[0] / *denom;
                let ge: Vec<T> = target_p
                    .iter()
                    .zip(&pred_p)
                    .map(|(&a, &b)| scale * (a - b))
                    .collect();
                let gx = match coeff {
                    Some(c) => ops::preemphasis_rows_transpose(&ge, row, *c),
                    None => ge,
                };
                self.accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), gx));
            }
        }
    }
}

impl<T: Real> Backend<T> for Graph<T> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.get(*v)
    }

    fn conv1d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeom) -> Var {
        let y = ops::conv1d_forward(self.get(*x), self.get(*w), b.map(|b| self.get(*b)), &geom);
        let rg = self.rg(*x) || self.rg(*w) || b.map(|b| self.rg(*b)).unwrap_or(false);
        self.push(
            y,
            Op::Conv1d {
                x: *x,
                w: *w,
                b: b.copied(),
                geom,
            },
            rg,
        )
    }

    fn weight_norm(&mut self, v: &Var, g: &Var) -> Var {
        let w = ops::weight_norm_forward(self.get(*v), self.get(*g));
        let rg = self.rg(*v) || self.rg(*g);
        self.push(w, Op::WeightNorm { v: *v, g: *g }, rg)
    }

    fn spectral_norm(&mut self, w: &Var, u: &[T], v: &[T]) -> Var {
        let (out, sigma) = ops::spectral_norm_forward(self.get(*w), u, v);
        let rg = self.rg(*w);
        self.push(
            out,
            Op::SpectralNorm {
                w: *w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            rg,
        )
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let mut y = self.get(*a).clone();
        y.add_assign(self.get(*b));
        let rg = self.rg(*a) || self.rg(*b);
        self.push(y, Op::Add(*a, *b), rg)
    }

    fn gated_tanh(&mut self, x: &Var) -> Var {
        let y = ops::gated_tanh_forward(self.get(*x));
        let rg = self.rg(*x);
        self.push(y, Op::GatedTanh(*x), rg)
    }

    fn leaky_relu(&mut self, x: &Var, slope: T) -> Var {
        let y = ops::leaky_relu_forward(self.get(*x), slope);
        let rg = self.rg(*x);
        self.push(y, Op::LeakyRelu(*x, slope), rg)
    }

    fn avg_pool(&mut self, x: &Var, k: usize) -> Var {
        let y = ops::avg_pool_forward(self.get(*x), k);
        let rg = self.rg(*x);
        self.push(y, Op::AvgPool(*x, k), rg)
    }

    fn period_fold(&mut self, x: &Var, period: usize) -> Var {
        let y = ops::period_fold_forward(self.get(*x), period);
        let rg = self.rg(*x);
        self.push(y, Op::PeriodFold(*x, period), rg)
    }
}

/// Direct evaluation without a tape.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Real> Backend<T> for Eager {
    type V = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv1d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geom: ConvGeom) -> Tensor<T> {
        ops::conv1d_forward(x, w, b, &geom)
    }

    fn weight_norm(&mut self, v: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        ops::weight_norm_forward(v, g)
    }

    fn spectral_norm(&mut self, w: &Tensor<T>, u: &[T], v: &[T]) -> Tensor<T> {
        ops::spectral_norm_forward(w, u, v).0
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let mut y = a.clone();
        y.add_assign(b);
        y
    }

    fn gated_tanh(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::gated_tanh_forward(x)
    }

    fn leaky_relu(&mut self, x: &Tensor<T>, slope: T) -> Tensor<T> {
        ops::leaky_relu_forward(x, slope)
    }

    fn avg_pool(&mut self, x: &Tensor<T>, k: usize) -> Tensor<T> {
        ops::avg_pool_forward(x, k)
    }

    fn period_fold(&mut self, x: &Tensor<T>, period: usize) -> Tensor<T> {
        ops::period_fold_forward(x, period)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_block_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(vec![1, 1, 3], vec![0.5, -2.0, 1.5]));
        let b = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]));
        let s = g.add(&a, &b);
        let loss = g.mean(s);
        let grads = g.backward(loss);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(a).unwrap().data(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn hinge_nodes_saturate() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![4], vec![2.0, 1.5, 0.0, -3.0]));
        let r = g.hinge_real(x);
        let f = g.hinge_fake(x);
        assert!((g.get(r).data()[0] - 0.25 * (0.0 + 0.0 + 1.0 + 4.0)).abs() < 1e-15);
        assert!((g.get(f).data()[0] - 0.25 * (3.0 + 2.5 + 1.0 + 0.0)).abs() < 1e-15);
        let grads = g.backward(r);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, -0.25, -0.25]);
    }
}
