//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Real> Moments<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

impl AdamW {
    /// One update of every parameter with its gradient:
    ///
    /// ```text
    /// p <- p * (1 - lr * wd)
    /// m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
    /// p <- p - lr / (1 - b1^t) * m / (sqrt(v) / sqrt(1 - b2^t) + eps)
    /// ```
    ///
    /// Arithmetic is carried out in `f64` and rounded once per stored value.
    /// Parameters whose gradient is `None` (not reached by the loss) are
    /// left untouched, including their moments and weight decay.
    pub fn step<T: Real>(&self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], moments: &mut Moments<T>, lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        moments.t += 1;
        let t = moments.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = lr / bc1;
        let decay = 1.0 - lr * self.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(i).data_mut();
            let m = moments.m.get_mut(i).data_mut();
            let v = moments.v.get_mut(i).data_mut();
            assert_eq!(p.len(), g.len(), "gradient shape mismatch for {i}");
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let g = g.to_f64_lossy();
                let m_new = self.beta1 * m.to_f64_lossy() + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * v.to_f64_lossy() + (1.0 - self.beta2) * g * g;
                *m = T::from_f64_lossy(m_new);
                *v = T::from_f64_lossy(v_new);
                let denom = v_new.sqrt() / bc2_sqrt + self.eps;
                let p_new = p.to_f64_lossy() * decay - step_size * m_new / denom;
                *p = T::from_f64_lossy(p_new);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("p", Tensor::new(vec![vals.len()], vals.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let opt = AdamW::default();
        let mut p = store(&[1.0, -2.0]);
        let mut mo = Moments::zeros_like(&p);
        for _ in 0..3 {
            opt.step(&mut p, &[Some(Tensor::zeros(vec![2]))], &mut mo, 0.1);
        }
        let f = (1.0f64 - 0.1 * 0.01).powi(3);
        assert!((p.get(0).data()[0] - f).abs() < 1e-15);
        assert!((p.get(0).data()[1] + 2.0 * f).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = store(&[0.5, 0.5]);
        let mut mo = Moments::zeros_like(&p);
        opt.step(&mut p, &[Some(Tensor::new(vec![2], vec![3.0, -0.2]))], &mut mo, 1e-3);
        assert!((p.get(0).data()[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((p.get(0).data()[1] - (0.5 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_identity() {
        let opt = AdamW::default();
        let mut s = ParamStore::<f32>::new();
        s.push("p", Tensor::new(vec![3], vec![0.1, -7.25, 3e-5]));
        let before = s.clone();
        let mut mo = Moments::zeros_like(&s);
        opt.step(&mut s, &[Some(Tensor::new(vec![3], vec![1.0, 2.0, -3.0]))], &mut mo, 0.0);
        assert_eq!(s, before);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut p = store(&[1.0]);
        let mut mo = Moments::zeros_like(&p);
        AdamW::default().step(&mut p, &[None], &mut mo, 0.1);
        assert_eq!(p.get(0).data()[0], 1.0);
        assert_eq!(mo.t, 1);
    }
}
