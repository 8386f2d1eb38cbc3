//! Decoupled-weight-decay adaptive-moment optimizer and gradient clipping.

use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

/// First/second-moment state, ordered exactly like the parameter list it
/// was built from.
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[&mut Param<T>], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.value.shape.clone())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value.shape.clone())).collect();
        AdamW { beta1, beta2, weight_decay, step: 0, m, v }
    }

    /// One update with the given learning rate; weight decay only touches
    /// parameters flagged for it (weight matrices, not biases/norm scales).
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(t));
        let eps = T::from_f64(ADAM_EPS);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(lr * self.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            assert_eq!(m.len(), p.value.len(), "parameter {} changed size", p.name);
            let decay = p.decay;
            for j in 0..p.value.len() {
                let g = p.grad.data[j];
                let mj = b1 * m.data[j] + (one - b1) * g;
                let vj = b2 * v.data[j] + (one - b2) * g * g;
                m.data[j] = mj;
                v.data[j] = vj;
                let mhat = mj / bias1;
                let vhat = vj / bias2;
                let mut upd = lr_t * mhat / (vhat.sqrt() + eps);
                if decay {
                    upd = upd + wd * p.value.data[j];
                }
                p.value.data[j] = p.value.data[j] - upd;
            }
        }
    }
}

/// Global-norm gradient clipping; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut Param<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params.iter() {
        for &g in p.grad.data.iter() {
            let g = g.as_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            for g in p.grad.data.iter_mut() {
                *g = *g * scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, values: &[f64], decay: bool) -> Param<f64> {
        let mut p = Param::zeros(name, vec![values.len(), 1]);
        p.value.data.copy_from_slice(values);
        p.decay = decay;
        p
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = param("w", &[1.0], true);
        p.grad.data[0] = 0.5;
        let mut opt = {
            let refs = [&mut p];
            AdamW::new(&refs, 0.9, 0.999, 0.01)
        };
        let lr = 0.1;
        {
            let mut refs = [&mut p];
            opt.step(&mut refs, lr);
        }
        // m̂ = g, v̂ = g² after bias correction at t=1
        let g = 0.5f64;
        let want = 1.0 - lr * (g / (g.powi(2).sqrt() + ADAM_EPS)) - lr * 0.01 * 1.0;
        assert!((p.value.data[0] - want).abs() < 1e-12);
    }

    #[test]
    fn decay_skips_flagged_off_parameters() {
        // zero gradient: the only possible movement is weight decay
        let mut w = param("w", &[2.0], true);
        let mut b = param("b", &[2.0], false);
        let mut opt = {
            let refs = [&mut w, &mut b];
            AdamW::new(&refs, 0.9, 0.999, 0.5)
        };
        {
            let mut refs = [&mut w, &mut b];
            opt.step(&mut refs, 0.1);
        }
        assert!(w.value.data[0] < 2.0, "decayed weight must shrink");
        assert_eq!(b.value.data[0], 2.0, "no-decay parameter must not move on zero grad");
    }

    #[test]
    fn adam_sgd_limit_decreases_a_quadratic() {
        // minimize f(x) = x² from x = 3
        let mut x = param("x", &[3.0], false);
        let mut opt = {
            let refs = [&mut x];
            AdamW::new(&refs, 0.9, 0.999, 0.0)
        };
        for _ in 0..400 {
            x.grad.data[0] = 2.0 * x.value.data[0];
            let mut refs = [&mut x];
            opt.step(&mut refs, 0.05);
            x.grad.data[0] = 0.0;
        }
        assert!(x.value.data[0].abs() < 0.05, "got {}", x.value.data[0]);
    }

    #[test]
    fn clipping_rescales_only_above_threshold() {
        let mut a = param("a", &[0.0, 0.0], false);
        a.grad.data.copy_from_slice(&[3.0, 4.0]);
        let norm = {
            let mut refs = [&mut a];
            clip_grad_norm(&mut refs, 10.0)
        };
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(a.grad.data, vec![3.0, 4.0], "below threshold leaves grads alone");
        let norm = {
            let mut refs = [&mut a];
            clip_grad_norm(&mut refs, 1.0)
        };
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped = (a.grad.data[0].powi(2) + a.grad.data[1].powi(2)).sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }
}
