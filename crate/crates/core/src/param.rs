//! Trainable parameters and seeded initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether decoupled weight decay applies (weight matrices yes, biases/norm scales no).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(name: &str, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        Param {
            name: name.to_string(),
            value: Tensor::zeros(shape.clone()),
            grad: Tensor::zeros(shape.clone()),
            decay: shape.len() >= 2,
        }
    }

    pub fn with_value(name: &str, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape.clone());
        let decay = value.shape.len() >= 2;
        Param { name: name.to_string(), value, grad, decay }
    }

    /// Truncated normal init (clipped at ±2σ), the convention used across
    /// the backbone and heads.
    pub fn trunc_normal(
        name: &str, shape: impl Into<Vec<usize>>, std: f64, rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        for v in p.value.data.iter_mut() {
            *v = T::from_f64(trunc_normal_draw(rng, std));
        }
        p
    }

    /// Uniform init in [-bound, bound] (fan-in style for convs/linears).
    pub fn uniform(
        name: &str, shape: impl Into<Vec<usize>>, bound: f64, rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        for v in p.value.data.iter_mut() {
            *v = T::from_f64(uniform_draw(rng, bound));
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.zero();
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Draw from N(0, std²) rejected outside ±2 std.
pub fn trunc_normal_draw(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Uniform draw in [-bound, bound].
pub fn uniform_draw(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    rng.gen_range(-bound..=bound)
}

/// Total element count over a parameter list.
pub fn count_params<T: Scalar>(params: &[&mut Param<T>]) -> usize {
    params.iter().map(|p| p.numel()).sum()
}
