//! Fully connected layer over the trailing axis: y = x·Wᵀ + b.

use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

pub struct Linear<T> {
    /// [out, in]
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_dim: usize,
    out_dim: usize,
}

pub struct LinearCache<T> {
    x: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(
        name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Param::uniform(&format!("{name}.weight"), vec![out_dim, in_dim], bound, rng);
        let bias = bias.then(|| Param::uniform(&format!("{name}.bias"), vec![out_dim], bound, rng));
        Linear { weight, bias, in_dim, out_dim }
    }

    /// Zero-initialized layer (used where identity behavior at init matters).
    pub fn zeros(name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = Param::zeros(&format!("{name}.weight"), vec![out_dim, in_dim]);
        let bias = bias.then(|| Param::zeros(&format!("{name}.bias"), vec![out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// x may have any leading shape; the last axis must equal in_dim.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LinearCache<T>) {
        assert_eq!(x.shape.last(), Some(&self.in_dim), "{}: bad input dim", self.weight.name);
        let m = x.len() / self.in_dim;
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = self.out_dim;
        let mut y = Tensor::zeros(shape);
        // y = x · Wᵀ
        T::gemm_view(
            m, self.in_dim, self.out_dim, T::one(),
            &x.data, 0, self.in_dim as isize, 1,
            &self.weight.value.data, 0, 1, self.in_dim as isize,
            T::zero(),
            &mut y.data, 0, self.out_dim as isize, 1,
        );
        if let Some(b) = &self.bias {
            for r in 0..m {
                let row = &mut y.data[r * self.out_dim..(r + 1) * self.out_dim];
                for (v, &bv) in row.iter_mut().zip(b.value.data.iter()) {
                    *v = *v + bv;
                }
            }
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let m = cache.x.len() / self.in_dim;
        assert_eq!(dy.len(), m * self.out_dim);
        // dW += dyᵀ · x
        T::gemm_view(
            self.out_dim, m, self.in_dim, T::one(),
            &dy.data, 0, 1, self.out_dim as isize,
            &cache.x.data, 0, self.in_dim as isize, 1,
            T::one(),
            &mut self.weight.grad.data, 0, self.in_dim as isize, 1,
        );
        if let Some(b) = &mut self.bias {
            for r in 0..m {
                for i in 0..self.out_dim {
                    b.grad.data[i] = b.grad.data[i] + dy.data[r * self.out_dim + i];
                }
            }
        }
        // dx = dy · W
        let mut dx = Tensor::zeros(cache.x.shape.clone());
        T::gemm(m, self.out_dim, self.in_dim, T::one(), &dy.data, &self.weight.value.data, T::zero(), &mut dx.data);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::<f64>::new("l", 5, 3, true, &mut rng);
        let x = Tensor {
            shape: vec![2, 4, 5],
            data: (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let (y, _) = lin.forward(&x);
        assert_eq!(y.shape, vec![2, 4, 3]);
        for r in 0..8 {
            for o in 0..3 {
                let mut acc = lin.bias.as_ref().unwrap().value.data[o];
                for i in 0..5 {
                    acc += x.data[r * 5 + i] * lin.weight.value.data[o * 5 + i];
                }
                assert!((y.data[r * 3 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::<f64>::new("l", 4, 3, true, &mut rng);
        let x = Tensor { shape: vec![3, 4], data: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let dout = Tensor { shape: vec![3, 3], data: (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let (_, cache) = lin.forward(&x);
        let dx = lin.backward(&cache, &dout);
        let eval = |lin: &Linear<f64>, x: &Tensor<f64>| -> f64 {
            lin.forward(x).0.data.iter().zip(dout.data.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..12 {
            let mut p = x.clone();
            let mut m = x.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (eval(&lin, &p) - eval(&lin, &m)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-8);
        }
        for i in 0..12 {
            let save = lin.weight.value.data[i];
            lin.weight.value.data[i] = save + h;
            let lp = eval(&lin, &x);
            lin.weight.value.data[i] = save - h;
            let lm = eval(&lin, &x);
            lin.weight.value.data[i] = save;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - lin.weight.grad.data[i]).abs() < 1e-8);
        }
        let bg = lin.bias.as_ref().unwrap().grad.data.clone();
        for (i, &g) in bg.iter().enumerate() {
            let save = lin.bias.as_ref().unwrap().value.data[i];
            lin.bias.as_mut().unwrap().value.data[i] = save + h;
            let lp = eval(&lin, &x);
            lin.bias.as_mut().unwrap().value.data[i] = save - h;
            let lm = eval(&lin, &x);
            lin.bias.as_mut().unwrap().value.data[i] = save;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g).abs() < 1e-8);
        }
    }
}
