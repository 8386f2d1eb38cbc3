//! Elementwise activations. Each forward returns the output; backward takes
//! whichever tensor (input or output) the derivative needs.

use crate::tensor::{Scalar, Tensor};

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let mut y = Tensor::zeros(x.shape.clone());
    for (o, &v) in y.data.iter_mut().zip(x.data.iter()) {
        let t = (c * (v + a * v * v * v)).tanh();
        *o = half * v * (T::one() + t);
    }
    y
}

/// d/dx of the tanh-approximated GELU, evaluated from the cached input.
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let mut dx = Tensor::zeros(x.shape.clone());
    for i in 0..x.len() {
        let v = x.data[i];
        let t = (c * (v + a * v * v * v)).tanh();
        let dtanh = (T::one() - t * t) * c * (T::one() + three * a * v * v);
        dx.data[i] = dy.data[i] * (half * (T::one() + t) + half * v * dtanh);
    }
    dx
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.shape.clone());
    for (o, &v) in y.data.iter_mut().zip(x.data.iter()) {
        *o = if v > T::zero() { v } else { T::zero() };
    }
    y
}

/// Backward from the cached *output* (mask y > 0 equals mask x > 0).
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(y.shape.clone());
    for i in 0..y.len() {
        dx.data[i] = if y.data[i] > T::zero() { dy.data[i] } else { T::zero() };
    }
    dx
}

/// Clamp to [-1, 1]; used to keep predicted control points in the grid range.
pub fn hardtanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.shape.clone());
    let one = T::one();
    for (o, &v) in y.data.iter_mut().zip(x.data.iter()) {
        *o = if v > one {
            one
        } else if v < -one {
            -one
        } else {
            v
        };
    }
    y
}

pub fn hardtanh_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.shape.clone());
    let one = T::one();
    for i in 0..x.len() {
        let v = x.data[i];
        dx.data[i] = if v > -one && v < one { dy.data[i] } else { T::zero() };
    }
    dx
}

pub fn tanh_act<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.shape.clone());
    for (o, &v) in y.data.iter_mut().zip(x.data.iter()) {
        *o = v.tanh();
    }
    y
}

/// Backward from the cached output: dx = dy·(1 − y²).
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(y.shape.clone());
    for i in 0..y.len() {
        dx.data[i] = dy.data[i] * (T::one() - y.data[i] * y.data[i]);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        // well-known values of the tanh approximation
        let x = Tensor { shape: vec![3], data: vec![0.0f64, 1.0, -1.0] };
        let y = gelu(&x);
        assert!((y.data[0]).abs() < 1e-15);
        assert!((y.data[1] - 0.8411919906082768).abs() < 1e-12);
        assert!((y.data[2] + 0.15880800939172324).abs() < 1e-12);
    }

    #[test]
    fn elementwise_backwards_match_fd() {
        let xs = vec![-2.0f64, -0.7, -0.2, 0.31, 0.9, 1.7];
        let x = Tensor { shape: vec![6], data: xs };
        let dy = Tensor { shape: vec![6], data: vec![0.3, -1.1, 0.7, 0.2, -0.5, 0.9] };
        let h = 1e-6;
        let check = |f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>, dx: &Tensor<f64>, tol: f64| {
            for i in 0..6 {
                let mut p = x.clone();
                let mut m = x.clone();
                p.data[i] += h;
                m.data[i] -= h;
                let lp: f64 = f(&p).data.iter().zip(dy.data.iter()).map(|(a, b)| a * b).sum();
                let lm: f64 = f(&m).data.iter().zip(dy.data.iter()).map(|(a, b)| a * b).sum();
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - dx.data[i]).abs() < tol, "i={i}: {fd} vs {}", dx.data[i]);
            }
        };
        check(&|x| gelu(x), &gelu_backward(&x, &dy), 1e-8);
        check(&|x| relu(x), &relu_backward(&relu(&x), &dy), 1e-8);
        check(&|x| tanh_act(x), &tanh_backward(&tanh_act(&x), &dy), 1e-8);
        check(&|x| hardtanh(x), &hardtanh_backward(&x, &dy), 1e-8);
    }
}
