//! 2×2 stride-2 max pooling (the only pooling the localization net needs).

use crate::tensor::{Scalar, Tensor};

pub struct MaxPoolCache {
    pub argmax: Vec<usize>,
    pub in_shape: Vec<usize>,
}

pub fn max_pool2x2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, MaxPoolCache) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2x2 needs even spatial dims, got {h}×{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(vec![n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    for nc in 0..n * c {
        let xo = nc * h * w;
        let yo = nc * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let base = xo + (oy * 2) * w + ox * 2;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                y.data[yo + oy * wo + ox] = x.data[best];
                argmax[yo + oy * wo + ox] = best;
            }
        }
    }
    (y, MaxPoolCache { argmax, in_shape: x.shape.clone() })
}

pub fn max_pool2x2_backward<T: Scalar>(cache: &MaxPoolCache, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(cache.in_shape.clone());
    for (i, &src) in cache.argmax.iter().enumerate() {
        dx.data[src] = dx.data[src] + dy.data[i];
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_picks_max_and_routes_grad() {
        let x = Tensor {
            shape: vec![1, 1, 2, 4],
            data: vec![1.0f64, 5.0, 2.0, 0.0, 3.0, -1.0, 7.0, 2.0],
        };
        let (y, cache) = max_pool2x2(&x);
        assert_eq!(y.data, vec![5.0, 7.0]);
        let dy = Tensor { shape: vec![1, 1, 1, 2], data: vec![10.0, 20.0] };
        let dx = max_pool2x2_backward(&cache, &dy);
        assert_eq!(dx.data, vec![0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 20.0, 0.0]);
    }
}
