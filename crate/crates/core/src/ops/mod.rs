//! Differentiable building blocks: each op exposes `forward` returning an
//! output plus a cache, and `backward` consuming the cache, accumulating
//! parameter gradients in place and returning input gradients.

pub mod act;
pub mod attention;
pub mod conv;
pub mod embed;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod sample;

pub use act::{
    gelu, gelu_backward, hardtanh, hardtanh_backward, relu, relu_backward, tanh_act, tanh_backward,
};
pub use attention::{MhaCache, MultiHeadAttention};
pub use conv::{Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache};
pub use embed::{Embedding, EmbeddingCache};
pub use linear::{Linear, LinearCache};
pub use norm::{
    BatchNorm2d, BatchNorm2dCache, Grn, GrnCache, LayerNorm, LayerNorm2d, LayerNorm2dCache,
    LayerNormCache,
};
pub use pool::{max_pool2x2, max_pool2x2_backward, MaxPoolCache};
pub use sample::{
    grid_sample, grid_sample_backward, grid_sample_oracle, identity_grid, resize_bilinear,
    resize_bilinear_backward, GridSampleCache, ResizeCache,
};

use crate::tensor::{Scalar, Tensor};

/// [N,C,H,W] → [N,H·W,C] token matrix (row-major spatial order).
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut t = Tensor::zeros(vec![n, hw, c]);
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * hw;
            for p in 0..hw {
                t.data[(ni * hw + p) * c + ci] = x.data[src + p];
            }
        }
    }
    t
}

/// Inverse of `to_tokens` (also its adjoint, since it is a permutation).
pub fn from_tokens<T: Scalar>(t: &Tensor<T>, c: usize, h: usize, w: usize) -> Tensor<T> {
    let (n, hw, c2) = t.dims3();
    assert_eq!((hw, c2), (h * w, c));
    let mut x = Tensor::zeros(vec![n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let dst = (ni * c + ci) * hw;
            for p in 0..hw {
                x.data[dst + p] = t.data[(ni * hw + p) * c + ci];
            }
        }
    }
    x
}

/// Row-wise softmax in place over a [rows, cols] buffer.
pub fn softmax_rows<T: Scalar>(x: &mut [T], rows: usize, cols: usize) {
    assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut m = T::neg_infinity();
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Gradient of row-wise softmax: dx = y ⊙ (dy − Σ_j y_j dy_j).
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], rows: usize, cols: usize, dx: &mut [T]) {
    assert_eq!(y.len(), rows * cols);
    assert_eq!(dy.len(), rows * cols);
    assert_eq!(dx.len(), rows * cols);
    for r in 0..rows {
        let o = r * cols;
        let mut dot = T::zero();
        for j in 0..cols {
            dot = dot + y[o + j] * dy[o + j];
        }
        for j in 0..cols {
            dx[o + j] = y[o + j] * (dy[o + j] - dot);
        }
    }
}
