//! Multi-head scaled-dot-product attention.
//!
//! q = XqWqᵀ, k = XkvWkᵀ, v = XkvWvᵀ, per head: softmax(qkᵀ/√d)·v, heads
//! concatenated and projected by Wo. Optional causal mask for decoding.

use super::linear::{Linear, LinearCache};
use super::{softmax_rows, softmax_rows_backward};
use crate::tensor::{Scalar, Tensor};

pub struct MultiHeadAttention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
    dim: usize,
}

pub struct MhaCache<T> {
    cq: LinearCache<T>,
    ck: LinearCache<T>,
    cv: LinearCache<T>,
    co: LinearCache<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// [N, heads, Tq, Tk]
    probs: Tensor<T>,
}

impl<T> MhaCache<T> {
    /// Attention weights [N, heads, Tq, Tk] from the forward pass.
    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(
        name: &str, dim: usize, heads: usize, bias: bool, rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::new(&format!("{name}.wq"), dim, dim, bias, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, bias, rng),
            wv: Linear::new(&format!("{name}.wv"), dim, dim, bias, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, bias, rng),
            heads,
            dim,
        }
    }

    /// q_in [N,Tq,D], kv_in [N,Tk,D] → [N,Tq,D]. With `causal`, position i
    /// attends to kv positions ≤ i (requires Tq == Tk).
    pub fn forward(
        &self, q_in: &Tensor<T>, kv_in: &Tensor<T>, causal: bool,
    ) -> (Tensor<T>, MhaCache<T>) {
        let (n, tq, d) = q_in.dims3();
        let (n2, tk, d2) = kv_in.dims3();
        assert_eq!(n, n2);
        assert_eq!(d, self.dim);
        assert_eq!(d2, self.dim);
        if causal {
            assert_eq!(tq, tk, "causal mask needs square attention");
        }
        let hd = d / self.heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let (q, cq) = self.wq.forward(q_in);
        let (k, ck) = self.wk.forward(kv_in);
        let (v, cv) = self.wv.forward(kv_in);
        let mut probs = Tensor::zeros(vec![n, self.heads, tq, tk]);
        let mut ctx = Tensor::zeros(vec![n, tq, d]);
        let mut scores = vec![T::zero(); tq * tk];
        for ni in 0..n {
            for h in 0..self.heads {
                let qo = ni * tq * d + h * hd;
                let ko = ni * tk * d + h * hd;
                // scores = Qh · Khᵀ
                T::gemm_view(
                    tq, hd, tk, scale,
                    &q.data, qo, d as isize, 1,
                    &k.data, ko, 1, d as isize,
                    T::zero(),
                    &mut scores, 0, tk as isize, 1,
                );
                if causal {
                    for i in 0..tq {
                        for j in i + 1..tk {
                            scores[i * tk + j] = T::neg_infinity();
                        }
                    }
                }
                softmax_rows(&mut scores, tq, tk);
                let po = ((ni * self.heads) + h) * tq * tk;
                probs.data[po..po + tq * tk].copy_from_slice(&scores);
                // ctx_h = probs · Vh
                T::gemm_view(
                    tq, tk, hd, T::one(),
                    &probs.data, po, tk as isize, 1,
                    &v.data, ko, d as isize, 1,
                    T::zero(),
                    &mut ctx.data, qo, d as isize, 1,
                );
            }
        }
        let (out, co) = self.wo.forward(&ctx);
        (out, MhaCache { cq, ck, cv, co, q, k, v, probs })
    }

    /// Returns (d_q_in, d_kv_in). For self-attention add them at the caller.
    pub fn params_mut(&mut self) -> Vec<&mut crate::param::Param<T>> {
        let mut ps = Vec::new();
        for lin in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            ps.push(&mut lin.weight);
            if let Some(b) = &mut lin.bias {
                ps.push(b);
            }
        }
        ps
    }

    pub fn backward(&mut self, cache: &MhaCache<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let (n, tq, d) = cache.q.dims3();
        let tk = cache.k.shape[1];
        let hd = d / self.heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let dctx = self.wo.backward(&cache.co, dy);
        let mut dq = Tensor::zeros(cache.q.shape.clone());
        let mut dk = Tensor::zeros(cache.k.shape.clone());
        let mut dv = Tensor::zeros(cache.v.shape.clone());
        let mut dprobs = vec![T::zero(); tq * tk];
        let mut dscores = vec![T::zero(); tq * tk];
        for ni in 0..n {
            for h in 0..self.heads {
                let qo = ni * tq * d + h * hd;
                let ko = ni * tk * d + h * hd;
                let po = ((ni * self.heads) + h) * tq * tk;
                let ph = &cache.probs.data[po..po + tq * tk];
                // dV += probsᵀ · dctx_h
                T::gemm_view(
                    tk, tq, hd, T::one(),
                    &cache.probs.data, po, 1, tk as isize,
                    &dctx.data, qo, d as isize, 1,
                    T::one(),
                    &mut dv.data, ko, d as isize, 1,
                );
                // dprobs = dctx_h · Vhᵀ
                T::gemm_view(
                    tq, hd, tk, T::one(),
                    &dctx.data, qo, d as isize, 1,
                    &cache.v.data, ko, 1, d as isize,
                    T::zero(),
                    &mut dprobs, 0, tk as isize, 1,
                );
                softmax_rows_backward(ph, &dprobs, tq, tk, &mut dscores);
                // masked entries have prob 0 → dscores already 0 there
                // dQ += dscores · Kh · scale
                T::gemm_view(
                    tq, tk, hd, scale,
                    &dscores, 0, tk as isize, 1,
                    &cache.k.data, ko, d as isize, 1,
                    T::one(),
                    &mut dq.data, qo, d as isize, 1,
                );
                // dK += dscoresᵀ · Qh · scale
                T::gemm_view(
                    tk, tq, hd, scale,
                    &dscores, 0, 1, tk as isize,
                    &cache.q.data, qo, d as isize, 1,
                    T::one(),
                    &mut dk.data, ko, d as isize, 1,
                );
            }
        }
        let dq_in = self.wq.backward(&cache.cq, &dq);
        let mut dkv = self.wk.backward(&cache.ck, &dk);
        let dkv2 = self.wv.backward(&cache.cv, &dv);
        dkv.add_assign(&dkv2);
        (dq_in, dkv)
    }
}
