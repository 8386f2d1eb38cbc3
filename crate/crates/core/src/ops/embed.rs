//! Token embedding lookup.

use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

pub struct Embedding<T> {
    /// [vocab, dim]
    pub weight: Param<T>,
    dim: usize,
}

pub struct EmbeddingCache {
    ids: Vec<usize>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(name: &str, vocab: usize, dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let weight = Param::trunc_normal(&format!("{name}.weight"), vec![vocab, dim], 0.02, rng);
        Embedding { weight, dim }
    }

    /// ids are flat [n_tokens]; output is [n_tokens, dim].
    pub fn forward(&self, ids: &[usize]) -> (Tensor<T>, EmbeddingCache) {
        let vocab = self.weight.value.shape[0];
        let mut out = Tensor::zeros(vec![ids.len(), self.dim]);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < vocab, "token id {id} out of range ({vocab})");
            out.data[r * self.dim..(r + 1) * self.dim]
                .copy_from_slice(&self.weight.value.data[id * self.dim..(id + 1) * self.dim]);
        }
        (out, EmbeddingCache { ids: ids.to_vec() })
    }

    pub fn backward(&mut self, cache: &EmbeddingCache, dy: &Tensor<T>) {
        assert_eq!(dy.len(), cache.ids.len() * self.dim);
        for (r, &id) in cache.ids.iter().enumerate() {
            for i in 0..self.dim {
                let gi = id * self.dim + i;
                self.weight.grad.data[gi] = self.weight.grad.data[gi] + dy.data[r * self.dim + i];
            }
        }
    }
}
