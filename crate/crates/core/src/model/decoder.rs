//! Autoregressive transformer decoder: fused features become 64 memory
//! tokens; a two-layer post-norm decoder with masked self-attention,
//! cross-attention, and a 4× feed-forward block predicts the character
//! sequence. Training is teacher-forced and parallel; inference is greedy.

use crate::ops::{
    gelu, gelu_backward, to_tokens, Embedding, EmbeddingCache, LayerNorm, LayerNormCache, Linear,
    LinearCache, MhaCache, MultiHeadAttention,
};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{CharVocab, EOS, REC_CLASSES, T_MAX};
use rand_chacha::ChaCha8Rng;

/// Start token, used for embeddings only (never predicted).
pub const BOS: usize = REC_CLASSES;
const EMBED_VOCAB: usize = REC_CLASSES + 1;

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("target sequence of length {len} exceeds the decoder maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("prediction and label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub t_max: usize,
}

impl DecoderConfig {
    pub fn full() -> Self {
        DecoderConfig { layers: 2, dim: 384, heads: 8, t_max: T_MAX }
    }

    pub fn toy() -> Self {
        DecoderConfig { layers: 2, dim: 128, heads: 8, t_max: T_MAX }
    }

    pub fn validate(&self) {
        assert!(self.layers > 0 && self.t_max > 0);
        assert!(self.dim % self.heads == 0, "embed dim must divide into heads");
    }
}

struct DecoderLayer<T> {
    self_attn: MultiHeadAttention<T>,
    norm1: LayerNorm<T>,
    cross_attn: MultiHeadAttention<T>,
    norm2: LayerNorm<T>,
    ffn1: Linear<T>,
    ffn2: Linear<T>,
    norm3: LayerNorm<T>,
}

struct LayerCache<T> {
    self_attn: MhaCache<T>,
    norm1: LayerNormCache<T>,
    cross_attn: MhaCache<T>,
    norm2: LayerNormCache<T>,
    ffn1: LinearCache<T>,
    pre_gelu: Tensor<T>,
    ffn2: LinearCache<T>,
    norm3: LayerNormCache<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(&format!("{name}.self_attn"), dim, heads, true, rng),
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(&format!("{name}.cross_attn"), dim, heads, true, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
            ffn1: Linear::new(&format!("{name}.ffn1"), dim, 4 * dim, true, rng),
            ffn2: Linear::new(&format!("{name}.ffn2"), 4 * dim, dim, true, rng),
            norm3: LayerNorm::new(&format!("{name}.norm3"), dim),
        }
    }

    /// Post-norm block: x ← LN(x + sublayer(x)) at each of the three stages.
    fn forward(&self, x: &Tensor<T>, mem: &Tensor<T>) -> (Tensor<T>, LayerCache<T>) {
        let (sa, sa_cache) = self.self_attn.forward(x, x, true);
        let mut pre1 = x.clone();
        pre1.add_assign(&sa);
        let (x1, n1_cache) = self.norm1.forward(&pre1);

        let (ca, ca_cache) = self.cross_attn.forward(&x1, mem, false);
        let mut pre2 = x1.clone();
        pre2.add_assign(&ca);
        let (x2, n2_cache) = self.norm2.forward(&pre2);

        let (h, f1_cache) = self.ffn1.forward(&x2);
        let g = gelu(&h);
        let (f, f2_cache) = self.ffn2.forward(&g);
        let mut pre3 = x2.clone();
        pre3.add_assign(&f);
        let (x3, n3_cache) = self.norm3.forward(&pre3);

        (
            x3,
            LayerCache {
                self_attn: sa_cache,
                norm1: n1_cache,
                cross_attn: ca_cache,
                norm2: n2_cache,
                ffn1: f1_cache,
                pre_gelu: h,
                ffn2: f2_cache,
                norm3: n3_cache,
            },
        )
    }

    /// Returns (dx, dmem).
    fn backward(&mut self, cache: &LayerCache<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let dpre3 = self.norm3.backward(&cache.norm3, dy);
        let dg = self.ffn2.backward(&cache.ffn2, &dpre3);
        let dh = gelu_backward(&cache.pre_gelu, &dg);
        let mut dx2 = self.ffn1.backward(&cache.ffn1, &dh);
        dx2.add_assign(&dpre3);

        let dpre2 = self.norm2.backward(&cache.norm2, &dx2);
        let (dq, dmem) = self.cross_attn.backward(&cache.cross_attn, &dpre2);
        let mut dx1 = dq;
        dx1.add_assign(&dpre2);

        let dpre1 = self.norm1.backward(&cache.norm1, &dx1);
        let (dq2, dkv2) = self.self_attn.backward(&cache.self_attn, &dpre1);
        let mut dx = dq2;
        dx.add_assign(&dkv2);
        dx.add_assign(&dpre1);
        (dx, dmem)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = self.self_attn.params_mut();
        ps.push(&mut self.norm1.gamma);
        ps.push(&mut self.norm1.beta);
        ps.extend(self.cross_attn.params_mut());
        ps.push(&mut self.norm2.gamma);
        ps.push(&mut self.norm2.beta);
        ps.push(&mut self.ffn1.weight);
        ps.push(self.ffn1.bias.as_mut().unwrap());
        ps.push(&mut self.ffn2.weight);
        ps.push(self.ffn2.bias.as_mut().unwrap());
        ps.push(&mut self.norm3.gamma);
        ps.push(&mut self.norm3.beta);
        ps
    }
}

pub struct DecoderCache<T> {
    embed: EmbeddingCache,
    mem_proj: LinearCache<T>,
    layers: Vec<LayerCache<T>>,
    out: LinearCache<T>,
    f_r_shape: Vec<usize>,
}

pub struct Decoder<T> {
    pub config: DecoderConfig,
    embed: Embedding<T>,
    mem_proj: Linear<T>,
    layers: Vec<DecoderLayer<T>>,
    out: Linear<T>,
    pe: Tensor<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(config: DecoderConfig, mem_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        config.validate();
        let embed = Embedding::new("decoder.embed", EMBED_VOCAB, config.dim, rng);
        let mem_proj = Linear::new("decoder.mem_proj", mem_ch, config.dim, true, rng);
        let layers = (0..config.layers)
            .map(|i| DecoderLayer::new(&format!("decoder.layer{i}"), config.dim, config.heads, rng))
            .collect();
        let out = Linear::new("decoder.out", config.dim, REC_CLASSES, true, rng);
        let pe = sinusoidal_pe(config.t_max.max(64), config.dim);
        Decoder { config, embed, mem_proj, layers, out, pe }
    }

    fn add_pe(&self, x: &mut Tensor<T>, tokens: usize) {
        let (n, t, d) = x.dims3();
        assert_eq!(t, tokens);
        assert!(t <= self.pe.shape[0], "sequence longer than the positional table");
        for ni in 0..n {
            for p in 0..t {
                let o = (ni * t + p) * d;
                for i in 0..d {
                    x.data[o + i] = x.data[o + i] + self.pe.data[p * d + i];
                }
            }
        }
    }

    /// Memory tokens from F_r [N,C,H,W]: row-major flatten, project, add PE.
    fn memory(&self, f_r: &Tensor<T>) -> (Tensor<T>, LinearCache<T>) {
        let toks = to_tokens(f_r);
        let (mut mem, cache) = self.mem_proj.forward(&toks);
        let t = mem.shape[1];
        self.add_pe(&mut mem, t);
        (mem, cache)
    }

    /// Run the decoder over already-shifted input token ids [N][T]
    /// (BOS-prefixed); returns next-token logits [N, T, 69].
    pub fn forward_tokens(
        &self, f_r: &Tensor<T>, ids: &[Vec<usize>],
    ) -> (Tensor<T>, DecoderCache<T>) {
        let n = ids.len();
        let t = ids[0].len();
        assert!(ids.iter().all(|s| s.len() == t), "batched sequences must share a length");
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let (mut x, embed_cache) = self.embed.forward(&flat);
        x.shape = vec![n, t, self.config.dim];
        self.add_pe(&mut x, t);
        let (mem, mem_cache) = self.memory(f_r);
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, &mem);
            x = y;
            layer_caches.push(cache);
        }
        let (logits, out_cache) = self.out.forward(&x);
        (
            logits,
            DecoderCache {
                embed: embed_cache,
                mem_proj: mem_cache,
                layers: layer_caches,
                out: out_cache,
                f_r_shape: f_r.shape.clone(),
            },
        )
    }

    /// Teacher-forced training pass. Each target must end with EOS; shorter
    /// sequences are right-padded (padding positions carry no loss and,
    /// by causality, do not affect earlier logits).
    pub fn forward_train(
        &self, f_r: &Tensor<T>, targets: &[Vec<usize>],
    ) -> Result<(Tensor<T>, DecoderCache<T>), DecoderError> {
        let t_pad = targets.iter().map(|s| s.len()).max().unwrap_or(0);
        for s in targets {
            if s.len() > self.config.t_max {
                return Err(DecoderError::SequenceTooLong { len: s.len(), max: self.config.t_max });
            }
            assert_eq!(*s.last().expect("empty target"), EOS, "targets must end with EOS");
        }
        let ids: Vec<Vec<usize>> = targets
            .iter()
            .map(|s| {
                let mut row = Vec::with_capacity(t_pad);
                row.push(BOS);
                row.extend(s.iter().take(s.len() - 1).copied());
                row.resize(t_pad, EOS);
                row
            })
            .collect();
        Ok(self.forward_tokens(f_r, &ids))
    }

    /// Backward through the whole decoder; returns dF_r.
    pub fn backward(&mut self, cache: &DecoderCache<T>, dlogits: &Tensor<T>) -> Tensor<T> {
        let dx_last = self.out.backward(&cache.out, dlogits);
        let mut dx = dx_last;
        let mem_tokens = cache.f_r_shape[2] * cache.f_r_shape[3];
        let mut dmem_total =
            Tensor::zeros(vec![cache.f_r_shape[0], mem_tokens, self.config.dim]);
        for (layer, lcache) in self.layers.iter_mut().zip(cache.layers.iter()).rev() {
            let (dxi, dmem) = layer.backward(lcache, &dx);
            dx = dxi;
            dmem_total.add_assign(&dmem);
        }
        // positional encodings are constants; gradient passes through the add
        let dtoks = self.mem_proj.backward(&cache.mem_proj, &dmem_total);
        let mut dx_flat = dx;
        dx_flat.shape = vec![dx_flat.len() / self.config.dim, self.config.dim];
        self.embed.backward(&cache.embed, &dx_flat);
        crate::ops::from_tokens(
            &dtoks,
            cache.f_r_shape[1],
            cache.f_r_shape[2],
            cache.f_r_shape[3],
        )
    }

    /// Greedy decoding with per-sample EOS termination; returns token ids
    /// (EOS excluded).
    pub fn greedy(&self, f_r: &Tensor<T>) -> Vec<Vec<usize>> {
        let n = f_r.shape[0];
        let mut results = Vec::with_capacity(n);
        for ni in 0..n {
            let chw: usize = f_r.shape[1..].iter().product();
            let mut single = Tensor::zeros(vec![1, f_r.shape[1], f_r.shape[2], f_r.shape[3]]);
            single.data.copy_from_slice(&f_r.data[ni * chw..(ni + 1) * chw]);
            let mut ids = vec![BOS];
            let mut emitted = Vec::new();
            for _ in 0..self.config.t_max {
                let (logits, _) = self.forward_tokens(&single, &[ids.clone()]);
                let t = ids.len();
                let row = &logits.data[(t - 1) * REC_CLASSES..t * REC_CLASSES];
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                if best == EOS {
                    break;
                }
                emitted.push(best);
                ids.push(best);
            }
            results.push(emitted);
        }
        results
    }

    /// Greedy decoding straight to strings.
    pub fn greedy_decode(&self, f_r: &Tensor<T>, vocab: &CharVocab) -> Vec<String> {
        self.greedy(f_r).iter().map(|ids| vocab.decode(ids)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = vec![&mut self.embed.weight];
        ps.push(&mut self.mem_proj.weight);
        ps.push(self.mem_proj.bias.as_mut().unwrap());
        for layer in self.layers.iter_mut() {
            ps.extend(layer.params_mut());
        }
        ps.push(&mut self.out.weight);
        ps.push(self.out.bias.as_mut().unwrap());
        ps
    }
}

/// Standard sinusoidal table [len, dim]: sin on even indices, cos on odd.
fn sinusoidal_pe<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut pe = Tensor::zeros(vec![len, dim]);
    for p in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = p as f64 * freq;
            pe.data[p * dim + 2 * i] = T::from_f64(angle.sin());
            pe.data[p * dim + 2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    pe
}

/// Exact-match rate after case folding both sides.
pub fn word_accuracy(preds: &[String], gts: &[String]) -> Result<f64, DecoderError> {
    if preds.len() != gts.len() {
        return Err(DecoderError::LengthMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts.iter())
        .filter(|(p, g)| p.to_lowercase() == g.to_lowercase())
        .count();
    Ok(hits as f64 / preds.len() as f64)
}
