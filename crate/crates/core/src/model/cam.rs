//! End-to-end model: rectifier → backbone → glyph segmentation head →
//! aligned fusion → transformer decoder, trained under the joint loss.

use crate::model::align_fuse::{AlignFuse, FuseCache, FusionSpec, FusionStrategy};
use crate::model::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::model::decoder::{Decoder, DecoderCache, DecoderConfig, DecoderError};
use crate::model::glyph_seg::{SegCache, SegHead};
use crate::model::rectifier::{Rectifier, RectifierCache};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::CharVocab;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    Toy,
    Nano,
    Tiny,
    Base,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] =
        [ModelVariant::Toy, ModelVariant::Nano, ModelVariant::Tiny, ModelVariant::Base];

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Toy => "toy",
            ModelVariant::Nano => "nano",
            ModelVariant::Tiny => "tiny",
            ModelVariant::Base => "base",
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        match self {
            ModelVariant::Toy => BackboneConfig::toy(),
            ModelVariant::Nano => BackboneConfig::nano(),
            ModelVariant::Tiny => BackboneConfig::tiny(),
            ModelVariant::Base => BackboneConfig::base(),
        }
    }

    pub fn decoder_dim(&self) -> usize {
        match self {
            ModelVariant::Toy => 128,
            _ => 384,
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ModelVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown model variant `{s}` (toy|nano|tiny|base)"))
    }
}

pub struct CamCache<T> {
    rect: RectifierCache<T>,
    backbone: BackboneCache<T>,
    seg: SegCache<T>,
    fuse: FuseCache<T>,
    dec: DecoderCache<T>,
}

pub struct FeatureCache<T> {
    rect: RectifierCache<T>,
    backbone: BackboneCache<T>,
    seg: SegCache<T>,
    fuse: FuseCache<T>,
}

pub struct CamModel<T> {
    pub rectifier: Rectifier<T>,
    pub backbone: Backbone<T>,
    pub seg: SegHead<T>,
    pub fusion: AlignFuse<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> CamModel<T> {
    pub fn new(variant: ModelVariant, strategy: FusionStrategy, rng: &mut ChaCha8Rng) -> Self {
        Self::with_configs(
            variant.backbone_config(),
            DecoderConfig { dim: variant.decoder_dim(), ..DecoderConfig::full() },
            FusionSpec { strategy, ..FusionSpec::default() },
            rng,
        )
    }

    pub fn with_configs(
        backbone_cfg: BackboneConfig, decoder_cfg: DecoderConfig, fusion: FusionSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        backbone_cfg.validate();
        decoder_cfg.validate();
        let dim = backbone_cfg.out_dim();
        CamModel {
            rectifier: Rectifier::new(rng),
            backbone: Backbone::new(backbone_cfg, rng),
            seg: SegHead::new(dim, rng),
            fusion: AlignFuse::from_spec(dim, &fusion, rng),
            decoder: Decoder::new(decoder_cfg, dim, rng),
        }
    }

    /// Shared trunk: image → (F_r, mask logits, caches).
    pub fn features(
        &mut self, x: &Tensor<T>, train: bool,
    ) -> (Tensor<T>, Tensor<T>, FeatureCache<T>) {
        let (rectified, rect_cache) = self.rectifier.forward(x);
        let (f, backbone_cache) = self.backbone.forward(&rectified);
        let (m, f_c, seg_cache) = self.seg.forward(&f, train);
        let (f_r, fuse_cache) = self.fusion.forward(&f, &f_c);
        (
            f_r,
            m,
            FeatureCache { rect: rect_cache, backbone: backbone_cache, seg: seg_cache, fuse: fuse_cache },
        )
    }

    /// Teacher-forced pass: returns (sequence logits, mask logits, cache).
    pub fn forward_train(
        &mut self, x: &Tensor<T>, targets: &[Vec<usize>], train: bool,
    ) -> Result<(Tensor<T>, Tensor<T>, CamCache<T>), DecoderError> {
        let (f_r, m, feat) = self.features(x, train);
        let (logits, dec_cache) = self.decoder.forward_train(&f_r, targets)?;
        Ok((
            logits,
            m,
            CamCache {
                rect: feat.rect,
                backbone: feat.backbone,
                seg: feat.seg,
                fuse: feat.fuse,
                dec: dec_cache,
            },
        ))
    }

    /// Backward from (dlogits, dmask); accumulates parameter gradients and
    /// returns the input-image gradient.
    pub fn backward(
        &mut self, cache: &CamCache<T>, dlogits: &Tensor<T>, dm: &Tensor<T>,
    ) -> Tensor<T> {
        let df_r = self.decoder.backward(&cache.dec, dlogits);
        let (df_fuse, dfc) = self.fusion.backward(&cache.fuse, &df_r);
        let mut df = self.seg.backward(&cache.seg, dm, &dfc);
        df.add_assign(&df_fuse);
        let drect = self.backbone.backward(&cache.backbone, &df);
        self.rectifier.backward(&cache.rect, &drect)
    }

    /// Greedy inference: images → decoded strings (and mask logits).
    pub fn recognize(&mut self, x: &Tensor<T>, vocab: &CharVocab) -> (Vec<String>, Tensor<T>) {
        let (f_r, m, _) = self.features(x, false);
        (self.decoder.greedy_decode(&f_r, vocab), m)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = self.rectifier.params_mut();
        ps.extend(self.backbone.params_mut());
        ps.extend(self.seg.params_mut());
        ps.extend(self.fusion.params_mut());
        ps.extend(self.decoder.params_mut());
        ps
    }

    /// Non-trainable state that still belongs in checkpoints
    /// (batch-norm running statistics).
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.seg.buffers_mut()
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Per-pixel argmax over mask logits: [N,K,H,W] → per-sample class maps.
pub fn argmax_masks<T: Scalar>(m: &Tensor<T>) -> Vec<Vec<u8>> {
    let (n, k, h, w) = m.dims4();
    let hw = h * w;
    (0..n)
        .map(|ni| {
            (0..hw)
                .map(|p| {
                    let mut best = 0usize;
                    for c in 1..k {
                        if m.data[(ni * k + c) * hw + p] > m.data[(ni * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Fraction of pixels whose argmax matches the ground-truth mask.
pub fn seg_pixel_accuracy<T: Scalar>(m: &Tensor<T>, gts: &[&[u8]]) -> f64 {
    let pred = argmax_masks(m);
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, gt) in pred.iter().zip(gts.iter()) {
        assert_eq!(p.len(), gt.len());
        hits += p.iter().zip(gt.iter()).filter(|(a, b)| a == b).count();
        total += p.len();
    }
    hits as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::objective::{recognition_loss, segmentation_loss};
    use crate::vocab::{EOS, REC_CLASSES, SEG_CLASSES};
    use rand::{Rng, SeedableRng};

    fn micro() -> (BackboneConfig, DecoderConfig) {
        (
            BackboneConfig { depths: [1, 1, 1, 1], dims: [8, 8, 16, 16] },
            DecoderConfig { layers: 2, dim: 16, heads: 8, t_max: 32 },
        )
    }

    #[test]
    fn toy_model_produces_contract_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model =
            CamModel::<f32>::new(ModelVariant::Toy, FusionStrategy::Aligned, &mut rng);
        let mut x = Tensor::zeros(vec![2, 3, 64, 256]);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let targets = vec![vec![4, 9, EOS], vec![11, EOS, EOS]];
        let (logits, m, _) = model.forward_train(&x, &targets, true).unwrap();
        assert_eq!(logits.shape, vec![2, 3, REC_CLASSES]);
        assert_eq!(m.shape, vec![2, SEG_CLASSES, 32, 128]);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let (bc, dc) = micro();
        let mut m1 = CamModel::<f32>::with_configs(bc, dc, FusionSpec::default(), &mut r1);
        let mut m2 = CamModel::<f32>::with_configs(bc, dc, FusionSpec::default(), &mut r2);
        let p1 = m1.params_mut();
        let p2 = m2.params_mut();
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data, b.value.data, "{} differs", a.name);
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (bc, dc) = micro();
        let mut model = CamModel::<f32>::with_configs(bc, dc, FusionSpec::default(), &mut rng);
        let mut seen = std::collections::HashSet::new();
        for p in model.params_mut() {
            assert!(seen.insert(p.name.clone()), "duplicate parameter name {}", p.name);
        }
        for (name, _) in model.buffers_mut() {
            assert!(seen.insert(name.clone()), "buffer name collides: {name}");
        }
    }

    #[test]
    fn joint_gradient_matches_fd_on_sampled_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (bc, dc) = micro();
        let mut model = CamModel::<f64>::with_configs(bc, dc, FusionSpec::default(), &mut rng);
        let mut x = Tensor::zeros(vec![1, 3, 64, 256]);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let targets = vec![vec![2usize, 30, EOS]];
        let mut gt = vec![0u8; 32 * 128];
        for i in 0..gt.len() {
            if i % 7 == 0 {
                gt[i] = ((i / 7) % 68 + 1) as u8;
            }
        }
        let weights = crate::data::compute_pixel_weights::<f64>(&gt, 32, 128).unwrap();

        let loss_of = |model: &mut CamModel<f64>| -> f64 {
            let (logits, m, _) = model.forward_train(&x, &targets, false).unwrap();
            let (lr, _) = recognition_loss(&logits, &targets).unwrap();
            let (ls, _) = segmentation_loss(&m, &[&gt], &[weights.clone()]).unwrap();
            lr + ls
        };

        model.zero_grad();
        let (logits, m, cache) = model.forward_train(&x, &targets, false).unwrap();
        let (_, dlogits) = recognition_loss(&logits, &targets).unwrap();
        let (_, dm) = segmentation_loss(&m, &[&gt], &[weights.clone()]).unwrap();
        model.backward(&cache, &dlogits, &dm);

        // one weight from each stage downstream of the resampling step (the
        // rectifier's own finite-difference test covers the warp path)
        let picks: Vec<(String, usize)> = {
            let params = model.params_mut();
            let want = [
                "backbone.stem.weight",
                "seg.up2.deconv.weight",
                "seg.down2.conv.weight",
                "fuse.attn.wq.weight",
                "decoder.embed.weight",
                "decoder.layer1.ffn1.weight",
                "decoder.out.bias",
            ];
            want.iter()
                .map(|w| {
                    let p = params.iter().position(|p| p.name == *w).unwrap_or_else(|| {
                        panic!("parameter {w} not found");
                    });
                    (w.to_string(), p)
                })
                .collect()
        };
        let h = 1e-4;
        for (name, pi) in picks {
            let (idx, an) = {
                let mut params = model.params_mut();
                let p = &mut params[pi];
                let idx = p.value.len() / 2;
                (idx, p.grad.data[idx])
            };
            let orig = {
                let mut params = model.params_mut();
                let v = params[pi].value.data[idx];
                params[pi].value.data[idx] = v + h;
                v
            };
            let lp = loss_of(&mut model);
            {
                let mut params = model.params_mut();
                params[pi].value.data[idx] = orig - h;
            }
            let lm = loss_of(&mut model);
            {
                let mut params = model.params_mut();
                params[pi].value.data[idx] = orig;
            }
            let fd = (lp - lm) / (2.0 * h);
            let scale = fd.abs().max(an.abs()).max(1e-6);
            let rel = (fd - an).abs() / scale;
            assert!(rel < 1e-4, "{name}: fd {fd} vs analytic {an} (rel {rel})");
        }
    }

    #[test]
    fn argmax_and_pixel_accuracy_oracles() {
        let mut m = Tensor::<f32>::zeros(vec![1, 3, 1, 4]);
        // classes per pixel: 2, 0, 1, 2
        m.data = vec![
            0.1, 0.9, 0.0, 0.3, // class 0 scores
            0.0, 0.2, 0.8, 0.5, // class 1
            0.7, 0.1, 0.2, 0.9, // class 2
        ];
        assert_eq!(argmax_masks(&m), vec![vec![2u8, 0, 1, 2]]);
        let gt: Vec<u8> = vec![2, 0, 0, 2];
        assert!((seg_pixel_accuracy(&m, &[&gt]) - 0.75).abs() < 1e-12);
    }
}
