//! ConvNeXt-V2-style encoder with text-friendly strides. The stem patchifies
//! at (4,4); the three stage transitions use strides (2,1), (2,1), (1,1), so a
//! 32×128 rectified image becomes a C×2×32 feature map (H/16 × W/4 generally).

use crate::ops::act::{gelu, gelu_backward};
use crate::ops::conv::{Conv2d, Conv2dCache};
use crate::ops::norm::{Grn, GrnCache, LayerNorm2d, LayerNorm2dCache};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub depths: [usize; 4],
    pub dims: [usize; 4],
}

/// Stage-transition strides: the stem is (4,4); later transitions trade
/// height for preserved text width.
pub const STAGE_STRIDES: [(usize, usize); 4] = [(4, 4), (2, 1), (2, 1), (1, 1)];

impl BackboneConfig {
    /// Small enough for CPU gradient checks and overfit tests.
    pub fn toy() -> Self {
        BackboneConfig { depths: [1, 1, 2, 1], dims: [32, 64, 128, 192] }
    }

    pub fn nano() -> Self {
        BackboneConfig { depths: [2, 2, 8, 2], dims: [80, 160, 320, 640] }
    }

    pub fn tiny() -> Self {
        BackboneConfig { depths: [3, 3, 9, 3], dims: [96, 192, 384, 768] }
    }

    pub fn base() -> Self {
        BackboneConfig { depths: [3, 3, 27, 3], dims: [128, 256, 512, 1024] }
    }

    pub fn validate(&self) {
        assert!(self.depths.iter().all(|&d| d > 0), "every stage needs ≥1 block");
        assert!(self.dims.windows(2).all(|w| w[0] <= w[1]), "dims must be nondecreasing");
    }

    /// Output channel count C of the feature map F.
    pub fn out_dim(&self) -> usize {
        self.dims[3]
    }

    /// Spatial size after each stage for an h×w input.
    pub fn stage_spatial(&self, h: usize, w: usize) -> [(usize, usize); 4] {
        let mut out = [(0, 0); 4];
        let (mut ch, mut cw) = (h, w);
        for (i, &(sy, sx)) in STAGE_STRIDES.iter().enumerate() {
            ch /= sy;
            cw /= sx;
            out[i] = (ch, cw);
        }
        out
    }

    /// Analytic parameter count, written out term by term so the test can
    /// cross-check it against enumeration of the actual parameter tensors.
    pub fn param_count(&self) -> usize {
        let block = |c: usize| {
            let dw = 7 * 7 * c + c;
            let ln = 2 * c;
            let expand = c * 4 * c + 4 * c;
            let grn = 2 * 4 * c;
            let project = 4 * c * c + c;
            dw + ln + expand + grn + project
        };
        let mut total = 3 * self.dims[0] * 4 * 4 + self.dims[0] + 2 * self.dims[0];
        for s in 0..4 {
            total += self.depths[s] * block(self.dims[s]);
            if s < 3 {
                let (sy, sx) = STAGE_STRIDES[s + 1];
                total += 2 * self.dims[s]; // transition norm
                total += self.dims[s] * self.dims[s + 1] * sy * sx + self.dims[s + 1];
            }
        }
        total
    }
}

struct ConvNextBlock<T> {
    dw: Conv2d<T>,
    norm: LayerNorm2d<T>,
    expand: Conv2d<T>,
    grn: Grn<T>,
    project: Conv2d<T>,
}

struct BlockCache<T> {
    dw: Conv2dCache<T>,
    norm: LayerNorm2dCache<T>,
    expand: Conv2dCache<T>,
    pre_gelu: Tensor<T>,
    grn: GrnCache<T>,
    project: Conv2dCache<T>,
}

impl<T: Scalar> ConvNextBlock<T> {
    fn new(name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvNextBlock {
            dw: Conv2d::new(&format!("{name}.dw"), c, c, (7, 7), (1, 1), (3, 3), c, true, rng),
            norm: LayerNorm2d::new(&format!("{name}.norm"), c),
            expand: Conv2d::new(&format!("{name}.expand"), c, 4 * c, (1, 1), (1, 1), (0, 0), 1, true, rng),
            grn: Grn::new(&format!("{name}.grn"), 4 * c),
            project: Conv2d::new(&format!("{name}.project"), 4 * c, c, (1, 1), (1, 1), (0, 0), 1, true, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let (h1, dw) = self.dw.forward(x);
        let (h2, norm) = self.norm.forward(&h1);
        let (h3, expand) = self.expand.forward(&h2);
        let h4 = gelu(&h3);
        let (h5, grn) = self.grn.forward(&h4);
        let (mut y, project) = self.project.forward(&h5);
        for (yv, xv) in y.data.iter_mut().zip(x.data.iter()) {
            *yv = *yv + *xv;
        }
        (y, BlockCache { dw, norm, expand, pre_gelu: h3, grn, project })
    }

    fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dh5 = self.project.backward(&cache.project, dy);
        let dh4 = self.grn.backward(&cache.grn, &dh5);
        let dh3 = gelu_backward(&cache.pre_gelu, &dh4);
        let dh2 = self.expand.backward(&cache.expand, &dh3);
        let dh1 = self.norm.backward(&cache.norm, &dh2);
        let mut dx = self.dw.backward(&cache.dw, &dh1);
        for (a, b) in dx.data.iter_mut().zip(dy.data.iter()) {
            *a = *a + *b;
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::new();
        ps.push(&mut self.dw.weight);
        if let Some(b) = &mut self.dw.bias {
            ps.push(b);
        }
        ps.push(&mut self.norm.gamma);
        ps.push(&mut self.norm.beta);
        ps.push(&mut self.expand.weight);
        if let Some(b) = &mut self.expand.bias {
            ps.push(b);
        }
        ps.push(&mut self.grn.gamma);
        ps.push(&mut self.grn.beta);
        ps.push(&mut self.project.weight);
        if let Some(b) = &mut self.project.bias {
            ps.push(b);
        }
        ps
    }
}

pub struct Backbone<T> {
    pub config: BackboneConfig,
    stem: Conv2d<T>,
    stem_norm: LayerNorm2d<T>,
    stages: Vec<Vec<ConvNextBlock<T>>>,
    transitions: Vec<(LayerNorm2d<T>, Conv2d<T>)>,
}

pub struct BackboneCache<T> {
    stem: Conv2dCache<T>,
    stem_norm: LayerNorm2dCache<T>,
    stages: Vec<Vec<BlockCache<T>>>,
    transitions: Vec<(LayerNorm2dCache<T>, Conv2dCache<T>)>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        config.validate();
        let stem = Conv2d::new("backbone.stem", 3, config.dims[0], (4, 4), (4, 4), (0, 0), 1, true, rng);
        let stem_norm = LayerNorm2d::new("backbone.stem_norm", config.dims[0]);
        let mut stages = Vec::new();
        let mut transitions = Vec::new();
        for s in 0..4 {
            let blocks = (0..config.depths[s])
                .map(|b| ConvNextBlock::new(&format!("backbone.s{s}.b{b}"), config.dims[s], rng))
                .collect();
            stages.push(blocks);
            if s < 3 {
                let (sy, sx) = STAGE_STRIDES[s + 1];
                let norm = LayerNorm2d::new(&format!("backbone.t{s}.norm"), config.dims[s]);
                let conv = Conv2d::new(
                    &format!("backbone.t{s}.conv"),
                    config.dims[s], config.dims[s + 1],
                    (sy, sx), (sy, sx), (0, 0), 1, true, rng,
                );
                transitions.push((norm, conv));
            }
        }
        Backbone { config, stem, stem_norm, stages, transitions }
    }

    /// [N,3,H,W] → [N,C,H/16,W/4].
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, BackboneCache<T>) {
        let (h0, stem) = self.stem.forward(x);
        let (mut cur, stem_norm) = self.stem_norm.forward(&h0);
        let mut stages = Vec::new();
        let mut transitions = Vec::new();
        for s in 0..4 {
            let mut caches = Vec::new();
            for block in &self.stages[s] {
                let (y, c) = block.forward(&cur);
                caches.push(c);
                cur = y;
            }
            stages.push(caches);
            if s < 3 {
                let (n1, nc) = self.transitions[s].0.forward(&cur);
                let (y, cc) = self.transitions[s].1.forward(&n1);
                transitions.push((nc, cc));
                cur = y;
            }
        }
        (cur, BackboneCache { stem, stem_norm, stages, transitions })
    }

    pub fn backward(&mut self, cache: &BackboneCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut cur = dy.clone();
        for s in (0..4).rev() {
            if s < 3 {
                let (nc, cc) = &cache.transitions[s];
                let dn = self.transitions[s].1.backward(cc, &cur);
                cur = self.transitions[s].0.backward(nc, &dn);
            }
            for (block, bc) in self.stages[s].iter_mut().zip(cache.stages[s].iter()).rev() {
                cur = block.backward(bc, &cur);
            }
        }
        let dh0 = self.stem_norm.backward(&cache.stem_norm, &cur);
        self.stem.backward(&cache.stem, &dh0)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::new();
        ps.push(&mut self.stem.weight);
        if let Some(b) = &mut self.stem.bias {
            ps.push(b);
        }
        ps.push(&mut self.stem_norm.gamma);
        ps.push(&mut self.stem_norm.beta);
        for stage in self.stages.iter_mut() {
            for block in stage.iter_mut() {
                ps.extend(block.params_mut());
            }
        }
        for (norm, conv) in self.transitions.iter_mut() {
            ps.push(&mut norm.gamma);
            ps.push(&mut norm.beta);
            ps.push(&mut conv.weight);
            if let Some(b) = &mut conv.bias {
                ps.push(b);
            }
        }
        ps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::count_params;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn output_shape_is_c_by_h16_by_w4() {
        let bb = Backbone::<f32>::new(BackboneConfig::toy(), &mut rng(0));
        let x = Tensor::full(vec![1, 3, 32, 128], 0.5);
        let (f, _) = bb.forward(&x);
        assert_eq!(f.shape, vec![1, 192, 2, 32]);
        let x2 = Tensor::full(vec![2, 3, 64, 128], 0.25);
        let (f2, _) = bb.forward(&x2);
        assert_eq!(f2.shape, vec![2, 192, 4, 32]);
        assert_eq!(
            BackboneConfig::toy().stage_spatial(32, 128),
            [(8, 32), (4, 32), (2, 32), (2, 32)]
        );
    }

    #[test]
    fn block_residual_carries_input_when_inner_path_is_dead() {
        let mut r = rng(1);
        let mut block = ConvNextBlock::<f64>::new("b", 8, &mut r);
        // Kill the inner path after GELU(0) by zeroing expand; the block
        // output must then be input + project-bias at every position.
        for v in block.expand.weight.value.data.iter_mut() {
            *v = 0.0;
        }
        for v in block.expand.bias.as_mut().unwrap().value.data.iter_mut() {
            *v = 0.0;
        }
        let mut x = Tensor::zeros(vec![1, 8, 4, 6]);
        for v in x.data.iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let (y, _) = block.forward(&x);
        let pb = &block.project.bias.as_ref().unwrap().value;
        for ci in 0..8 {
            for p in 0..24 {
                let got = y.data[ci * 24 + p];
                let want = x.data[ci * 24 + p] + pb.data[ci];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_count_formula_matches_enumeration() {
        for cfg in [BackboneConfig::toy(), BackboneConfig::nano()] {
            let mut bb = Backbone::<f32>::new(cfg.clone(), &mut rng(2));
            let counted = count_params(&bb.params_mut());
            assert_eq!(cfg.param_count(), counted, "{cfg:?}");
        }
    }

    #[test]
    fn nano_params_near_cited_scale() {
        let n = BackboneConfig::nano().param_count() as f64;
        let cited = 15.6e6;
        assert!((n - cited).abs() / cited < 0.15, "nano backbone has {n} params");
    }

    #[test]
    fn block_gradient_matches_fd() {
        let mut r = rng(3);
        let mut block = ConvNextBlock::<f64>::new("b", 6, &mut r);
        let mut x = Tensor::zeros(vec![2, 6, 4, 5]);
        for v in x.data.iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let loss = |y: &Tensor<f64>| -> f64 {
            y.data.iter().enumerate().map(|(i, v)| v * v * ((i % 7) as f64 - 3.0)).sum()
        };
        let (y, cache) = block.forward(&x);
        let mut dy = Tensor::zeros(y.shape.clone());
        for i in 0..y.len() {
            dy.data[i] = 2.0 * y.data[i] * ((i % 7) as f64 - 3.0);
        }
        let dx = block.backward(&cache, &dy);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in (0..x.len()).step_by(37) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&block.forward(&xp).0) - loss(&block.forward(&xm).0)) / (2.0 * h);
            let scale = fd.abs().max(dx.data[i].abs()).max(1e-6);
            worst = worst.max((fd - dx.data[i]).abs() / scale);
        }
        assert!(worst < 1e-4, "block input-grad rel err {worst}");

        // parameter spot checks across every layer kind in the block
        let grads: Vec<f64> = {
            let names: Vec<(usize, f64)> = block
                .params_mut()
                .iter()
                .map(|p| (p.value.len(), p.grad.data[p.value.len() / 2]))
                .collect();
            names.iter().map(|&(_, g)| g).collect()
        };
        for (pi, analytic) in grads.iter().enumerate() {
            let (idx, orig) = {
                let mut ps = block.params_mut();
                let idx = ps[pi].value.len() / 2;
                let orig = ps[pi].value.data[idx];
                ps[pi].value.data[idx] = orig + h;
                (idx, orig)
            };
            let fp = loss(&block.forward(&x).0);
            {
                let mut ps = block.params_mut();
                ps[pi].value.data[idx] = orig - h;
            }
            let fm = loss(&block.forward(&x).0);
            {
                let mut ps = block.params_mut();
                ps[pi].value.data[idx] = orig;
            }
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(analytic.abs()).max(1e-6);
            assert!((fd - analytic).abs() / scale < 1e-4, "param {pi}: {fd} vs {analytic}");
        }
    }

    #[test]
    fn features_are_not_homogeneous_in_brightness() {
        let bb = Backbone::<f32>::new(BackboneConfig::toy(), &mut rng(4));
        let mut r = rng(5);
        let mut x = Tensor::zeros(vec![1, 3, 32, 128]);
        for v in x.data.iter_mut() {
            *v = r.gen_range(0.1..0.5);
        }
        let mut x2 = x.clone();
        for v in x2.data.iter_mut() {
            *v *= 2.0;
        }
        let (f1, _) = bb.forward(&x);
        let (f2, _) = bb.forward(&x2);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (&a, &b) in f1.data.iter().zip(f2.data.iter()) {
            num += ((2.0 * a - b) as f64).powi(2);
            den += (2.0 * a as f64).powi(2);
        }
        let rel = (num / den).sqrt();
        assert!(rel > 0.1, "doubling brightness nearly doubled features (rel {rel})");
    }
}
