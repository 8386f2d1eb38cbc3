//! Glyph segmentation head. An upsampling trunk expands F (C×2×32) through
//! four stages to C/8×16×64; a per-position FC emits 2×2×69 logit patches
//! that pixel-shuffle into the 69×32×128 class-aware mask M. The canonical
//! feature F_c (same shape as F) comes from a ∩-shaped return path: strided
//! convolutions mirror each upsampling stage, and every down-stage input is
//! the sum of the previous down-stage output and its mirror up-stage output.

use crate::ops::act::{relu, relu_backward};
use crate::ops::conv::{Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache};
use crate::ops::norm::{BatchNorm2d, BatchNorm2dCache};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::SEG_CLASSES;
use rand_chacha::ChaCha8Rng;

pub const MASK_H: usize = 32;
pub const MASK_W: usize = 128;

/// Depthwise 3×3 + batch norm, constant shape.
struct DwBn<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

struct DwBnCache<T> {
    conv: Conv2dCache<T>,
    bn: BatchNorm2dCache<T>,
}

impl<T: Scalar> DwBn<T> {
    fn new(name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Self {
        DwBn {
            conv: Conv2d::new(&format!("{name}.dw"), ch, ch, (3, 3), (1, 1), (1, 1), ch, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), ch),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, DwBnCache<T>) {
        let (h, conv) = self.conv.forward(x);
        let (y, bn) = self.bn.forward(&h, train);
        (y, DwBnCache { conv, bn })
    }

    fn backward(&mut self, cache: &DwBnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dh = self.bn.backward(&cache.bn, dy);
        self.conv.backward(&cache.conv, &dh)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.conv.weight, &mut self.bn.gamma, &mut self.bn.beta]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.bn.name), &mut self.bn.running_mean),
            (format!("{}.running_var", self.bn.name), &mut self.bn.running_var),
        ]
    }
}

/// Upsampling stage: transposed conv (resize) → depthwise 3×3 + BN + ReLU →
/// grouped 3×3 halving channels + BN.
struct UpStage<T> {
    deconv: ConvTranspose2d<T>,
    mid: Conv2d<T>,
    mid_bn: BatchNorm2d<T>,
    halve: Conv2d<T>,
    out_bn: BatchNorm2d<T>,
}

struct UpStageCache<T> {
    deconv: ConvTranspose2dCache<T>,
    mid: Conv2dCache<T>,
    mid_bn: BatchNorm2dCache<T>,
    mid_out: Tensor<T>,
    halve: Conv2dCache<T>,
    out_bn: BatchNorm2dCache<T>,
}

impl<T: Scalar> UpStage<T> {
    fn new(name: &str, ch: usize, k: (usize, usize), s: (usize, usize), p: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        UpStage {
            deconv: ConvTranspose2d::new(&format!("{name}.deconv"), ch, ch, k, s, p, true, rng),
            mid: Conv2d::new(&format!("{name}.mid"), ch, ch, (3, 3), (1, 1), (1, 1), ch, false, rng),
            mid_bn: BatchNorm2d::new(&format!("{name}.mid_bn"), ch),
            halve: Conv2d::new(&format!("{name}.halve"), ch, ch / 2, (3, 3), (1, 1), (1, 1), ch / 2, false, rng),
            out_bn: BatchNorm2d::new(&format!("{name}.out_bn"), ch / 2),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, UpStageCache<T>) {
        let (h1, deconv) = self.deconv.forward(x);
        let (h2, mid) = self.mid.forward(&h1);
        let (h3, mid_bn) = self.mid_bn.forward(&h2, train);
        let h4 = relu(&h3);
        let (h5, halve) = self.halve.forward(&h4);
        let (y, out_bn) = self.out_bn.forward(&h5, train);
        (y, UpStageCache { deconv, mid, mid_bn, mid_out: h4, halve, out_bn })
    }

    fn backward(&mut self, cache: &UpStageCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dh5 = self.out_bn.backward(&cache.out_bn, dy);
        let dh4 = self.halve.backward(&cache.halve, &dh5);
        let dh3 = relu_backward(&cache.mid_out, &dh4);
        let dh2 = self.mid_bn.backward(&cache.mid_bn, &dh3);
        let dh1 = self.mid.backward(&cache.mid, &dh2);
        self.deconv.backward(&cache.deconv, &dh1)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = vec![&mut self.deconv.weight];
        if let Some(b) = &mut self.deconv.bias {
            ps.push(b);
        }
        ps.push(&mut self.mid.weight);
        ps.push(&mut self.mid_bn.gamma);
        ps.push(&mut self.mid_bn.beta);
        ps.push(&mut self.halve.weight);
        ps.push(&mut self.out_bn.gamma);
        ps.push(&mut self.out_bn.beta);
        ps
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.mid_bn.name), &mut self.mid_bn.running_mean),
            (format!("{}.running_var", self.mid_bn.name), &mut self.mid_bn.running_var),
            (format!("{}.running_mean", self.out_bn.name), &mut self.out_bn.running_mean),
            (format!("{}.running_var", self.out_bn.name), &mut self.out_bn.running_var),
        ]
    }
}

/// Mirror of an UpStage: strided conv (resize) → depthwise 3×3 + BN + ReLU →
/// grouped 3×3 doubling channels + BN.
struct DownStage<T> {
    conv: Conv2d<T>,
    mid: Conv2d<T>,
    mid_bn: BatchNorm2d<T>,
    double: Conv2d<T>,
    out_bn: BatchNorm2d<T>,
}

struct DownStageCache<T> {
    conv: Conv2dCache<T>,
    mid: Conv2dCache<T>,
    mid_bn: BatchNorm2dCache<T>,
    mid_out: Tensor<T>,
    double: Conv2dCache<T>,
    out_bn: BatchNorm2dCache<T>,
}

impl<T: Scalar> DownStage<T> {
    fn new(name: &str, ch: usize, k: (usize, usize), s: (usize, usize), p: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        DownStage {
            conv: Conv2d::new(&format!("{name}.conv"), ch, ch, k, s, p, 1, true, rng),
            mid: Conv2d::new(&format!("{name}.mid"), ch, ch, (3, 3), (1, 1), (1, 1), ch, false, rng),
            mid_bn: BatchNorm2d::new(&format!("{name}.mid_bn"), ch),
            double: Conv2d::new(&format!("{name}.double"), ch, 2 * ch, (3, 3), (1, 1), (1, 1), ch, false, rng),
            out_bn: BatchNorm2d::new(&format!("{name}.out_bn"), 2 * ch),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, DownStageCache<T>) {
        let (h1, conv) = self.conv.forward(x);
        let (h2, mid) = self.mid.forward(&h1);
        let (h3, mid_bn) = self.mid_bn.forward(&h2, train);
        let h4 = relu(&h3);
        let (h5, double) = self.double.forward(&h4);
        let (y, out_bn) = self.out_bn.forward(&h5, train);
        (y, DownStageCache { conv, mid, mid_bn, mid_out: h4, double, out_bn })
    }

    fn backward(&mut self, cache: &DownStageCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dh5 = self.out_bn.backward(&cache.out_bn, dy);
        let dh4 = self.double.backward(&cache.double, &dh5);
        let dh3 = relu_backward(&cache.mid_out, &dh4);
        let dh2 = self.mid_bn.backward(&cache.mid_bn, &dh3);
        let dh1 = self.mid.backward(&cache.mid, &dh2);
        self.conv.backward(&cache.conv, &dh1)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = vec![&mut self.conv.weight];
        if let Some(b) = &mut self.conv.bias {
            ps.push(b);
        }
        ps.push(&mut self.mid.weight);
        ps.push(&mut self.mid_bn.gamma);
        ps.push(&mut self.mid_bn.beta);
        ps.push(&mut self.double.weight);
        ps.push(&mut self.out_bn.gamma);
        ps.push(&mut self.out_bn.beta);
        ps
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.mid_bn.name), &mut self.mid_bn.running_mean),
            (format!("{}.running_var", self.mid_bn.name), &mut self.mid_bn.running_var),
            (format!("{}.running_mean", self.out_bn.name), &mut self.out_bn.running_mean),
            (format!("{}.running_var", self.out_bn.name), &mut self.out_bn.running_var),
        ]
    }
}

pub struct SegHead<T> {
    pub in_ch: usize,
    stage1: DwBn<T>,
    up2: UpStage<T>,
    up3: UpStage<T>,
    up4: UpStage<T>,
    logits_fc: Conv2d<T>,
    down1: DownStage<T>,
    down2: DownStage<T>,
    down3: DownStage<T>,
    down4: DwBn<T>,
}

pub struct UpPathCache<T> {
    stage1: DwBnCache<T>,
    up2: UpStageCache<T>,
    up3: UpStageCache<T>,
    up4: UpStageCache<T>,
}

pub struct CanonicalCache<T> {
    down1: DownStageCache<T>,
    down2: DownStageCache<T>,
    down3: DownStageCache<T>,
    down4: DwBnCache<T>,
}

pub struct SegCache<T> {
    up: UpPathCache<T>,
    logits: Conv2dCache<T>,
    logits_hw: (usize, usize),
    down: CanonicalCache<T>,
}

impl<T: Scalar> SegHead<T> {
    pub fn new(in_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(in_ch % 8 == 0, "segmentation head needs in_ch divisible by 8");
        let c = in_ch;
        SegHead {
            in_ch,
            stage1: DwBn::new("seg.stage1", c, rng),
            up2: UpStage::new("seg.up2", c, (4, 1), (2, 1), (1, 0), rng),
            up3: UpStage::new("seg.up3", c / 2, (4, 1), (2, 1), (1, 0), rng),
            up4: UpStage::new("seg.up4", c / 4, (4, 4), (2, 2), (1, 1), rng),
            logits_fc: Conv2d::new("seg.logits_fc", c / 8, 4 * SEG_CLASSES, (1, 1), (1, 1), (0, 0), 1, true, rng),
            down1: DownStage::new("seg.down1", c / 8, (4, 4), (2, 2), (1, 1), rng),
            down2: DownStage::new("seg.down2", c / 4, (4, 1), (2, 1), (1, 0), rng),
            down3: DownStage::new("seg.down3", c / 2, (4, 1), (2, 1), (1, 0), rng),
            down4: DwBn::new("seg.down4", c, rng),
        }
    }

    /// Upsampling trunk: F → [s1, s2, s3, s4] with channel trace C, C/2, C/4, C/8.
    pub fn up_path(&mut self, f: &Tensor<T>, train: bool) -> ([Tensor<T>; 4], UpPathCache<T>) {
        let (_, c, _, _) = f.dims4();
        assert_eq!(c, self.in_ch);
        let (s1, c1) = self.stage1.forward(f, train);
        let (s2, c2) = self.up2.forward(&s1, train);
        let (s3, c3) = self.up3.forward(&s2, train);
        let (s4, c4) = self.up4.forward(&s3, train);
        ([s1, s2, s3, s4], UpPathCache { stage1: c1, up2: c2, up3: c3, up4: c4 })
    }

    pub fn up_path_backward(
        &mut self, cache: &UpPathCache<T>,
        ds: [Tensor<T>; 4],
    ) -> Tensor<T> {
        let [ds1, ds2, ds3, ds4] = ds;
        let mut d3 = self.up4.backward(&cache.up4, &ds4);
        d3.add_assign(&ds3);
        let mut d2 = self.up3.backward(&cache.up3, &d3);
        d2.add_assign(&ds2);
        let mut d1 = self.up2.backward(&cache.up2, &d2);
        d1.add_assign(&ds1);
        self.stage1.backward(&cache.stage1, &d1)
    }

    /// Per-position FC to 2×2×69 logit patches, pixel-shuffled to 69×H×W.
    pub fn logits(&self, s4: &Tensor<T>) -> (Tensor<T>, Conv2dCache<T>, (usize, usize)) {
        let (n, _, h, w) = s4.dims4();
        let (y, cache) = self.logits_fc.forward(s4);
        let mut m = Tensor::zeros(vec![n, SEG_CLASSES, 2 * h, 2 * w]);
        for ni in 0..n {
            for di in 0..2 {
                for dj in 0..2 {
                    for cls in 0..SEG_CLASSES {
                        let ch = (di * 2 + dj) * SEG_CLASSES + cls;
                        for i in 0..h {
                            for j in 0..w {
                                let src = ((ni * 4 * SEG_CLASSES + ch) * h + i) * w + j;
                                let dst = ((ni * SEG_CLASSES + cls) * 2 * h + 2 * i + di) * 2 * w
                                    + 2 * j + dj;
                                m.data[dst] = y.data[src];
                            }
                        }
                    }
                }
            }
        }
        (m, cache, (h, w))
    }

    pub fn logits_backward(
        &mut self, cache: &Conv2dCache<T>, hw: (usize, usize), dm: &Tensor<T>,
    ) -> Tensor<T> {
        let (h, w) = hw;
        let n = dm.shape[0];
        let mut dy = Tensor::zeros(vec![n, 4 * SEG_CLASSES, h, w]);
        for ni in 0..n {
            for di in 0..2 {
                for dj in 0..2 {
                    for cls in 0..SEG_CLASSES {
                        let ch = (di * 2 + dj) * SEG_CLASSES + cls;
                        for i in 0..h {
                            for j in 0..w {
                                let dst = ((ni * 4 * SEG_CLASSES + ch) * h + i) * w + j;
                                let src = ((ni * SEG_CLASSES + cls) * 2 * h + 2 * i + di) * 2 * w
                                    + 2 * j + dj;
                                dy.data[dst] = dm.data[src];
                            }
                        }
                    }
                }
            }
        }
        self.logits_fc.backward(cache, &dy)
    }

    /// ∩-shaped return path over the up-path stage outputs.
    pub fn canonical(
        &mut self, stages: &[Tensor<T>; 4], train: bool,
    ) -> (Tensor<T>, CanonicalCache<T>) {
        let [s1, s2, s3, s4] = stages;
        let (mut d1, c1) = self.down1.forward(s4, train);
        d1.add_assign(s3);
        let (mut d2, c2) = self.down2.forward(&d1, train);
        d2.add_assign(s2);
        let (mut d3, c3) = self.down3.forward(&d2, train);
        d3.add_assign(s1);
        let (fc, c4) = self.down4.forward(&d3, train);
        (fc, CanonicalCache { down1: c1, down2: c2, down3: c3, down4: c4 })
    }

    /// Returns gradients for each up-path stage output [ds1, ds2, ds3, ds4].
    pub fn canonical_backward(
        &mut self, cache: &CanonicalCache<T>, dfc: &Tensor<T>,
    ) -> [Tensor<T>; 4] {
        let dd3 = self.down4.backward(&cache.down4, dfc);
        let dd2 = self.down3.backward(&cache.down3, &dd3);
        let dd1 = self.down2.backward(&cache.down2, &dd2);
        let ds4 = self.down1.backward(&cache.down1, &dd1);
        [dd3, dd2, dd1, ds4]
    }

    /// Full head: F → (M logits, F_c).
    pub fn forward(&mut self, f: &Tensor<T>, train: bool) -> (Tensor<T>, Tensor<T>, SegCache<T>) {
        let (stages, up) = self.up_path(f, train);
        let (m, logits, logits_hw) = self.logits(&stages[3]);
        let (fc, down) = self.canonical(&stages, train);
        (m, fc, SegCache { up, logits, logits_hw, down })
    }

    pub fn backward(&mut self, cache: &SegCache<T>, dm: &Tensor<T>, dfc: &Tensor<T>) -> Tensor<T> {
        let [ds1, ds2, ds3, mut ds4] = self.canonical_backward(&cache.down, dfc);
        ds4.add_assign(&self.logits_backward(&cache.logits, cache.logits_hw, dm));
        self.up_path_backward(&cache.up, [ds1, ds2, ds3, ds4])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::new();
        ps.extend(self.stage1.params_mut());
        ps.extend(self.up2.params_mut());
        ps.extend(self.up3.params_mut());
        ps.extend(self.up4.params_mut());
        ps.push(&mut self.logits_fc.weight);
        if let Some(b) = &mut self.logits_fc.bias {
            ps.push(b);
        }
        ps.extend(self.down1.params_mut());
        ps.extend(self.down2.params_mut());
        ps.extend(self.down3.params_mut());
        ps.extend(self.down4.params_mut());
        ps
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut bs = Vec::new();
        bs.extend(self.stage1.buffers_mut());
        bs.extend(self.up2.buffers_mut());
        bs.extend(self.up3.buffers_mut());
        bs.extend(self.up4.buffers_mut());
        bs.extend(self.down1.buffers_mut());
        bs.extend(self.down2.buffers_mut());
        bs.extend(self.down3.buffers_mut());
        bs.extend(self.down4.buffers_mut());
        bs
    }
}
