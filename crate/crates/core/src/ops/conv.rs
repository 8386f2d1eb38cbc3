//! 2-D convolution and transposed convolution with groups.
//!
//! Dense (groups == 1) paths run im2col + gemm; grouped paths (depthwise and
//! the tiny 2-to-1 / 1-to-2 channel mixers) use direct loops, which is faster
//! than launching thousands of micro-gemms.

use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

/// cols[(c*KH*KW + ky*KW + kx), ay*AW + ax] = plane[c, ay*sy - py + ky, ax*sx - px + kx],
/// zero outside the plane. `plane` is [ch, ph, pw]; anchors span [ah, aw].
#[allow(clippy::too_many_arguments)]
fn gather_cols<T: Scalar>(
    plane: &[T], ch: usize, ph: usize, pw: usize,
    kh: usize, kw: usize, sy: usize, sx: usize, py: usize, px: usize,
    ah: usize, aw: usize, cols: &mut [T],
) {
    debug_assert_eq!(plane.len(), ch * ph * pw);
    debug_assert_eq!(cols.len(), ch * kh * kw * ah * aw);
    let mut row = 0usize;
    for c in 0..ch {
        let cp = &plane[c * ph * pw..(c + 1) * ph * pw];
        for ky in 0..kh {
            for kx in 0..kw {
                let out = &mut cols[row * ah * aw..(row + 1) * ah * aw];
                row += 1;
                for ay in 0..ah {
                    let iy = (ay * sy + ky) as isize - py as isize;
                    let dst = &mut out[ay * aw..(ay + 1) * aw];
                    if iy < 0 || iy >= ph as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src = &cp[iy as usize * pw..(iy as usize + 1) * pw];
                    for (ax, v) in dst.iter_mut().enumerate() {
                        let ix = (ax * sx + kx) as isize - px as isize;
                        *v = if ix < 0 || ix >= pw as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of `gather_cols`: scatter-add cols back into the plane.
#[allow(clippy::too_many_arguments)]
fn scatter_cols_add<T: Scalar>(
    cols: &[T], ch: usize, ph: usize, pw: usize,
    kh: usize, kw: usize, sy: usize, sx: usize, py: usize, px: usize,
    ah: usize, aw: usize, plane: &mut [T],
) {
    let mut row = 0usize;
    for c in 0..ch {
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * ah * aw..(row + 1) * ah * aw];
                row += 1;
                for ay in 0..ah {
                    let iy = (ay * sy + ky) as isize - py as isize;
                    if iy < 0 || iy >= ph as isize {
                        continue;
                    }
                    let dst =
                        &mut plane[(c * ph + iy as usize) * pw..(c * ph + iy as usize + 1) * pw];
                    for ax in 0..aw {
                        let ix = (ax * sx + kx) as isize - px as isize;
                        if ix >= 0 && ix < pw as isize {
                            dst[ix as usize] = dst[ix as usize] + src[ay * aw + ax];
                        }
                    }
                }
            }
        }
    }
}

pub struct Conv2d<T> {
    /// [out_ch, in_ch/groups, kh, kw]
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
    in_ch: usize,
    out_ch: usize,
}

pub struct Conv2dCache<T> {
    x: Tensor<T>,
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str, in_ch: usize, out_ch: usize, k: (usize, usize),
        stride: (usize, usize), pad: (usize, usize), groups: usize, bias: bool,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        assert!(in_ch % groups == 0 && out_ch % groups == 0);
        let fan_in = (in_ch / groups) * k.0 * k.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Param::uniform(
            &format!("{name}.weight"),
            vec![out_ch, in_ch / groups, k.0, k.1],
            bound,
            rng,
        );
        let bias = bias.then(|| Param::uniform(&format!("{name}.bias"), vec![out_ch], bound, rng));
        Conv2d { weight, bias, stride, pad, groups, in_ch, out_ch }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = (self.weight.value.shape[2], self.weight.value.shape[3]);
        (
            (h + 2 * self.pad.0 - kh) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - kw) / self.stride.1 + 1,
        )
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Conv2dCache<T>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_ch, "conv {} expects {} in channels", self.weight.name, self.in_ch);
        let (kh, kw) = (self.weight.value.shape[2], self.weight.value.shape[3]);
        let (ho, wo) = self.out_hw(h, w);
        let mut y = Tensor::zeros(vec![n, self.out_ch, ho, wo]);
        let cin_g = self.in_ch / self.groups;
        let cout_g = self.out_ch / self.groups;
        if self.groups == 1 {
            let mut cols = vec![T::zero(); cin_g * kh * kw * ho * wo];
            for ni in 0..n {
                let xs = &x.data[ni * c * h * w..(ni + 1) * c * h * w];
                gather_cols(
                    xs, cin_g, h, w, kh, kw, self.stride.0, self.stride.1, self.pad.0, self.pad.1,
                    ho, wo, &mut cols,
                );
                let ys = &mut y.data[ni * self.out_ch * ho * wo..(ni + 1) * self.out_ch * ho * wo];
                T::gemm(cout_g, cin_g * kh * kw, ho * wo, T::one(), &self.weight.value.data, &cols, T::zero(), ys);
            }
        } else {
            // direct grouped loop
            let wd = &self.weight.value.data;
            for ni in 0..n {
                for g in 0..self.groups {
                    for co in 0..cout_g {
                        let oc = g * cout_g + co;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut acc = T::zero();
                                for ci in 0..cin_g {
                                    let ic = g * cin_g + ci;
                                    let xp = &x.data[((ni * c + ic) * h) * w..((ni * c + ic) * h + h) * w];
                                    for ky in 0..kh {
                                        let iy = (oy * self.stride.0 + ky) as isize - self.pad.0 as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * self.stride.1 + kx) as isize - self.pad.1 as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            acc = acc
                                                + wd[((oc * cin_g + ci) * kh + ky) * kw + kx]
                                                    * xp[iy as usize * w + ix as usize];
                                        }
                                    }
                                }
                                y.data[((ni * self.out_ch + oc) * ho + oy) * wo + ox] = acc;
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = &self.bias {
            for ni in 0..n {
                for oc in 0..self.out_ch {
                    let off = (ni * self.out_ch + oc) * ho * wo;
                    let bv = b.value.data[oc];
                    for v in y.data[off..off + ho * wo].iter_mut() {
                        *v = *v + bv;
                    }
                }
            }
        }
        (y, Conv2dCache { x: x.clone(), out_hw: (ho, wo) })
    }

    /// Accumulates weight/bias grads, returns dx.
    pub fn backward(&mut self, cache: &Conv2dCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = cache.x.dims4();
        let (kh, kw) = (self.weight.value.shape[2], self.weight.value.shape[3]);
        let (ho, wo) = cache.out_hw;
        assert_eq!(dy.shape, vec![n, self.out_ch, ho, wo]);
        let mut dx = Tensor::zeros(cache.x.shape.clone());
        let cin_g = self.in_ch / self.groups;
        let cout_g = self.out_ch / self.groups;
        if let Some(b) = &mut self.bias {
            for ni in 0..n {
                for oc in 0..self.out_ch {
                    let off = (ni * self.out_ch + oc) * ho * wo;
                    let mut s = T::zero();
                    for &v in dy.data[off..off + ho * wo].iter() {
                        s = s + v;
                    }
                    b.grad.data[oc] = b.grad.data[oc] + s;
                }
            }
        }
        if self.groups == 1 {
            let kdim = cin_g * kh * kw;
            let mut cols = vec![T::zero(); kdim * ho * wo];
            let mut dcols = vec![T::zero(); kdim * ho * wo];
            for ni in 0..n {
                let xs = &cache.x.data[ni * c * h * w..(ni + 1) * c * h * w];
                gather_cols(
                    xs, cin_g, h, w, kh, kw, self.stride.0, self.stride.1, self.pad.0, self.pad.1,
                    ho, wo, &mut cols,
                );
                let dys = &dy.data[ni * self.out_ch * ho * wo..(ni + 1) * self.out_ch * ho * wo];
                // dW += dy · colsᵀ
                T::gemm_view(
                    cout_g, ho * wo, kdim, T::one(),
                    dys, 0, (ho * wo) as isize, 1,
                    &cols, 0, 1, (ho * wo) as isize,
                    T::one(),
                    &mut self.weight.grad.data, 0, kdim as isize, 1,
                );
                // dcols = Wᵀ · dy
                T::gemm_view(
                    kdim, cout_g, ho * wo, T::one(),
                    &self.weight.value.data, 0, 1, kdim as isize,
                    dys, 0, (ho * wo) as isize, 1,
                    T::zero(),
                    &mut dcols, 0, (ho * wo) as isize, 1,
                );
                let dxs = &mut dx.data[ni * c * h * w..(ni + 1) * c * h * w];
                scatter_cols_add(
                    &dcols, cin_g, h, w, kh, kw, self.stride.0, self.stride.1, self.pad.0,
                    self.pad.1, ho, wo, dxs,
                );
            }
        } else {
            let wd = &self.weight.value.data;
            let wg = &mut self.weight.grad.data;
            for ni in 0..n {
                for g in 0..self.groups {
                    for co in 0..cout_g {
                        let oc = g * cout_g + co;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let d = dy.data[((ni * self.out_ch + oc) * ho + oy) * wo + ox];
                                for ci in 0..cin_g {
                                    let ic = g * cin_g + ci;
                                    for ky in 0..kh {
                                        let iy = (oy * self.stride.0 + ky) as isize - self.pad.0 as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * self.stride.1 + kx) as isize - self.pad.1 as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ((ni * c + ic) * h + iy as usize) * w + ix as usize;
                                            let wi = ((oc * cin_g + ci) * kh + ky) * kw + kx;
                                            wg[wi] = wg[wi] + d * cache.x.data[xi];
                                            dx.data[xi] = dx.data[xi] + d * wd[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

pub struct ConvTranspose2d<T> {
    /// [in_ch, out_ch/groups, kh, kw]
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
    in_ch: usize,
    out_ch: usize,
}

pub struct ConvTranspose2dCache<T> {
    x: Tensor<T>,
    out_hw: (usize, usize),
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str, in_ch: usize, out_ch: usize, k: (usize, usize),
        stride: (usize, usize), pad: (usize, usize), bias: bool,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * k.0 * k.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Param::uniform(
            &format!("{name}.weight"),
            vec![in_ch, out_ch, k.0, k.1],
            bound,
            rng,
        );
        let bias = bias.then(|| Param::uniform(&format!("{name}.bias"), vec![out_ch], bound, rng));
        ConvTranspose2d { weight, bias, stride, pad, groups: 1, in_ch, out_ch }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = (self.weight.value.shape[2], self.weight.value.shape[3]);
        (
            (h - 1) * self.stride.0 + kh - 2 * self.pad.0,
            (w - 1) * self.stride.1 + kw - 2 * self.pad.1,
        )
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvTranspose2dCache<T>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_ch);
        let (kh, kw) = (self.weight.value.shape[2], self.weight.value.shape[3]);
        let (ho, wo) = self.out_hw(h, w);
        let mut y = Tensor::zeros(vec![n, self.out_ch, ho, wo]);
        let kdim = self.out_ch * kh * kw;
        let mut cols = vec![T::zero(); kdim * h * w];
        for ni in 0..n {
            let xs = &x.data[ni * c * h * w..(ni + 1) * c * h * w];
            // cols = Wᵀ · x, W viewed as [in_ch, out_ch*kh*kw]
            T::gemm_view(
                kdim, self.in_ch, h * w, T::one(),
                &self.weight.value.data, 0, 1, kdim as isize,
                xs, 0, (h * w) as isize, 1,
                T::zero(),
                &mut cols, 0, (h * w) as isize, 1,
            );
            let ys = &mut y.data[ni * self.out_ch * ho * wo..(ni + 1) * self.out_ch * ho * wo];
            scatter_cols_add(
                &cols, self.out_ch, ho, wo, kh, kw, self.stride.0, self.stride.1, self.pad.0,
                self.pad.1, h, w, ys,
            );
        }
        if let Some(b) = &self.bias {
            for ni in 0..n {
                for oc in 0..self.out_ch {
                    let off = (ni * self.out_ch + oc) * ho * wo;
                    let bv = b.value.data[oc];
                    for v in y.data[off..off + ho * wo].iter_mut() {
                        *v = *v + bv;
                    }
                }
            }
        }
        (y, ConvTranspose2dCache { x: x.clone(), out_hw: (ho, wo) })
    }

    pub fn backward(&mut self, cache: &ConvTranspose2dCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = cache.x.dims4();
        let (kh, kw) = (self.weight.value.shape[2], self.weight.value.shape[3]);
        let (ho, wo) = cache.out_hw;
        assert_eq!(dy.shape, vec![n, self.out_ch, ho, wo]);
        let mut dx = Tensor::zeros(cache.x.shape.clone());
        if let Some(b) = &mut self.bias {
            for ni in 0..n {
                for oc in 0..self.out_ch {
                    let off = (ni * self.out_ch + oc) * ho * wo;
                    let mut s = T::zero();
                    for &v in dy.data[off..off + ho * wo].iter() {
                        s = s + v;
                    }
                    b.grad.data[oc] = b.grad.data[oc] + s;
                }
            }
        }
        let kdim = self.out_ch * kh * kw;
        let mut dcols = vec![T::zero(); kdim * h * w];
        for ni in 0..n {
            let dys = &dy.data[ni * self.out_ch * ho * wo..(ni + 1) * self.out_ch * ho * wo];
            gather_cols(
                dys, self.out_ch, ho, wo, kh, kw, self.stride.0, self.stride.1, self.pad.0,
                self.pad.1, h, w, &mut dcols,
            );
            // dx = W · dcols
            let dxs = &mut dx.data[ni * c * h * w..(ni + 1) * c * h * w];
            T::gemm(self.in_ch, kdim, h * w, T::one(), &self.weight.value.data, &dcols, T::zero(), dxs);
            // dW += x · dcolsᵀ
            let xs = &cache.x.data[ni * c * h * w..(ni + 1) * c * h * w];
            T::gemm_view(
                self.in_ch, h * w, kdim, T::one(),
                xs, 0, (h * w) as isize, 1,
                &dcols, 0, 1, (h * w) as isize,
                T::one(),
                &mut self.weight.grad.data, 0, kdim as isize, 1,
            );
        }
        dx
    }
}
