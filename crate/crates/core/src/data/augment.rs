//! Input-image augmentation: perspective, affine, rotation (fused into one
//! homography resample with replicate padding), then blur and noise.
//! Everything is deterministic given (rng seed, config); zero magnitudes
//! collapse every stage to the identity.

use super::{IMG_H, IMG_W};
use crate::linalg::solve;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub p_perspective: f64,
    /// Corner displacement bound, as a fraction of each image dimension.
    pub max_perspective: f64,
    pub p_affine: f64,
    pub max_affine_scale: f64,
    pub max_affine_shear: f64,
    /// Translation bound as a fraction of each dimension.
    pub max_affine_translate: f64,
    pub p_rotation: f64,
    pub max_rotation_deg: f64,
    pub p_blur: f64,
    pub max_blur_sigma: f64,
    pub p_noise: f64,
    /// Exact additive-noise σ applied when the stage fires.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_perspective: 0.4,
            max_perspective: 0.06,
            p_affine: 0.4,
            max_affine_scale: 0.08,
            max_affine_shear: 0.12,
            max_affine_translate: 0.04,
            p_rotation: 0.4,
            max_rotation_deg: 7.0,
            p_blur: 0.25,
            max_blur_sigma: 1.2,
            p_noise: 0.3,
            noise_sigma: 0.04,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            p_perspective: 0.0,
            max_perspective: 0.0,
            p_affine: 0.0,
            max_affine_scale: 0.0,
            max_affine_shear: 0.0,
            max_affine_translate: 0.0,
            p_rotation: 0.0,
            max_rotation_deg: 0.0,
            p_blur: 0.0,
            max_blur_sigma: 0.0,
            p_noise: 0.0,
            noise_sigma: 0.0,
        }
    }
}

/// 3×3 row-major homography multiply: out = a · b.
fn hmul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut o = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            o[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    o
}

const H_IDENTITY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

/// Homography taking each (x_i, y_i) to (u_i, v_i) (four correspondences).
fn homography_from_pairs(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<[f64; 9]> {
    let mut a = [0.0f64; 64];
    let mut b = [0.0f64; 8];
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        let r0 = 2 * i;
        let r1 = 2 * i + 1;
        a[r0 * 8..r0 * 8 + 8].copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a[r1 * 8..r1 * 8 + 8].copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r0] = u;
        b[r1] = v;
    }
    solve(&mut a, &mut b, 8, 1)?;
    Some([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7], 1.0])
}

/// Rotation (degrees, CCW) about the image center as a sampling homography.
pub fn rotation_h(deg: f64, w: usize, h: usize) -> [f64; 9] {
    let (cx, cy) = ((w as f64 - 1.0) * 0.5, (h as f64 - 1.0) * 0.5);
    let t = deg.to_radians();
    let (s, c) = t.sin_cos();
    // translate center → rotate → translate back
    [
        c, -s, cx - c * cx + s * cy,
        s, c, cy - s * cx - c * cy,
        0.0, 0.0, 1.0,
    ]
}

/// Replicate-padding bilinear tap in pixel coordinates.
fn sample_replicate(img: &Tensor<f32>, c: usize, fy: f64, fx: f64) -> f32 {
    let (_, _, h, w) = img.dims4();
    let x0 = fx.floor();
    let y0 = fy.floor();
    let wx = (fx - x0) as f32;
    let wy = (fy - y0) as f32;
    let gx = |xi: isize| xi.clamp(0, w as isize - 1) as usize;
    let gy = |yi: isize| yi.clamp(0, h as isize - 1) as usize;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let at = |y: usize, x: usize| img.data[(c * h + y) * w + x];
    let v00 = at(gy(yi), gx(xi));
    let v01 = at(gy(yi), gx(xi + 1));
    let v10 = at(gy(yi + 1), gx(xi));
    let v11 = at(gy(yi + 1), gx(xi + 1));
    v00 * (1.0 - wx) * (1.0 - wy) + v01 * wx * (1.0 - wy) + v10 * (1.0 - wx) * wy + v11 * wx * wy
}

/// Resample with a sampling homography: out(x,y) = img(H·(x,y,1)).
pub fn warp_homography(img: &Tensor<f32>, h_mat: &[f64; 9]) -> Tensor<f32> {
    let (_, ch, h, w) = {
        let s = &img.shape;
        assert_eq!(s.len(), 3, "warp expects [C,H,W]");
        (1, s[0], s[1], s[2])
    };
    let img4 = Tensor { shape: vec![1, ch, h, w], data: img.data.clone() };
    let mut out = Tensor::<f32>::zeros(vec![ch, h, w]);
    for y in 0..h {
        for x in 0..w {
            let xs = x as f64;
            let ys = y as f64;
            let d = h_mat[6] * xs + h_mat[7] * ys + h_mat[8];
            let u = (h_mat[0] * xs + h_mat[1] * ys + h_mat[2]) / d;
            let v = (h_mat[3] * xs + h_mat[4] * ys + h_mat[5]) / d;
            for c in 0..ch {
                out.data[(c * h + y) * w + x] = sample_replicate(&img4, c, v, u);
            }
        }
    }
    out
}

/// Standard normal via Box–Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Separable Gaussian blur with replicate edges.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let v = (-0.5 * (i as f64 / sigma).powi(2)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let (ch, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let mut tmp = vec![0.0f32; img.len()];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xi = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += *kv * img.data[(c * h + y) * w + xi] as f64;
                }
                tmp[(c * h + y) * w + x] = acc as f32;
            }
        }
    }
    let mut out = Tensor::<f32>::zeros(img.shape.clone());
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yi = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += *kv * tmp[(c * h + yi) * w + x] as f64;
                }
                out.data[(c * h + y) * w + x] = acc as f32;
            }
        }
    }
    out
}

/// Apply the configured augmentation pipeline to a [3,64,256] image.
pub fn augment(image: &Tensor<f32>, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    assert_eq!(image.shape, vec![3, IMG_H, IMG_W]);
    let (w, h) = (IMG_W as f64, IMG_H as f64);
    let mut hm = H_IDENTITY;
    let mut warped = false;

    if config.max_perspective > 0.0 && rng.gen_bool(config.p_perspective) {
        let corners = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
        let mut displaced = corners;
        for (i, (cx, cy)) in corners.iter().enumerate() {
            let dx = rng.gen_range(-config.max_perspective..=config.max_perspective) * w;
            let dy = rng.gen_range(-config.max_perspective..=config.max_perspective) * h;
            displaced[i] = (cx + dx, cy + dy);
        }
        if let Some(hp) = homography_from_pairs(&corners, &displaced) {
            hm = hmul(&hm, &hp);
            warped = true;
        }
    }
    if (config.max_affine_scale > 0.0 || config.max_affine_shear > 0.0 || config.max_affine_translate > 0.0)
        && rng.gen_bool(config.p_affine)
    {
        let sx = 1.0 + rng.gen_range(-config.max_affine_scale..=config.max_affine_scale);
        let sy = 1.0 + rng.gen_range(-config.max_affine_scale..=config.max_affine_scale);
        let shear = rng.gen_range(-config.max_affine_shear..=config.max_affine_shear);
        let tx = rng.gen_range(-config.max_affine_translate..=config.max_affine_translate) * w;
        let ty = rng.gen_range(-config.max_affine_translate..=config.max_affine_translate) * h;
        let (cx, cy) = ((w - 1.0) * 0.5, (h - 1.0) * 0.5);
        let ha = [
            sx, shear, cx - sx * cx - shear * cy + tx,
            0.0, sy, cy - sy * cy + ty,
            0.0, 0.0, 1.0,
        ];
        hm = hmul(&hm, &ha);
        warped = true;
    }
    if config.max_rotation_deg > 0.0 && rng.gen_bool(config.p_rotation) {
        let deg = rng.gen_range(-config.max_rotation_deg..=config.max_rotation_deg);
        hm = hmul(&hm, &rotation_h(deg, IMG_W, IMG_H));
        warped = true;
    }

    let mut out = if warped { warp_homography(image, &hm) } else { image.clone() };

    if config.max_blur_sigma > 0.0 && rng.gen_bool(config.p_blur) {
        let sigma = rng.gen_range(0.3..=config.max_blur_sigma.max(0.3001));
        out = gaussian_blur(&out, sigma);
    }
    if config.noise_sigma > 0.0 && rng.gen_bool(config.p_noise) {
        for v in out.data.iter_mut() {
            *v += (config.noise_sigma * normal(rng)) as f32;
        }
    }
    for v in out.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}
