//! Bilinear grid sampling with align-corners normalized coordinates and
//! zero padding outside the source extent.
//!
//! Grids are [N, Ho, Wo, 2] with the last axis ordered (x, y) in [-1, 1]:
//! x = -1 maps to source column 0 and x = +1 to column W-1 (same for y/rows).
//! Out-of-range taps read as zero, so sampling fades to black off the edge.

use crate::tensor::{Scalar, Tensor};

/// Cache for the backward pass: owns copies of both inputs.
pub struct GridSampleCache<T> {
    pub image: Tensor<T>,
    pub grid: Tensor<T>,
}

#[inline(always)]
fn tap<T: Scalar>(img: &[T], c_off: usize, h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        img[c_off + y as usize * w + x as usize]
    }
}

/// Unnormalize an align-corners coordinate: g ∈ [-1,1] → pixel index space.
#[inline(always)]
fn unnorm<T: Scalar>(g: T, extent: usize) -> T {
    let half = T::from_f64(0.5);
    (g + T::one()) * half * T::from_f64((extent - 1) as f64)
}

/// Sample `image` [N,C,H,W] at `grid` [N,Ho,Wo,2] → [N,C,Ho,Wo].
pub fn grid_sample<T: Scalar>(image: &Tensor<T>, grid: &Tensor<T>) -> (Tensor<T>, GridSampleCache<T>) {
    let (n, c, h, w) = image.dims4();
    assert_eq!(grid.shape.len(), 4, "grid must be [N,Ho,Wo,2]");
    assert_eq!(grid.shape[0], n);
    assert_eq!(grid.shape[3], 2);
    let (ho, wo) = (grid.shape[1], grid.shape[2]);
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let one = T::one();
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = ni * ho * wo * 2 + (oy * wo + ox) * 2;
                let fx = unnorm(grid.data[g], w);
                let fy = unnorm(grid.data[g + 1], h);
                let x0 = fx.floor();
                let y0 = fy.floor();
                let wx = fx - x0;
                let wy = fy - y0;
                let (xi, yi) = (x0.as_f64() as isize, y0.as_f64() as isize);
                let w00 = (one - wx) * (one - wy);
                let w01 = wx * (one - wy);
                let w10 = (one - wx) * wy;
                let w11 = wx * wy;
                for ci in 0..c {
                    let c_off = (ni * c + ci) * h * w;
                    let v00 = tap(&image.data, c_off, h, w, yi, xi);
                    let v01 = tap(&image.data, c_off, h, w, yi, xi + 1);
                    let v10 = tap(&image.data, c_off, h, w, yi + 1, xi);
                    let v11 = tap(&image.data, c_off, h, w, yi + 1, xi + 1);
                    out.data[(ni * c + ci) * ho * wo + oy * wo + ox] =
                        v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11;
                }
            }
        }
    }
    let cache = GridSampleCache { image: image.clone(), grid: grid.clone() };
    (out, cache)
}

/// Independent reference: recomputes every output element from scratch with
/// the plain four-neighbor weighted sum. Kept free of the production code's
/// loop structure so the two can cross-check each other.
pub fn grid_sample_oracle<T: Scalar>(image: &Tensor<T>, grid: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = image.dims4();
    let (ho, wo) = (grid.shape[1], grid.shape[2]);
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let fetch = |ni: usize, ci: usize, y: isize, x: isize| -> T {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            image.data[((ni * c + ci) * h + y as usize) * w + x as usize]
        } else {
            T::zero()
        }
    };
    for i in 0..n * c * ho * wo {
        let ox = i % wo;
        let oy = (i / wo) % ho;
        let ci = (i / (wo * ho)) % c;
        let ni = i / (wo * ho * c);
        let gx = grid.data[((ni * ho + oy) * wo + ox) * 2];
        let gy = grid.data[((ni * ho + oy) * wo + ox) * 2 + 1];
        let fx = unnorm(gx, w);
        let fy = unnorm(gy, h);
        let x0 = fx.floor();
        let y0 = fy.floor();
        let wx = fx - x0;
        let wy = fy - y0;
        let (xi, yi) = (x0.as_f64() as isize, y0.as_f64() as isize);
        let one = T::one();
        out.data[i] = fetch(ni, ci, yi, xi) * ((one - wx) * (one - wy))
            + fetch(ni, ci, yi, xi + 1) * (wx * (one - wy))
            + fetch(ni, ci, yi + 1, xi) * ((one - wx) * wy)
            + fetch(ni, ci, yi + 1, xi + 1) * (wx * wy);
    }
    out
}

/// Backward: returns (d_image, d_grid).
pub fn grid_sample_backward<T: Scalar>(
    cache: &GridSampleCache<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = cache.image.dims4();
    let (ho, wo) = (cache.grid.shape[1], cache.grid.shape[2]);
    assert_eq!(dout.shape, vec![n, c, ho, wo]);
    let mut dimg = Tensor::zeros(cache.image.shape.clone());
    let mut dgrid = Tensor::zeros(cache.grid.shape.clone());
    let one = T::one();
    let half = T::from_f64(0.5);
    let sx = half * T::from_f64((w - 1) as f64);
    let sy = half * T::from_f64((h - 1) as f64);
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = ni * ho * wo * 2 + (oy * wo + ox) * 2;
                let fx = unnorm(cache.grid.data[g], w);
                let fy = unnorm(cache.grid.data[g + 1], h);
                let x0 = fx.floor();
                let y0 = fy.floor();
                let wx = fx - x0;
                let wy = fy - y0;
                let (xi, yi) = (x0.as_f64() as isize, y0.as_f64() as isize);
                let w00 = (one - wx) * (one - wy);
                let w01 = wx * (one - wy);
                let w10 = (one - wx) * wy;
                let w11 = wx * wy;
                let mut dfx = T::zero();
                let mut dfy = T::zero();
                for ci in 0..c {
                    let c_off = (ni * c + ci) * h * w;
                    let d = dout.data[(ni * c + ci) * ho * wo + oy * wo + ox];
                    let v00 = tap(&cache.image.data, c_off, h, w, yi, xi);
                    let v01 = tap(&cache.image.data, c_off, h, w, yi, xi + 1);
                    let v10 = tap(&cache.image.data, c_off, h, w, yi + 1, xi);
                    let v11 = tap(&cache.image.data, c_off, h, w, yi + 1, xi + 1);
                    dfx = dfx + d * ((v01 - v00) * (one - wy) + (v11 - v10) * wy);
                    dfy = dfy + d * ((v10 - v00) * (one - wx) + (v11 - v01) * wx);
                    let mut scatter = |y: isize, x: isize, wt: T| {
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            dimg.data[c_off + y as usize * w + x as usize] =
                                dimg.data[c_off + y as usize * w + x as usize] + wt * d;
                        }
                    };
                    scatter(yi, xi, w00);
                    scatter(yi, xi + 1, w01);
                    scatter(yi + 1, xi, w10);
                    scatter(yi + 1, xi + 1, w11);
                }
                dgrid.data[g] = dfx * sx;
                dgrid.data[g + 1] = dfy * sy;
            }
        }
    }
    (dimg, dgrid)
}

/// Align-corners lattice covering the full [-1,1] extent, shape [h, w, 2].
pub fn identity_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let mut g = Tensor::zeros(vec![h, w, 2]);
    for y in 0..h {
        for x in 0..w {
            let gx = if w > 1 { -1.0 + 2.0 * x as f64 / (w - 1) as f64 } else { 0.0 };
            let gy = if h > 1 { -1.0 + 2.0 * y as f64 / (h - 1) as f64 } else { 0.0 };
            g.data[(y * w + x) * 2] = T::from_f64(gx);
            g.data[(y * w + x) * 2 + 1] = T::from_f64(gy);
        }
    }
    g
}

pub struct ResizeCache<T> {
    inner: GridSampleCache<T>,
}

/// Bilinear resize of [N,C,H,W] to (oh, ow) via the shared sampler.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, oh: usize, ow: usize) -> (Tensor<T>, ResizeCache<T>) {
    let n = image.shape[0];
    let base = identity_grid::<T>(oh, ow);
    let mut grid = Tensor::zeros(vec![n, oh, ow, 2]);
    for ni in 0..n {
        grid.data[ni * base.data.len()..(ni + 1) * base.data.len()].copy_from_slice(&base.data);
    }
    let (out, inner) = grid_sample(image, &grid);
    (out, ResizeCache { inner })
}

pub fn resize_bilinear_backward<T: Scalar>(cache: &ResizeCache<T>, dout: &Tensor<T>) -> Tensor<T> {
    grid_sample_backward(&cache.inner, dout).0
}
