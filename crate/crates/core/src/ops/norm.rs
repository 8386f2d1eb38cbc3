//! Normalization layers: last-dim LayerNorm, channel-wise LayerNorm over
//! NCHW maps, BatchNorm2d with running statistics, and global response
//! normalization (GRN).

use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
    dim: usize,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    rows: usize,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::with_value(&format!("{name}.gamma"), Tensor::full(vec![dim], 1.0)),
            beta: Param::zeros(&format!("{name}.beta"), vec![dim]),
            eps: 1e-6,
            dim,
        }
    }

    /// Normalizes the trailing dimension of any shape whose last axis == dim.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        let d = self.dim;
        assert_eq!(x.shape.last(), Some(&d));
        let rows = x.len() / d;
        let mut y = Tensor::zeros(x.shape.clone());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::from_f64(1.0 / d as f64);
        for r in 0..rows {
            let xs = &x.data[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in xs.iter() {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in xs.iter() {
                let e = v - mean;
                var = var + e * e;
            }
            var = var * inv_d;
            let rs = T::one() / (var + T::from_f64(self.eps)).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (xs[i] - mean) * rs;
                xhat[r * d + i] = xh;
                y.data[r * d + i] = self.gamma.value.data[i] * xh + self.beta.value.data[i];
            }
        }
        (y, LayerNormCache { xhat, rstd, rows })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.dim;
        let rows = cache.rows;
        assert_eq!(dy.len(), rows * d);
        let mut dx = Tensor::zeros(dy.shape.clone());
        let inv_d = T::from_f64(1.0 / d as f64);
        for r in 0..rows {
            let o = r * d;
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for i in 0..d {
                let g = dy.data[o + i];
                let xh = cache.xhat[o + i];
                self.gamma.grad.data[i] = self.gamma.grad.data[i] + g * xh;
                self.beta.grad.data[i] = self.beta.grad.data[i] + g;
                let dxh = g * self.gamma.value.data[i];
                sum_dxh = sum_dxh + dxh;
                sum_dxh_xh = sum_dxh_xh + dxh * xh;
            }
            sum_dxh = sum_dxh * inv_d;
            sum_dxh_xh = sum_dxh_xh * inv_d;
            for i in 0..d {
                let dxh = dy.data[o + i] * self.gamma.value.data[i];
                dx.data[o + i] = cache.rstd[r] * (dxh - sum_dxh - cache.xhat[o + i] * sum_dxh_xh);
            }
        }
        dx
    }
}

/// LayerNorm across channels at every spatial position of an NCHW map.
pub struct LayerNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
    ch: usize,
}

pub struct LayerNorm2dCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm2d<T> {
    pub fn new(name: &str, ch: usize) -> Self {
        LayerNorm2d {
            gamma: Param::with_value(&format!("{name}.gamma"), Tensor::full(vec![ch], 1.0)),
            beta: Param::zeros(&format!("{name}.beta"), vec![ch]),
            eps: 1e-6,
            ch,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LayerNorm2dCache<T>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.ch);
        let hw = h * w;
        let mut y = Tensor::zeros(x.shape.clone());
        let mut xhat = Tensor::zeros(x.shape.clone());
        let mut rstd = vec![T::zero(); n * hw];
        let inv_c = T::from_f64(1.0 / c as f64);
        for ni in 0..n {
            for p in 0..hw {
                let base = ni * c * hw + p;
                let mut mean = T::zero();
                for ci in 0..c {
                    mean = mean + x.data[base + ci * hw];
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for ci in 0..c {
                    let e = x.data[base + ci * hw] - mean;
                    var = var + e * e;
                }
                var = var * inv_c;
                let rs = T::one() / (var + T::from_f64(self.eps)).sqrt();
                rstd[ni * hw + p] = rs;
                for ci in 0..c {
                    let xh = (x.data[base + ci * hw] - mean) * rs;
                    xhat.data[base + ci * hw] = xh;
                    y.data[base + ci * hw] =
                        self.gamma.value.data[ci] * xh + self.beta.value.data[ci];
                }
            }
        }
        (y, LayerNorm2dCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNorm2dCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = cache.xhat.dims4();
        let hw = h * w;
        assert_eq!(dy.shape, cache.xhat.shape);
        let mut dx = Tensor::zeros(dy.shape.clone());
        let inv_c = T::from_f64(1.0 / c as f64);
        for ni in 0..n {
            for p in 0..hw {
                let base = ni * c * hw + p;
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for ci in 0..c {
                    let g = dy.data[base + ci * hw];
                    let xh = cache.xhat.data[base + ci * hw];
                    self.gamma.grad.data[ci] = self.gamma.grad.data[ci] + g * xh;
                    self.beta.grad.data[ci] = self.beta.grad.data[ci] + g;
                    let dxh = g * self.gamma.value.data[ci];
                    sum_dxh = sum_dxh + dxh;
                    sum_dxh_xh = sum_dxh_xh + dxh * xh;
                }
                sum_dxh = sum_dxh * inv_c;
                sum_dxh_xh = sum_dxh_xh * inv_c;
                let rs = cache.rstd[ni * hw + p];
                for ci in 0..c {
                    let dxh = dy.data[base + ci * hw] * self.gamma.value.data[ci];
                    dx.data[base + ci * hw] =
                        rs * (dxh - sum_dxh - cache.xhat.data[base + ci * hw] * sum_dxh_xh);
                }
            }
        }
        dx
    }
}

pub struct BatchNorm2d<T> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    ch: usize,
}

pub struct BatchNorm2dCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
    train: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, ch: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: Param::with_value(&format!("{name}.gamma"), Tensor::full(vec![ch], 1.0)),
            beta: Param::zeros(&format!("{name}.beta"), vec![ch]),
            running_mean: Tensor::zeros(vec![ch]),
            running_var: Tensor::full(vec![ch], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            ch,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, BatchNorm2dCache<T>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.ch);
        let hw = h * w;
        let count = n * hw;
        let mut y = Tensor::zeros(x.shape.clone());
        let mut xhat = Tensor::zeros(x.shape.clone());
        let mut rstd = vec![T::zero(); c];
        for ci in 0..c {
            let (mean, var) = if train {
                let mut mean = T::zero();
                for ni in 0..n {
                    let o = (ni * c + ci) * hw;
                    for &v in x.data[o..o + hw].iter() {
                        mean = mean + v;
                    }
                }
                mean = mean * T::from_f64(1.0 / count as f64);
                let mut var = T::zero();
                for ni in 0..n {
                    let o = (ni * c + ci) * hw;
                    for &v in x.data[o..o + hw].iter() {
                        let e = v - mean;
                        var = var + e * e;
                    }
                }
                var = var * T::from_f64(1.0 / count as f64);
                // running stats keep the unbiased variance
                let unbiased = if count > 1 {
                    var * T::from_f64(count as f64 / (count - 1) as f64)
                } else {
                    var
                };
                let m = T::from_f64(self.momentum);
                self.running_mean.data[ci] =
                    (T::one() - m) * self.running_mean.data[ci] + m * mean;
                self.running_var.data[ci] =
                    (T::one() - m) * self.running_var.data[ci] + m * unbiased;
                (mean, var)
            } else {
                (self.running_mean.data[ci], self.running_var.data[ci])
            };
            let rs = T::one() / (var + T::from_f64(self.eps)).sqrt();
            rstd[ci] = rs;
            let g = self.gamma.value.data[ci];
            let b = self.beta.value.data[ci];
            for ni in 0..n {
                let o = (ni * c + ci) * hw;
                for i in 0..hw {
                    let xh = (x.data[o + i] - mean) * rs;
                    xhat.data[o + i] = xh;
                    y.data[o + i] = g * xh + b;
                }
            }
        }
        (y, BatchNorm2dCache { xhat, rstd, train })
    }

    pub fn backward(&mut self, cache: &BatchNorm2dCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = cache.xhat.dims4();
        let hw = h * w;
        let count = n * hw;
        let mut dx = Tensor::zeros(dy.shape.clone());
        for ci in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for ni in 0..n {
                let o = (ni * c + ci) * hw;
                for i in 0..hw {
                    sum_dy = sum_dy + dy.data[o + i];
                    sum_dy_xh = sum_dy_xh + dy.data[o + i] * cache.xhat.data[o + i];
                }
            }
            self.gamma.grad.data[ci] = self.gamma.grad.data[ci] + sum_dy_xh;
            self.beta.grad.data[ci] = self.beta.grad.data[ci] + sum_dy;
            let g = self.gamma.value.data[ci];
            let rs = cache.rstd[ci];
            if cache.train {
                let inv = T::from_f64(1.0 / count as f64);
                let mdy = sum_dy * inv;
                let mdyxh = sum_dy_xh * inv;
                for ni in 0..n {
                    let o = (ni * c + ci) * hw;
                    for i in 0..hw {
                        dx.data[o + i] = g
                            * rs
                            * (dy.data[o + i] - mdy - cache.xhat.data[o + i] * mdyxh);
                    }
                }
            } else {
                for ni in 0..n {
                    let o = (ni * c + ci) * hw;
                    for i in 0..hw {
                        dx.data[o + i] = g * rs * dy.data[o + i];
                    }
                }
            }
        }
        dx
    }
}

/// Global response normalization over an NCHW map:
/// g_c = ‖x_c‖₂ (spatial), n_c = g_c / (mean_c g + ε), y = γ·(x·n) + β + x.
pub struct Grn<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
    ch: usize,
}

pub struct GrnCache<T> {
    x: Tensor<T>,
    gx: Vec<T>,
    mx: Vec<T>,
}

impl<T: Scalar> Grn<T> {
    pub fn new(name: &str, ch: usize) -> Self {
        Grn {
            gamma: Param::zeros(&format!("{name}.gamma"), vec![ch]),
            beta: Param::zeros(&format!("{name}.beta"), vec![ch]),
            eps: 1e-6,
            ch,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, GrnCache<T>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.ch);
        let hw = h * w;
        let mut gx = vec![T::zero(); n * c];
        let mut mx = vec![T::zero(); n];
        for ni in 0..n {
            let mut sum = T::zero();
            for ci in 0..c {
                let o = (ni * c + ci) * hw;
                let mut s2 = T::zero();
                for &v in x.data[o..o + hw].iter() {
                    s2 = s2 + v * v;
                }
                let g = s2.sqrt();
                gx[ni * c + ci] = g;
                sum = sum + g;
            }
            mx[ni] = sum * T::from_f64(1.0 / c as f64);
        }
        let mut y = Tensor::zeros(x.shape.clone());
        for ni in 0..n {
            let denom = mx[ni] + T::from_f64(self.eps);
            for ci in 0..c {
                let nx = gx[ni * c + ci] / denom;
                let gam = self.gamma.value.data[ci];
                let bet = self.beta.value.data[ci];
                let o = (ni * c + ci) * hw;
                for i in 0..hw {
                    let xv = x.data[o + i];
                    y.data[o + i] = gam * (xv * nx) + bet + xv;
                }
            }
        }
        (y, GrnCache { x: x.clone(), gx, mx })
    }

    pub fn backward(&mut self, cache: &GrnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = cache.x.dims4();
        let hw = h * w;
        let mut dx = Tensor::zeros(dy.shape.clone());
        for ni in 0..n {
            let denom = cache.mx[ni] + T::from_f64(self.eps);
            // dnx_c = Σ_spatial dy ⊙ γ_c ⊙ x
            let mut dnx = vec![T::zero(); c];
            for ci in 0..c {
                let o = (ni * c + ci) * hw;
                let gam = self.gamma.value.data[ci];
                let nx = cache.gx[ni * c + ci] / denom;
                let mut s_dnx = T::zero();
                let mut s_db = T::zero();
                let mut s_dg = T::zero();
                for i in 0..hw {
                    let d = dy.data[o + i];
                    let xv = cache.x.data[o + i];
                    s_dnx = s_dnx + d * xv;
                    s_db = s_db + d;
                    s_dg = s_dg + d * (xv * nx);
                }
                dnx[ci] = s_dnx * gam;
                self.beta.grad.data[ci] = self.beta.grad.data[ci] + s_db;
                self.gamma.grad.data[ci] = self.gamma.grad.data[ci] + s_dg;
                // direct term: dy·(γ·nx + 1)
                let k = gam * nx + T::one();
                for i in 0..hw {
                    dx.data[o + i] = dy.data[o + i] * k;
                }
            }
            // through g: dg_c = dnx_c/denom − Σ_c' dnx_c'·g_c' / (C·denom²)
            let mut dot = T::zero();
            for ci in 0..c {
                dot = dot + dnx[ci] * cache.gx[ni * c + ci];
            }
            let corr = dot / (T::from_f64(c as f64) * denom * denom);
            for ci in 0..c {
                let g = cache.gx[ni * c + ci];
                if g <= T::zero() {
                    continue;
                }
                let dg = dnx[ci] / denom - corr;
                let scale = dg / g;
                let o = (ni * c + ci) * hw;
                for i in 0..hw {
                    dx.data[o + i] = dx.data[o + i] + scale * cache.x.data[o + i];
                }
            }
        }
        dx
    }
}
