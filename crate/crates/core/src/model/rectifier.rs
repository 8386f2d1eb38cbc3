//! TPS-based spatial transformer: a small depthwise-separable conv net
//! predicts K=20 control points from a 32×64 thumbnail of the input, a
//! precomputed thin-plate-spline basis expands them into a dense 32×128
//! sampling grid, and the shared bilinear sampler resamples the original
//! 64×256 image into a normalized 32×128 view.

use crate::ops::act::{hardtanh, hardtanh_backward, relu, relu_backward};
use crate::ops::conv::{Conv2d, Conv2dCache};
use crate::ops::linear::{Linear, LinearCache};
use crate::ops::pool::{max_pool2x2, max_pool2x2_backward, MaxPoolCache};
use crate::ops::sample::{
    grid_sample, grid_sample_backward, identity_grid, resize_bilinear, resize_bilinear_backward,
    GridSampleCache, ResizeCache,
};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

pub const NUM_CONTROL_POINTS: usize = 20;
pub const FIDUCIAL_MARGIN: f64 = 0.05;
const TPS_EPS: f64 = 1e-6;

pub const RECT_H: usize = 32;
pub const RECT_W: usize = 128;
const LOC_H: usize = 32;
const LOC_W: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum TpsError {
    #[error("thin-plate-spline system is singular")]
    SingularSystem,
}

/// The canonical fiducial template: 10 points along the top edge and 10
/// along the bottom, inset by FIDUCIAL_MARGIN, as (x, y) in [−1, 1]².
pub fn canonical_fiducials() -> Vec<(f64, f64)> {
    let half = NUM_CONTROL_POINTS / 2;
    let mut pts = Vec::with_capacity(NUM_CONTROL_POINTS);
    for row in 0..2 {
        let y = if row == 0 { -1.0 + FIDUCIAL_MARGIN } else { 1.0 - FIDUCIAL_MARGIN };
        for i in 0..half {
            let span = 2.0 - 2.0 * FIDUCIAL_MARGIN;
            let x = -1.0 + FIDUCIAL_MARGIN + span * i as f64 / (half - 1) as f64;
            pts.push((x, y));
        }
    }
    pts
}

fn tps_u(d2: f64) -> f64 {
    if d2 < 1e-12 {
        0.0
    } else {
        d2 * d2.ln()
    }
}

/// Thin-plate-spline warp machinery with the base fiducials fixed.
///
/// Because the TPS system is solved over the (fixed) canonical fiducials,
/// the map from control points to the dense output grid is linear; we
/// precompute that map once as `basis` so that every forward pass is a
/// single matrix product and the backward pass its transpose.
pub struct TpsBasis<T> {
    k: usize,
    fiducials: Vec<(f64, f64)>,
    /// (k+3)² system matrix (ε-regularized), kept for warping ad-hoc points.
    l_matrix: Vec<f64>,
    /// [out_h·out_w, k]: grid coordinates = basis · control_points.
    basis: Tensor<T>,
    pub out_h: usize,
    pub out_w: usize,
}

impl<T: Scalar> TpsBasis<T> {
    pub fn new(fiducials: &[(f64, f64)], out_h: usize, out_w: usize) -> Result<Self, TpsError> {
        let k = fiducials.len();
        let n = k + 3;
        let mut l = vec![0.0f64; n * n];
        for i in 0..k {
            for j in 0..k {
                let dx = fiducials[i].0 - fiducials[j].0;
                let dy = fiducials[i].1 - fiducials[j].1;
                l[i * n + j] = tps_u(dx * dx + dy * dy);
            }
            l[i * n + i] += TPS_EPS;
            l[i * n + k] = 1.0;
            l[i * n + k + 1] = fiducials[i].0;
            l[i * n + k + 2] = fiducials[i].1;
            l[k * n + i] = 1.0;
            l[(k + 1) * n + i] = fiducials[i].0;
            l[(k + 2) * n + i] = fiducials[i].1;
        }

        // Solve L·ψ(p) = φ(p) for every output-lattice point p at once;
        // the first k rows of ψ are the linear weights on the control
        // points (the affine tail multiplies the zero block of the RHS).
        let hw = out_h * out_w;
        let lattice = identity_grid::<f64>(out_h, out_w);
        let mut rhs = vec![0.0f64; n * hw];
        for p in 0..hw {
            let (px, py) = (lattice.data[p * 2], lattice.data[p * 2 + 1]);
            for i in 0..k {
                let dx = px - fiducials[i].0;
                let dy = py - fiducials[i].1;
                rhs[i * hw + p] = tps_u(dx * dx + dy * dy);
            }
            rhs[k * hw + p] = 1.0;
            rhs[(k + 1) * hw + p] = px;
            rhs[(k + 2) * hw + p] = py;
        }
        let mut l_work = l.clone();
        crate::linalg::solve(&mut l_work, &mut rhs, n, hw).ok_or(TpsError::SingularSystem)?;
        let mut basis = Tensor::zeros(vec![hw, k]);
        for p in 0..hw {
            for i in 0..k {
                basis.data[p * k + i] = T::from_f64(rhs[i * hw + p]);
            }
        }
        Ok(TpsBasis { k, fiducials: fiducials.to_vec(), l_matrix: l, basis, out_h, out_w })
    }

    /// Dense sampling grid for a batch of control points [N, K, 2] → [N, H, W, 2].
    pub fn grid(&self, cp: &Tensor<T>) -> Tensor<T> {
        let nb = cp.shape[0];
        assert_eq!(cp.shape, vec![nb, self.k, 2], "control points must be [N, K, 2]");
        let hw = self.out_h * self.out_w;
        let mut grid = Tensor::zeros(vec![nb, self.out_h, self.out_w, 2]);
        for ni in 0..nb {
            T::gemm_view(
                hw, self.k, 2, T::one(),
                &self.basis.data, 0, self.k as isize, 1,
                &cp.data, ni * self.k * 2, 2, 1,
                T::zero(),
                &mut grid.data, ni * hw * 2, 2, 1,
            );
        }
        grid
    }

    /// Transpose of `grid`: accumulate d(loss)/d(control points).
    pub fn grid_backward(&self, dgrid: &Tensor<T>) -> Tensor<T> {
        let nb = dgrid.shape[0];
        assert_eq!(dgrid.shape, vec![nb, self.out_h, self.out_w, 2]);
        let hw = self.out_h * self.out_w;
        let mut dcp = Tensor::zeros(vec![nb, self.k, 2]);
        for ni in 0..nb {
            T::gemm_view(
                self.k, hw, 2, T::one(),
                &self.basis.data, 0, 1, self.k as isize,
                &dgrid.data, ni * hw * 2, 2, 1,
                T::zero(),
                &mut dcp.data, ni * self.k * 2, 2, 1,
            );
        }
        dcp
    }

    /// Evaluate the warp defined by `cp` at arbitrary query points (solves
    /// the TPS system fresh for the queries; used by tests and diagnostics).
    pub fn warp_points(&self, cp: &[(f64, f64)], queries: &[(f64, f64)]) -> Vec<(f64, f64)> {
        assert_eq!(cp.len(), self.k);
        let n = self.k + 3;
        let nq = queries.len();
        let mut rhs = vec![0.0f64; n * nq];
        for (q, &(qx, qy)) in queries.iter().enumerate() {
            for i in 0..self.k {
                let dx = qx - self.fiducials[i].0;
                let dy = qy - self.fiducials[i].1;
                rhs[i * nq + q] = tps_u(dx * dx + dy * dy);
            }
            rhs[self.k * nq + q] = 1.0;
            rhs[(self.k + 1) * nq + q] = qx;
            rhs[(self.k + 2) * nq + q] = qy;
        }
        let mut l_work = self.l_matrix.clone();
        crate::linalg::solve(&mut l_work, &mut rhs, n, nq).expect("basis was solvable at build");
        (0..nq)
            .map(|q| {
                let mut out = (0.0, 0.0);
                for i in 0..self.k {
                    let w = rhs[i * nq + q];
                    out.0 += w * cp[i].0;
                    out.1 += w * cp[i].1;
                }
                out
            })
            .collect()
    }
}

struct SepConv<T> {
    dw: Conv2d<T>,
    pw: Conv2d<T>,
}

struct SepConvCache<T> {
    dw: Conv2dCache<T>,
    pw: Conv2dCache<T>,
    out: Tensor<T>,
}

impl<T: Scalar> SepConv<T> {
    fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let dw = Conv2d::new(&format!("{name}.dw"), in_ch, in_ch, (3, 3), (1, 1), (1, 1), in_ch, false, rng);
        let pw = Conv2d::new(&format!("{name}.pw"), in_ch, out_ch, (1, 1), (1, 1), (0, 0), 1, true, rng);
        SepConv { dw, pw }
    }

    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, SepConvCache<T>) {
        let (m, dw) = self.dw.forward(x);
        let (z, pw) = self.pw.forward(&m);
        let y = relu(&z);
        let out = y.clone();
        (y, SepConvCache { dw, pw, out })
    }

    fn backward(&mut self, cache: &SepConvCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dz = relu_backward(&cache.out, dy);
        let dm = self.pw.backward(&cache.pw, &dz);
        self.dw.backward(&cache.dw, &dm)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = vec![&mut self.dw.weight];
        ps.push(&mut self.pw.weight);
        if let Some(b) = &mut self.pw.bias {
            ps.push(b);
        }
        ps
    }
}

pub struct Rectifier<T> {
    convs: Vec<SepConv<T>>,
    fc1: Linear<T>,
    fc2: Linear<T>,
    basis: TpsBasis<T>,
}

pub struct LocalizeCache<T> {
    convs: Vec<SepConvCache<T>>,
    pools: Vec<MaxPoolCache>,
    flat_shape: Vec<usize>,
    fc1: LinearCache<T>,
    h1: Tensor<T>,
    fc2: LinearCache<T>,
    pre_squash: Tensor<T>,
}

pub struct RectifierCache<T> {
    resize: ResizeCache<T>,
    loc: LocalizeCache<T>,
    pub control_points: Tensor<T>,
    sample: GridSampleCache<T>,
}

impl<T: Scalar> Rectifier<T> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let filters = [32, 64, 128, 256, 256, 256];
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &f) in filters.iter().enumerate() {
            convs.push(SepConv::new(&format!("rect.conv{}", i + 1), in_ch, f, rng));
            in_ch = f;
        }
        // After five 2×2 pools the 32×64 thumbnail is 1×2, so conv6's
        // flattened output is 256·1·2 = 512 features.
        let fc1 = Linear::new("rect.fc1", 512, 512, true, rng);
        // Identity at init: zero weights, bias = the fiducial template
        // (hardtanh is exact there since every |coordinate| < 1).
        let mut fc2 = Linear::zeros("rect.fc2", 512, 2 * NUM_CONTROL_POINTS, true);
        let template = canonical_fiducials();
        let bias = fc2.bias.as_mut().unwrap();
        for (i, &(x, y)) in template.iter().enumerate() {
            bias.value.data[2 * i] = T::from_f64(x);
            bias.value.data[2 * i + 1] = T::from_f64(y);
        }
        let basis = TpsBasis::new(&template, RECT_H, RECT_W).expect("canonical fiducials are well-spread");
        Rectifier { convs, fc1, fc2, basis }
    }

    pub fn basis(&self) -> &TpsBasis<T> {
        &self.basis
    }

    /// Predict control points [N, 20, 2] from the 3×32×64 thumbnail.
    pub fn localize(&self, small: &Tensor<T>) -> (Tensor<T>, LocalizeCache<T>) {
        let (n, c, h, w) = small.dims4();
        assert_eq!((c, h, w), (3, LOC_H, LOC_W), "localization input must be 3×32×64");
        let mut cur = small.clone();
        let mut convs = Vec::new();
        let mut pools = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, cache) = conv.forward(&cur);
            convs.push(cache);
            if i < 5 {
                let (p, pc) = max_pool2x2(&y);
                pools.push(pc);
                cur = p;
            } else {
                cur = y;
            }
        }
        let flat_shape = cur.shape.clone();
        let flat = Tensor::from_vec(vec![n, cur.len() / n], cur.data);
        let (z1, fc1) = self.fc1.forward(&flat);
        let h1 = relu(&z1);
        let (z2, fc2) = self.fc2.forward(&h1);
        let cp_flat = hardtanh(&z2);
        let cp = Tensor::from_vec(vec![n, NUM_CONTROL_POINTS, 2], cp_flat.data);
        (cp, LocalizeCache { convs, pools, flat_shape, fc1, h1, fc2, pre_squash: z2 })
    }

    pub fn localize_backward(&mut self, cache: &LocalizeCache<T>, dcp: &Tensor<T>) -> Tensor<T> {
        let n = dcp.shape[0];
        let dflat = Tensor::from_vec(vec![n, 2 * NUM_CONTROL_POINTS], dcp.data.clone());
        let dz2 = hardtanh_backward(&cache.pre_squash, &dflat);
        let dh1 = self.fc2.backward(&cache.fc2, &dz2);
        let dz1 = relu_backward(&cache.h1, &dh1);
        let dflat1 = self.fc1.backward(&cache.fc1, &dz1);
        let mut cur = Tensor::from_vec(cache.flat_shape.clone(), dflat1.data);
        for i in (0..self.convs.len()).rev() {
            if i < 5 {
                cur = max_pool2x2_backward(&cache.pools[i], &cur);
            }
            cur = self.convs[i].backward(&cache.convs[i], &cur);
        }
        cur
    }

    /// Full rectification: 3×64×256 batch → 3×32×128 batch.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, RectifierCache<T>) {
        let (_, c, _, _) = x.dims4();
        assert_eq!(c, 3, "rectifier expects RGB input");
        let (small, resize) = resize_bilinear(x, LOC_H, LOC_W);
        let (cp, loc) = self.localize(&small);
        let grid = self.basis.grid(&cp);
        let (out, sample) = grid_sample(x, &grid);
        (out, RectifierCache { resize, loc, control_points: cp, sample })
    }

    pub fn backward(&mut self, cache: &RectifierCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (dimg, dgrid) = grid_sample_backward(&cache.sample, dy);
        let dcp = self.basis.grid_backward(&dgrid);
        let dsmall = self.localize_backward(&cache.loc, &dcp);
        let dimg2 = resize_bilinear_backward(&cache.resize, &dsmall);
        let mut dx = dimg;
        for (a, b) in dx.data.iter_mut().zip(dimg2.data.iter()) {
            *a = *a + *b;
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::new();
        for c in self.convs.iter_mut() {
            ps.extend(c.params_mut());
        }
        ps.push(&mut self.fc1.weight);
        if let Some(b) = &mut self.fc1.bias {
            ps.push(b);
        }
        ps.push(&mut self.fc2.weight);
        if let Some(b) = &mut self.fc2.bias {
            ps.push(b);
        }
        ps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cp_tensor(points: &[(f64, f64)]) -> Tensor<f64> {
        let mut t = Tensor::zeros(vec![1, points.len(), 2]);
        for (i, &(x, y)) in points.iter().enumerate() {
            t.data[2 * i] = x;
            t.data[2 * i + 1] = y;
        }
        t
    }

    #[test]
    fn template_has_expected_geometry() {
        let f = canonical_fiducials();
        assert_eq!(f.len(), 20);
        assert!(f[..10].iter().all(|p| p.1 == -0.95));
        assert!(f[10..].iter().all(|p| p.1 == 0.95));
        assert_eq!(f[0].0, -0.95);
        assert!((f[9].0 - 0.95).abs() < 1e-12);
        for w in f[..10].windows(2) {
            assert!(w[1].0 > w[0].0);
        }
    }

    #[test]
    fn identity_fiducials_give_identity_grid() {
        let f = canonical_fiducials();
        let basis = TpsBasis::<f64>::new(&f, 32, 128).unwrap();
        let grid = basis.grid(&cp_tensor(&f));
        let ident = identity_grid::<f64>(32, 128);
        for (a, b) in grid.data.iter().zip(ident.data.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn shifted_fiducials_shift_the_grid() {
        let f = canonical_fiducials();
        let basis = TpsBasis::<f64>::new(&f, 32, 128).unwrap();
        let shifted: Vec<_> = f.iter().map(|&(x, y)| (x + 0.1, y)).collect();
        let grid = basis.grid(&cp_tensor(&shifted));
        let ident = identity_grid::<f64>(32, 128);
        for p in 0..32 * 128 {
            assert!((grid.data[2 * p] - (ident.data[2 * p] + 0.1)).abs() < 1e-6);
            assert!((grid.data[2 * p + 1] - ident.data[2 * p + 1]).abs() < 1e-6);
        }
    }

    #[test]
    fn affine_fiducials_give_exactly_that_affine_warp() {
        let f = canonical_fiducials();
        let basis = TpsBasis::<f64>::new(&f, 16, 64).unwrap();
        // x' = 0.9x − 0.2y + 0.05, y' = 0.15x + 0.8y − 0.1
        let aff = |(x, y): (f64, f64)| (0.9 * x - 0.2 * y + 0.05, 0.15 * x + 0.8 * y - 0.1);
        let moved: Vec<_> = f.iter().map(|&p| aff(p)).collect();
        let grid = basis.grid(&cp_tensor(&moved));
        let ident = identity_grid::<f64>(16, 64);
        for p in 0..16 * 64 {
            let q = (ident.data[2 * p], ident.data[2 * p + 1]);
            let e = aff(q);
            assert!((grid.data[2 * p] - e.0).abs() < 1e-6);
            assert!((grid.data[2 * p + 1] - e.1).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_passes_through_all_anchors() {
        let f = canonical_fiducials();
        let basis = TpsBasis::<f64>::new(&f, 32, 128).unwrap();
        let mut r = rng(11);
        let cp: Vec<_> = f
            .iter()
            .map(|&(x, y)| (x + r.gen_range(-0.05..0.05), y + r.gen_range(-0.05..0.05)))
            .collect();
        let warped = basis.warp_points(&cp, &f);
        for (got, want) in warped.iter().zip(cp.iter()) {
            assert!((got.0 - want.0).abs() < 1e-5, "{got:?} vs {want:?}");
            assert!((got.1 - want.1).abs() < 1e-5);
        }
    }

    #[test]
    fn collinear_fiducials_are_singular() {
        let f: Vec<_> = (0..20).map(|i| (i as f64 / 19.0, 0.0)).collect();
        assert!(matches!(TpsBasis::<f64>::new(&f, 4, 8), Err(TpsError::SingularSystem)));
    }

    #[test]
    fn init_localize_returns_template_exactly() {
        let rect = Rectifier::<f64>::new(&mut rng(3));
        let mut r = rng(4);
        let mut small = Tensor::zeros(vec![2, 3, 32, 64]);
        for v in small.data.iter_mut() {
            *v = r.gen_range(0.0..1.0);
        }
        let (cp, _) = rect.localize(&small);
        assert_eq!(cp.shape, vec![2, 20, 2]);
        let template = canonical_fiducials();
        for ni in 0..2 {
            for (i, &(x, y)) in template.iter().enumerate() {
                assert_eq!(cp.data[(ni * 20 + i) * 2], x);
                assert_eq!(cp.data[(ni * 20 + i) * 2 + 1], y);
            }
        }
    }

    #[test]
    fn rectify_at_init_equals_bilinear_resize() {
        let rect = Rectifier::<f64>::new(&mut rng(5));
        let mut r = rng(6);
        let mut x = Tensor::zeros(vec![1, 3, 64, 256]);
        for v in x.data.iter_mut() {
            *v = r.gen_range(0.0..1.0);
        }
        let (y, _) = rect.forward(&x);
        assert_eq!(y.shape, vec![1, 3, 32, 128]);
        let (resized, _) = resize_bilinear(&x, 32, 128);
        let err = y.max_abs_diff(&resized);
        assert!(err < 1e-5, "rectified-vs-resize error {err}");
    }

    #[test]
    fn full_gradient_matches_fd_on_sampled_coordinates() {
        let mut rect = Rectifier::<f64>::new(&mut rng(7));
        // Perturb fc2 so the warp is non-trivial (template init would keep
        // the grid pinned and zero out grid gradients).
        let mut r = rng(8);
        for v in rect.fc2.weight.value.data.iter_mut() {
            *v = r.gen_range(-0.01..0.01);
        }
        let mut x = Tensor::zeros(vec![1, 3, 64, 256]);
        for v in x.data.iter_mut() {
            *v = r.gen_range(0.0..1.0);
        }
        // Smooth weighting makes the objective differentiable almost
        // everywhere despite bilinear kinks.
        let weight: Vec<f64> = (0..3 * 32 * 128).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect();
        let loss = |y: &Tensor<f64>| -> f64 {
            y.data.iter().zip(weight.iter()).map(|(v, w)| v * v * w).sum()
        };
        let (y, cache) = rect.forward(&x);
        let mut dy = Tensor::zeros(y.shape.clone());
        for i in 0..y.len() {
            dy.data[i] = 2.0 * y.data[i] * weight[i];
        }
        let dx = rect.backward(&cache, &dy);

        let mut fd_err: f64 = 0.0;
        for &i in &[137usize, 5000, 9000, 20000, 33333, 45000] {
            let h = 1e-3;
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fp = loss(&rect.forward(&xp).0);
            let fm = loss(&rect.forward(&xm).0);
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(dx.data[i].abs()).max(1e-6);
            fd_err = fd_err.max((fd - dx.data[i]).abs() / scale);
        }
        assert!(fd_err < 1e-4, "input-gradient rel. err {fd_err}");

        // Spot-check a parameter gradient (fc1 weight) the same way.
        let widx = 1234;
        let h = 1e-3;
        let analytic = rect.fc1.weight.grad.data[widx];
        rect.fc1.weight.value.data[widx] += h;
        let fp = loss(&rect.forward(&x).0);
        rect.fc1.weight.value.data[widx] -= 2.0 * h;
        let fm = loss(&rect.forward(&x).0);
        rect.fc1.weight.value.data[widx] += h;
        let fd = (fp - fm) / (2.0 * h);
        let scale = fd.abs().max(analytic.abs()).max(1e-6);
        assert!((fd - analytic).abs() / scale < 1e-4, "fc1 weight grad mismatch: {fd} vs {analytic}");
    }
}
