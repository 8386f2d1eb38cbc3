//! Dense row-major tensors over `f32`/`f64`.
//!
//! Training runs in `f32`; every oracle and finite-difference check runs the
//! same code instantiated at `f64`. The `Scalar` trait carries the element
//! type plus a gemm kernel dispatch so both share one implementation.

use num_traits::Float;

/// Element type for all numeric arrays in the crate.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C = alpha * A (m×k) * B (k×n) + beta * C, row-major contiguous slices.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Strided gemm: element A[i,l] lives at a[a_off + i*rsa + l*csa], and
    /// likewise for B and C. Used to multiply head-sliced views in place.
    #[allow(clippy::too_many_arguments)]
    fn gemm_view(
        m: usize, k: usize, n: usize, alpha: Self,
        a: &[Self], a_off: usize, rsa: isize, csa: isize,
        b: &[Self], b_off: usize, rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self], c_off: usize, rsc: isize, csc: isize,
    );
}

#[inline]
fn view_bounds_ok(len: usize, off: usize, rows: usize, cols: usize, rs: isize, cs: isize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    let last = off as isize + (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    let lo = off as isize + (rows as isize - 1) * rs.min(0) + (cols as isize - 1) * cs.min(0);
    lo >= 0 && last >= 0 && (last as usize) < len && (lo as usize) < len
}

macro_rules! impl_gemm_view {
    ($t:ty, $f:path) => {
        #[allow(clippy::too_many_arguments)]
        fn gemm_view(
            m: usize, k: usize, n: usize, alpha: Self,
            a: &[Self], a_off: usize, rsa: isize, csa: isize,
            b: &[Self], b_off: usize, rsb: isize, csb: isize,
            beta: Self,
            c: &mut [Self], c_off: usize, rsc: isize, csc: isize,
        ) {
            if m == 0 || k == 0 || n == 0 {
                return;
            }
            debug_assert!(view_bounds_ok(a.len(), a_off, m, k, rsa, csa));
            debug_assert!(view_bounds_ok(b.len(), b_off, k, n, rsb, csb));
            debug_assert!(view_bounds_ok(c.len(), c_off, m, n, rsc, csc));
            unsafe {
                $f(
                    m, k, n, alpha,
                    a.as_ptr().add(a_off), rsa, csa,
                    b.as_ptr().add(b_off), rsb, csb,
                    beta,
                    c.as_mut_ptr().add(c_off), rsc, csc,
                )
            }
        }
    };
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(c.len(), m * n);
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    impl_gemm_view!(f32, matrixmultiply::sgemm);
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(c.len(), m * n);
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    impl_gemm_view!(f64, matrixmultiply::dgemm);
}

/// Contiguous row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::from_f64(v); n] }
    }

    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn from_f64_slice(shape: impl Into<Vec<usize>>, data: &[f64]) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: data.iter().map(|&x| T::from_f64(x)).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn fill(&mut self, v: T) {
        for x in self.data.iter_mut() {
            *x = v;
        }
    }

    pub fn zero(&mut self) {
        self.fill(T::zero());
    }

    /// Elementwise in-place add; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for x in self.data.iter_mut() {
            *x = *x * s;
        }
    }

    /// Shape as (N, C, H, W); panics unless rank 4.
    #[inline(always)]
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// Shape as (A, B, C); panics unless rank 3.
    #[inline(always)]
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// Shape as (A, B); panics unless rank 2.
    #[inline(always)]
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Flat offset for a [N,C,H,W] tensor.
    #[inline(always)]
    pub fn idx4(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    /// Flat offset for a [A,B,C] tensor.
    #[inline(always)]
    pub fn idx3(&self, a: usize, b: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (a * self.shape[1] + b) * self.shape[2] + c
    }

    #[inline(always)]
    pub fn idx2(&self, a: usize, b: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        a * self.shape[1] + b
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Max |a - b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// C (m×n) = A (m×k) · B (k×n), overwriting C.
pub fn matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, T::one(), a, b, T::zero(), c);
}

/// C (m×n) += A (m×k) · B (k×n).
pub fn matmul_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, T::one(), a, b, T::one(), c);
}

/// B (n×m) = transpose of A (m×n).
pub fn transpose<T: Scalar>(m: usize, n: usize, a: &[T], b: &mut [T]) {
    assert_eq!(a.len(), m * n);
    assert_eq!(b.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            b[j * m + i] = a[i * n + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_matches_naive() {
        let a: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b: Vec<f64> = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = vec![0.0; 4];
        matmul(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_acc_accumulates() {
        let a = vec![1.0f32, 0.0, 0.0, 1.0];
        let b = vec![2.0f32, 3.0, 4.0, 5.0];
        let mut c = vec![1.0f32; 4];
        matmul_acc(2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..12).map(|x| x as f64).collect();
        let mut b = vec![0.0; 12];
        let mut c = vec![0.0; 12];
        transpose(3, 4, &a, &mut b);
        transpose(4, 3, &b, &mut c);
        assert_eq!(a, c);
    }
}
