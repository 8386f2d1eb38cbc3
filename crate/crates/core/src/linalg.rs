//! Small dense linear solves (Gaussian elimination with partial pivoting).
//! Big enough for the TPS system (23×23) and homography fits (8×8).

/// Solve A·X = B in place for X, where `a` is n×n and `b` is n×m, both
/// row-major. Returns None if the pivot collapses (singular system).
pub fn solve(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Option<()> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n * m);
    for col in 0..n {
        // pivot
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-12 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            for k in 0..m {
                b.swap(col * m + k, piv * m + k);
            }
        }
        let inv = 1.0 / a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            for k in 0..m {
                b[r * m + k] -= f * b[col * m + k];
            }
        }
    }
    // back substitution
    for col in (0..n).rev() {
        let inv = 1.0 / a[col * n + col];
        for k in 0..m {
            let mut s = b[col * m + k];
            for j in col + 1..n {
                s -= a[col * n + j] * b[j * m + k];
            }
            b[col * m + k] = s * inv;
        }
    }
    Some(())
}
