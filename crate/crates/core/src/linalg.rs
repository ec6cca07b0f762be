//! Dense linear algebra primitives on row-major `&[f64]` buffers.
//!
//! Deliberately small and hand-written: every routine here must be
//! bit-deterministic across runs and platforms (no SIMD dispatch, no
//! threaded BLAS), because saved models and reports are compared
//! byte-for-byte in tests and by downstream users.

use crate::error::{CoreError, Result};

/// C = A (m x k) * B (k x n), row-major. ikj loop order for locality.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C = A^T (k x m -> m x k transposed view) * B. A is (k x m) row-major.
pub fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
    c
}

/// C = A * B^T. B is (n x k) row-major.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] = acc;
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// matrix, `A = L L^T`. Fails with `Numerical` when a pivot is not
/// strictly positive; callers that can tolerate near-singularity add
/// jitter and retry (see [`cholesky_jittered`]).
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for p in 0..j {
                sum -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(CoreError::Numerical(format!(
                        "cholesky pivot {i} is {sum:.3e}, matrix not positive definite"
                    )));
                }
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Cholesky with an escalating diagonal jitter schedule. Starts at
/// `initial_jitter` and multiplies by 10 until `max_jitter`; returns the
/// factor and the jitter that succeeded (0.0 when none was needed).
pub fn cholesky_jittered(
    a: &[f64],
    n: usize,
    initial_jitter: f64,
    max_jitter: f64,
) -> Result<(Vec<f64>, f64)> {
    if let Ok(l) = cholesky(a, n) {
        return Ok((l, 0.0));
    }
    let mut jitter = initial_jitter;
    while jitter <= max_jitter * (1.0 + 1e-12) {
        let mut aj = a.to_vec();
        for i in 0..n {
            aj[i * n + i] += jitter;
        }
        if let Ok(l) = cholesky(&aj, n) {
            return Ok((l, jitter));
        }
        jitter *= 10.0;
    }
    Err(CoreError::Numerical(format!(
        "cholesky failed even with jitter {max_jitter:.1e} on {n}x{n} matrix"
    )))
}

/// Solve L x = b with L lower triangular (forward substitution).
pub fn solve_lower(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in 0..n {
        for j in 0..i {
            x[i] -= l[i * n + j] * x[j];
        }
        x[i] /= l[i * n + i];
    }
    x
}

/// Solve L^T x = b with L lower triangular (backward substitution).
pub fn solve_lower_transpose(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            x[i] -= l[j * n + i] * x[j];
        }
        x[i] /= l[i * n + i];
    }
    x
}

/// Solve (L L^T) x = b given the Cholesky factor L.
pub fn solve_cholesky(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let y = solve_lower(l, b, n);
    solve_lower_transpose(l, &y, n)
}

/// Solve L X = B column-by-column; B is (n x m) row-major.
pub fn solve_lower_multi(l: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(b.len(), n * m);
    let mut x = b.to_vec();
    for i in 0..n {
        let (head, tail) = x.split_at_mut(i * m);
        let xi = &mut tail[..m];
        for j in 0..i {
            let lij = l[i * n + j];
            if lij == 0.0 {
                continue;
            }
            let xj = &head[j * m..(j + 1) * m];
            for c in 0..m {
                xi[c] -= lij * xj[c];
            }
        }
        let d = l[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    x
}

/// Solve L^T X = B column-by-column; B is (n x m) row-major.
pub fn solve_lower_transpose_multi(l: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(b.len(), n * m);
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let (head, tail) = x.split_at_mut((i + 1) * m);
        let xi = &mut head[i * m..];
        for j in i + 1..n {
            // L^T[i][j] = L[j][i]
            let lji = l[j * n + i];
            if lji == 0.0 {
                continue;
            }
            let xj = &tail[(j - i - 1) * m..(j - i) * m];
            for c in 0..m {
                xi[c] -= lji * xj[c];
            }
        }
        let d = l[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    x
}

/// Invert an SPD matrix through its Cholesky factor. Only used by test
/// oracles and small fixed-size computations; production paths solve
/// instead of inverting.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, n)?;
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for col in 0..n {
        e[col] = 1.0;
        let x = solve_cholesky(&l, &e, n);
        for row in 0..n {
            inv[row * n + col] = x[row];
        }
        e[col] = 0.0;
    }
    Ok(inv)
}

/// log(det(A)) for SPD A via its Cholesky factor: 2 * sum(log(diag(L))).
pub fn log_det_from_cholesky(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
