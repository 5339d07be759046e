//! One-sided Jacobi SVD and the spectral prototype penalty built on it.

use thiserror::Error;

/// Rotation threshold relative to `sqrt(|a_p|^2 |a_q|^2)`.
pub const JACOBI_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("svd: matrix must be non-empty, got {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
    #[error("svd: expected {expected} entries for the given shape, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("svd: non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("svd: Jacobi iteration did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

/// Thin SVD `M = U diag(sigma) V^T` of a `rows x cols` matrix.
///
/// `u` is `rows x rows` (orthogonal), `sigma` has `min(rows, cols)`
/// non-increasing entries, `v` is `cols x min(rows, cols)` with orthonormal
/// columns. All matrices are row-major.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub rows: usize,
    pub cols: usize,
    pub u: Vec<f64>,
    pub sigma: Vec<f64>,
    pub v: Vec<f64>,
    pub sweeps: usize,
}

impl SvdFactors {
    pub fn rank_dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn u_at(&self, i: usize, k: usize) -> f64 {
        self.u[i * self.rows + k]
    }

    pub fn v_at(&self, j: usize, k: usize) -> f64 {
        self.v[j * self.sigma.len() + k]
    }

    /// `U[:, :r] diag(weights) V^T` for per-singular-value weights.
    pub fn weighted_product(&self, weights: &[f64]) -> Vec<f64> {
        let r = self.sigma.len();
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                let mut s = 0.0;
                for (k, w) in weights.iter().enumerate().take(r) {
                    s += self.u_at(i, k) * w * self.v_at(j, k);
                }
                out[i * self.cols + j] = s;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        self.weighted_product(&self.sigma)
    }
}

/// Orthonormal columns via Hestenes rotations on the columns of `a`
/// (`n x k`, row-major). Returns the accumulated `k x k` rotation and the
/// sweep count.
fn hestenes(a: &mut [f64], n: usize, k: usize) -> Result<(Vec<f64>, usize), LinalgError> {
    let mut j = vec![0.0; k * k];
    for i in 0..k {
        j[i * k + i] = 1.0;
    }
    for sweep in 1..=MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..n {
                    let (x, y) = (a[r * k + p], a[r * k + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..n {
                    let (x, y) = (a[r * k + p], a[r * k + q]);
                    a[r * k + p] = c * x - s * y;
                    a[r * k + q] = s * x + c * y;
                }
                for r in 0..k {
                    let (x, y) = (j[r * k + p], j[r * k + q]);
                    j[r * k + p] = c * x - s * y;
                    j[r * k + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            return Ok((j, sweep));
        }
    }
    Err(LinalgError::NoConvergence { sweeps: MAX_SWEEPS })
}

/// Fills the columns of `m` (`n x k`, row-major) flagged invalid with unit
/// vectors orthogonal to every other column.
fn complete_basis(m: &mut [f64], n: usize, k: usize, valid: &mut [bool]) {
    for col in 0..k {
        if valid[col] {
            continue;
        }
        for e in 0..n {
            let mut cand = vec![0.0; n];
            cand[e] = 1.0;
            for _ in 0..2 {
                for other in (0..k).filter(|&o| valid[o]) {
                    let dot: f64 = (0..n).map(|r| cand[r] * m[r * k + other]).sum();
                    for r in 0..n {
                        cand[r] -= dot * m[r * k + other];
                    }
                }
            }
            let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.5 {
                for r in 0..n {
                    m[r * k + col] = cand[r] / norm;
                }
                valid[col] = true;
                break;
            }
        }
    }
}

/// Thin SVD by one-sided Jacobi iteration.
pub fn svd(m: &[f64], rows: usize, cols: usize) -> Result<SvdFactors, LinalgError> {
    if rows == 0 || cols == 0 {
        return Err(LinalgError::Empty { rows, cols });
    }
    if m.len() != rows * cols {
        return Err(LinalgError::BadLength {
            expected: rows * cols,
            got: m.len(),
        });
    }
    if let Some(i) = m.iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite(i));
    }
    // Orthogonalize the shorter side: columns of M^T when rows <= cols,
    // columns of M otherwise.
    let transpose = rows <= cols;
    let (n, k) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut a = vec![0.0; n * k];
    for i in 0..rows {
        for j in 0..cols {
            if transpose {
                a[j * k + i] = m[i * cols + j];
            } else {
                a[i * k + j] = m[i * cols + j];
            }
        }
    }
    let (rot, sweeps) = hestenes(&mut a, n, k)?;
    let norms: Vec<f64> = (0..k)
        .map(|c| (0..n).map(|r| a[r * k + c] * a[r * k + c]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let top = norms[order[0]];
    let floor = top * 1e-14;

    // Normalized columns in sorted order; degenerate ones get completed.
    let mut basis = vec![0.0; n * k];
    let mut valid = vec![false; k];
    let mut sigma = vec![0.0; k];
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        if s > floor && s > 0.0 {
            sigma[dst] = s;
            for r in 0..n {
                basis[r * k + dst] = a[r * k + src] / s;
            }
            valid[dst] = true;
        }
    }
    complete_basis(&mut basis, n, k, &mut valid);
    let mut rot_sorted = vec![0.0; k * k];
    for r in 0..k {
        for (dst, &src) in order.iter().enumerate() {
            rot_sorted[r * k + dst] = rot[r * k + src];
        }
    }

    let (u, v) = if transpose {
        // M^T J = V S  =>  M = J S V^T; U = J is rows x rows.
        (rot_sorted, basis)
    } else {
        // M J = U_thin S  =>  V = J, U_thin extended to a full basis.
        let mut u = vec![0.0; rows * rows];
        let mut uvalid = vec![false; rows];
        for r in 0..rows {
            for c in 0..k {
                u[r * rows + c] = basis[r * k + c];
            }
        }
        uvalid[..k].fill(true);
        complete_basis(&mut u, rows, rows, &mut uvalid);
        (u, rot_sorted)
    };
    Ok(SvdFactors {
        rows,
        cols,
        u,
        sigma,
        v,
        sweeps,
    })
}

/// `||M - U S V^T||_F / max(||M||_F, 1e-12)`.
pub fn svd_reconstruction_error(m: &[f64], factors: &SvdFactors) -> f64 {
    let rec = factors.reconstruct();
    let diff: f64 = m.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = m.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Largest entry of `|Q^T Q - I|` for the columns of a row-major `n x k` matrix.
pub fn orthogonality_residual(q: &[f64], n: usize, k: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..k {
        for b in 0..k {
            let dot: f64 = (0..n).map(|r| q[r * k + a] * q[r * k + b]).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// `sum_k |sigma_k - 1|` over the thin spectrum, with gradient
/// `U diag(sign(sigma_k - 1)) V^T` (sign(0) = 0).
pub fn pr_loss_and_grad(m: &[f64], rows: usize, cols: usize) -> Result<(f64, Vec<f64>), LinalgError> {
    let f = svd(m, rows, cols)?;
    let loss = f.sigma.iter().map(|s| (s - 1.0).abs()).sum();
    let signs: Vec<f64> = f
        .sigma
        .iter()
        .map(|&s| {
            let d = s - 1.0;
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, f.weighted_product(&signs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn spot_spectra() {
        let f = svd(&[2.0, 0.0, 0.0, 0.5], 2, 2).unwrap();
        assert!(close(&f.sigma, &[2.0, 0.5], 1e-12));
        let f = svd(&[0.0, 1.0, 1.0, 0.0], 2, 2).unwrap();
        assert!(close(&f.sigma, &[1.0, 1.0], 1e-12));
        let f = svd(&[3.0, 4.0, 0.0, 0.0], 2, 2).unwrap();
        assert!(close(&f.sigma, &[5.0, 0.0], 1e-12));
        assert!(orthogonality_residual(&f.u, 2, 2) < 1e-12);
        assert!(orthogonality_residual(&f.v, 2, 2) < 1e-12);
    }

    #[test]
    fn reconstruction_error_of_zeroed_spectrum_is_one() {
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut f = svd(&m, 2, 3).unwrap();
        assert!(svd_reconstruction_error(&m, &f) < 1e-12);
        f.sigma.iter_mut().for_each(|s| *s = 0.0);
        assert!((svd_reconstruction_error(&m, &f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tall_matrix_gets_full_left_basis() {
        let m = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0, -1.0, 1.0];
        let f = svd(&m, 4, 2).unwrap();
        assert_eq!(f.sigma.len(), 2);
        assert_eq!(f.u.len(), 16);
        assert!(orthogonality_residual(&f.u, 4, 4) < 1e-12);
        assert!(orthogonality_residual(&f.v, 2, 2) < 1e-12);
        assert!(svd_reconstruction_error(&m, &f) < 1e-12);
    }

    #[test]
    fn zero_matrix_still_has_orthonormal_factors() {
        let f = svd(&[0.0; 24], 3, 8).unwrap();
        assert_eq!(f.sigma, vec![0.0; 3]);
        assert!(orthogonality_residual(&f.v, 8, 3) < 1e-12);
        let (loss, grad) = pr_loss_and_grad(&[0.0; 24], 3, 8).unwrap();
        assert_eq!(loss, 3.0);
        assert!(grad.iter().any(|g| g.abs() > 0.5));
    }

    #[test]
    fn pr_loss_spot_values() {
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(pr_loss_and_grad(&eye, 3, 3).unwrap().0 < 1e-12);
        let (l, _) = pr_loss_and_grad(&[2.0, 0.0, 0.0, 0.5], 2, 2).unwrap();
        assert!((l - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(svd(&[f64::NAN], 1, 1), Err(LinalgError::NonFinite(0))));
        assert!(matches!(svd(&[], 0, 3), Err(LinalgError::Empty { .. })));
        assert!(matches!(svd(&[1.0; 3], 2, 2), Err(LinalgError::BadLength { .. })));
    }
}
