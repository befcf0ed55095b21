//! Dense symmetric linear algebra: jittered Cholesky, LU solves, Jacobi
//! eigendecomposition, and PSD projection.
//!
//! Everything here is sequential with a fixed operation order, so results are
//! bit-reproducible regardless of thread count.

use ndarray::{Array1, Array2};

use crate::error::{AkernError, Result};

/// Jitter escalation ladder applied as multiples of trace/P on top of the
/// caller's base jitter.
const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Symmetrize in place: K <- (K + K^T)/2.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

/// Returns (K + K^T)/2 without mutating the input.
pub fn symmetrized(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    symmetrize(&mut out);
    out
}

pub fn frobenius_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Frobenius inner product Tr(A B) for symmetric A, B.
pub fn frobenius_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor together with the jitter that was added
/// to the diagonal to make the factorization succeed.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub lower: Array2<f64>,
    pub jitter: f64,
}

/// Attempt a PSD-tolerant Cholesky of `a` (assumed symmetric). Pivots within
/// `tol` of zero produce a zero column provided the remaining column entries
/// are compatible with exact rank deficiency; negative pivots fail.
fn try_cholesky(a: &Array2<f64>, tol: f64) -> std::result::Result<Array2<f64>, (usize, f64)> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    let col_tol = tol.max(1e-300).sqrt();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d > tol {
            let d = d.sqrt();
            l[[j, j]] = d;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / d;
            }
        } else if d >= -tol {
            // Numerically zero pivot: admissible only for an exactly
            // rank-deficient PSD matrix, i.e. the rest of the column must
            // vanish as well.
            l[[j, j]] = 0.0;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                if s.abs() > col_tol {
                    return Err((j, d));
                }
                l[[i, j]] = 0.0;
            }
        } else {
            return Err((j, d));
        }
    }
    Ok(l)
}

/// Cholesky with escalating diagonal jitter. `base_jitter` is the caller's
/// floor (usually 1e-10); the ladder scales with trace/P so the tolerance is
/// meaningful for kernels of any magnitude.
pub fn cholesky_psd(a: &Array2<f64>, base_jitter: f64) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(AkernError::DimensionMismatch(format!(
            "cholesky of {}x{} matrix",
            n,
            a.ncols()
        )));
    }
    let scale = (a.diag().sum() / n as f64).abs().max(1.0);
    let tol = 1e-12 * scale;
    let mut last = (0usize, 0.0f64);
    for (step, mult) in JITTER_LADDER.iter().enumerate() {
        let jitter = if step == 0 {
            0.0
        } else {
            (base_jitter.max(*mult)) * scale
        };
        let mut work = a.clone();
        if jitter > 0.0 {
            for i in 0..n {
                work[[i, i]] += jitter;
            }
        }
        match try_cholesky(&work, tol) {
            Ok(lower) => return Ok(CholeskyFactor { lower, jitter }),
            Err(info) => last = info,
        }
    }
    Err(AkernError::NotPsd {
        row: last.0,
        pivot: last.1,
    })
}

impl CholeskyFactor {
    /// Solve (L L^T) x = b for a single right-hand side.
    pub fn solve_vec(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.lower.nrows();
        let mut x = b.clone();
        // Forward substitution L y = b.
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.lower[[i, k]] * x[k];
            }
            let d = self.lower[[i, i]];
            x[i] = if d != 0.0 { s / d } else { 0.0 };
        }
        // Back substitution L^T x = y.
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lower[[k, i]] * x[k];
            }
            let d = self.lower[[i, i]];
            x[i] = if d != 0.0 { s / d } else { 0.0 };
        }
        x
    }

    /// Solve (L L^T) X = B column by column.
    pub fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            let x = self.solve_vec(&col.to_owned());
            out.column_mut(j).assign(&x);
        }
        out
    }
}

/// Solve the SPD system (a + extra_ridge I) x = b with the jitter policy.
/// A zero pivot (exactly singular system even after jitter) is reported as
/// a singular kernel system.
pub fn solve_spd_vec(a: &Array2<f64>, b: &Array1<f64>, base_jitter: f64) -> Result<Array1<f64>> {
    let chol = cholesky_psd(a, base_jitter)?;
    for i in 0..chol.lower.nrows() {
        if chol.lower[[i, i]] == 0.0 {
            return Err(AkernError::SingularSystem);
        }
    }
    Ok(chol.solve_vec(b))
}

/// Symmetric inverse through the jittered Cholesky factor.
pub fn inv_spd(a: &Array2<f64>, base_jitter: f64) -> Result<Array2<f64>> {
    let n = a.nrows();
    let chol = cholesky_psd(a, base_jitter)?;
    for i in 0..n {
        if chol.lower[[i, i]] == 0.0 {
            return Err(AkernError::SingularSystem);
        }
    }
    let mut inv = chol.solve_mat(&Array2::eye(n));
    symmetrize(&mut inv);
    Ok(inv)
}

/// General LU solve with partial pivoting: A X = B for square, possibly
/// nonsymmetric A (used for products like (I + C K)^{-1}).
pub fn solve_lu(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if n != a.ncols() || b.nrows() != n {
        return Err(AkernError::DimensionMismatch(format!(
            "lu solve {}x{} with rhs {}x{}",
            n,
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut p = k;
        let mut best = lu[[k, k]].abs();
        for i in (k + 1)..n {
            let v = lu[[i, k]].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < 1e-300 {
            return Err(AkernError::SingularLu(best));
        }
        if p != k {
            perm.swap(p, k);
            for j in 0..n {
                let tmp = lu[[k, j]];
                lu[[k, j]] = lu[[p, j]];
                lu[[p, j]] = tmp;
            }
            for j in 0..x.ncols() {
                let tmp = x[[k, j]];
                x[[k, j]] = x[[p, j]];
                x[[p, j]] = tmp;
            }
        }
        for i in (k + 1)..n {
            let f = lu[[i, k]] / lu[[k, k]];
            lu[[i, k]] = f;
            for j in (k + 1)..n {
                lu[[i, j]] -= f * lu[[k, j]];
            }
            for j in 0..x.ncols() {
                x[[i, j]] -= f * x[[k, j]];
            }
        }
    }
    for j in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[[i, j]];
            for k in (i + 1)..n {
                s -= lu[[i, k]] * x[[k, j]];
            }
            x[[i, j]] = s / lu[[i, i]];
        }
    }
    Ok(x)
}

/// Symmetric eigendecomposition (cyclic Jacobi). Returns eigenvalues in
/// ascending order and the matching eigenvectors as columns.
pub fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = symmetrized(a);
    let mut v = Array2::<f64>::eye(n);
    let scale = frobenius_norm(&m).max(1e-300);
    let tol = 1e-14 * scale;
    for _sweep in 0..64 {
        let mut off = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(m[[i, j]].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let mut vals = Array1::<f64>::zeros(n);
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = m[[src, src]];
        vecs.column_mut(dst).assign(&v.column(src));
    }
    (vals, vecs)
}

/// Project a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues at zero.
pub fn psd_project(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let (vals, vecs) = sym_eigen(a);
    if vals.iter().all(|&v| v >= 0.0) {
        return symmetrized(a);
    }
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let lam = vals[k].max(0.0);
        if lam == 0.0 {
            continue;
        }
        let u = vecs.column(k);
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += lam * u[i] * u[j];
            }
        }
    }
    symmetrize(&mut out);
    out
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    vals[0]
}
