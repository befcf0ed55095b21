//! Exact solutions for infinitely wide deep linear Bayesian networks: the
//! damped matrix fixed point, the whitened-data scalar overlaps with their
//! conservation law, and the asymptotic overlap regimes.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{AkernError, Result};
use crate::hyper::{Beta, Hyperparams};
use crate::linalg;

/// Kernel-label overlaps c_l = y^T Phi^l y and their duals, together with
/// the conserved product chi = c_l chat_l.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapProfile {
    pub c: Vec<f64>,
    pub c_hat: Vec<f64>,
    pub chi: f64,
}

/// chi(c) = -gamma0^2 c / (1/beta + c)^2, the conserved overlap product.
fn chi_of(c: f64, gamma0: f64, beta: Beta) -> f64 {
    let binv = beta.inverse();
    -gamma0 * gamma0 * c / ((binv + c) * (binv + c))
}

/// Solve the whitened-data overlap equation c_L = (1 - chi(c_L))^L by
/// bracketed bisection with a Newton polish, then fill the per-layer
/// profile c_l = (1 - chi)^l, chat_l = chi / c_l.
pub fn solve_whitened_overlaps(
    gamma0: f64,
    beta: Beta,
    depth: usize,
    tol: f64,
) -> Result<OverlapProfile> {
    if depth < 1 {
        return Err(AkernError::InvalidArgument("depth must be >= 1".into()));
    }
    if gamma0 < 0.0 {
        return Err(AkernError::InvalidArgument("gamma0 must be >= 0".into()));
    }
    if gamma0 == 0.0 {
        return Ok(OverlapProfile {
            c: vec![1.0; depth],
            c_hat: vec![0.0; depth],
            chi: 0.0,
        });
    }
    let l = depth as f64;
    let f = |c: f64| c - (1.0 - chi_of(c, gamma0, beta)).powf(l);

    // Lazy and rich asymptotes bound the root; widen geometrically if needed.
    let mut lo = 1.0;
    let mut hi = (2.0_f64).max((1.0 + l * gamma0 * gamma0) * 10.0);
    if f(lo) > 0.0 {
        // c = 1 already exceeds the recursion value; root is at or below 1.
        lo = 1e-12;
    }
    while f(hi) < 0.0 {
        hi *= 10.0;
        if hi > 1e12 {
            return Err(AkernError::BracketFailure { limit: 1e12 });
        }
    }
    let mut a = lo;
    let mut b = hi;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if f(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if (b - a) <= tol * b.max(1.0) {
            break;
        }
    }
    let mut c_last = 0.5 * (a + b);
    // Newton polish on the bisection result.
    for _ in 0..40 {
        let fc = f(c_last);
        let h = 1e-7 * c_last.max(1.0);
        let d = (f(c_last + h) - f(c_last - h)) / (2.0 * h);
        if d.abs() < 1e-300 {
            break;
        }
        let next = c_last - fc / d;
        if !next.is_finite() || next < a || next > b {
            break;
        }
        if (next - c_last).abs() <= 1e-15 * c_last.max(1.0) {
            c_last = next;
            break;
        }
        c_last = next;
    }

    let chi = chi_of(c_last, gamma0, beta);
    let base = 1.0 - chi;
    let mut c = Vec::with_capacity(depth);
    let mut c_hat = Vec::with_capacity(depth);
    for layer in 1..=depth {
        let cl = base.powi(layer as i32);
        c.push(cl);
        c_hat.push(chi / cl);
    }
    Ok(OverlapProfile { c, c_hat, chi })
}

/// Asymptotic regime of the last-layer overlap c_L.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRegime {
    /// gamma0^2 L -> 0: c_L ~ 1 + L gamma0^2.
    Lazy,
    /// gamma0 -> infinity at fixed L: c_L ~ gamma0^(2L/(L+1)).
    LargeGamma,
    /// L -> infinity at fixed gamma0: c_L ~ L gamma0^2 / ln(L gamma0^2).
    LargeDepth,
}

pub fn asymptotic_overlap(gamma0: f64, depth: usize, regime: OverlapRegime) -> Result<f64> {
    let l = depth as f64;
    let g2 = gamma0 * gamma0;
    match regime {
        OverlapRegime::Lazy => Ok(1.0 + l * g2),
        OverlapRegime::LargeGamma => Ok(gamma0.powf(2.0 * l / (l + 1.0))),
        OverlapRegime::LargeDepth => {
            let x = l * g2;
            if x <= 1.0 {
                return Err(AkernError::InvalidArgument(format!(
                    "large-depth asymptote needs L gamma0^2 > 1, got {x}"
                )));
            }
            Ok(x / x.ln())
        }
    }
}

/// Solved kernel stack of the deep linear fixed point.
#[derive(Debug, Clone)]
pub struct DeepLinearSolution {
    /// Phi^0..Phi^L.
    pub phi: Vec<Array2<f64>>,
    /// PhiHat^1..PhiHat^L.
    pub phi_hat: Vec<Array2<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

/// Damped fixed-point iteration of the three deep-linear saddle equations:
/// a forward Phi pass, a backward PhiHat pass, and the last-layer source
/// term built from the data fit.
pub fn solve_deep_linear(
    phi0: &Array2<f64>,
    y: &Array1<f64>,
    hp: &Hyperparams,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DeepLinearSolution> {
    let p = phi0.nrows();
    if y.len() != p {
        return Err(AkernError::DimensionMismatch(format!(
            "{} targets for {}x{} gram",
            y.len(),
            p,
            p
        )));
    }
    if !(0.0..=1.0).contains(&damping) || damping == 0.0 {
        return Err(AkernError::InvalidArgument(
            "damping must be in (0, 1]".into(),
        ));
    }
    let depth = hp.depth;
    let eye = Array2::<f64>::eye(p);
    let binv = hp.beta.inverse();

    let mut phi: Vec<Array2<f64>> = vec![phi0.clone(); depth + 1];
    let mut phi_hat: Vec<Array2<f64>> = vec![Array2::zeros((p, p)); depth];

    // Ramp the richness up from zero over the first iterations; a cold
    // start at large gamma0 shoots the dual recursion through the pole of
    // (I + C PhiHat)^{-1} and off the physical branch.
    let ramp_steps = 200usize.min(max_iter / 2).max(1);

    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..max_iter {
        iterations = iter + 1;
        let ramp = ((iter + 1) as f64 / ramp_steps as f64).min(1.0);
        let gamma_eff = hp.gamma0 * ramp;
        let mut max_change = 0.0_f64;

        // Last-layer dual from the data term.
        {
            let lam_l = hp.lambda_last();
            let a = &eye * binv + &phi[depth] / lam_l;
            let ainv_y = linalg::solve_spd_vec(&a, y, 1e-10)?;
            let mut target = Array2::<f64>::zeros((p, p));
            for i in 0..p {
                for j in 0..p {
                    target[[i, j]] = -(gamma_eff * gamma_eff / lam_l) * ainv_y[i] * ainv_y[j];
                }
            }
            max_change = max_change.max(damped_update(&mut phi_hat[depth - 1], &target, damping));
        }

        // Backward dual pass: PhiHat^l = (PhiHat^{l+1}/lambda_l) (I + (Phi^l/lambda_l) PhiHat^{l+1})^{-1}.
        for layer in (1..depth).rev() {
            let lam = hp.lambda(layer);
            let m = &eye + &(phi[layer].mapv(|v| v / lam).dot(&phi_hat[layer]));
            let rhs = phi_hat[layer].mapv(|v| v / lam);
            // X = rhs m^{-1}  <=>  m^T X^T = rhs^T
            let xt = linalg::solve_lu(&m.t().to_owned(), &rhs.t().to_owned())?;
            let target = linalg::symmetrized(&xt.t().to_owned());
            max_change = max_change.max(damped_update(&mut phi_hat[layer - 1], &target, damping));
        }

        // Forward kernel pass: Phi^l = (C^{-1} + PhiHat^l)^{-1} = (I + C PhiHat^l)^{-1} C
        // with C = Phi^{l-1}/lambda_{l-1}, the tilted Gaussian covariance.
        for layer in 1..=depth {
            let lam = hp.lambda(layer - 1);
            let c = phi[layer - 1].mapv(|v| v / lam);
            let m = &eye + &c.dot(&phi_hat[layer - 1]);
            let x = linalg::solve_lu(&m, &c)?;
            let target = linalg::symmetrized(&x);
            max_change = max_change.max(damped_update(&mut phi[layer], &target, damping));
        }

        residual = max_change;
        if max_change < tol && iter + 1 >= ramp_steps {
            converged = true;
            break;
        }
    }

    Ok(DeepLinearSolution {
        phi,
        phi_hat,
        converged,
        iterations,
        residual,
    })
}

/// X <- (1-d) X + d T; returns the max entrywise change relative to the
/// matrix scale.
fn damped_update(x: &mut Array2<f64>, target: &Array2<f64>, damping: f64) -> f64 {
    let scale = linalg::max_abs(x).max(linalg::max_abs(target)).max(1e-12);
    let mut change = 0.0_f64;
    for (xe, te) in x.iter_mut().zip(target.iter()) {
        let next = (1.0 - damping) * *xe + damping * te;
        change = change.max((next - *xe).abs());
        *xe = next;
    }
    linalg::symmetrize(x);
    change / scale
}
