//! Lazy-limit baselines: the layerwise NNGP kernel recursion, the static
//! NTK, and Gaussian-process prediction with mean and variance.
//!
//! ReLU layers use the arc-cosine closed forms; tanh layers fall back to
//! Monte Carlo with a fixed seed.

use ndarray::{Array1, Array2};

use crate::error::{AkernError, Result};
use crate::hyper::{Activation, Beta};
use crate::kernel::{KernelMatrix, PredictorResult};
use crate::linalg;
use crate::sampling::{self, SamplerConfig};

/// First-kind arc-cosine map: <relu(u) relu(v)> for (u,v) jointly Gaussian
/// with covariance read off `k`.
pub fn relu_arccos1(k: &Array2<f64>) -> Array2<f64> {
    let p = k.nrows();
    let mut out = Array2::<f64>::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            let kii = k[[i, i]].max(0.0);
            let kjj = k[[j, j]].max(0.0);
            let norm = (kii * kjj).sqrt();
            if norm == 0.0 {
                continue;
            }
            let c = (k[[i, j]] / norm).clamp(-1.0, 1.0);
            let theta = c.acos();
            out[[i, j]] = norm / (2.0 * std::f64::consts::PI)
                * (theta.sin() + (std::f64::consts::PI - theta) * c);
        }
    }
    linalg::symmetrize(&mut out);
    out
}

/// Zeroth-kind arc-cosine map: <relu'(u) relu'(v)> = (pi - theta)/(2 pi).
pub fn relu_arccos0(k: &Array2<f64>) -> Array2<f64> {
    let p = k.nrows();
    let mut out = Array2::<f64>::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            let norm = (k[[i, i]].max(0.0) * k[[j, j]].max(0.0)).sqrt();
            if norm == 0.0 {
                continue;
            }
            let c = (k[[i, j]] / norm).clamp(-1.0, 1.0);
            let theta = c.acos();
            out[[i, j]] = (std::f64::consts::PI - theta) / (2.0 * std::f64::consts::PI);
        }
    }
    linalg::symmetrize(&mut out);
    out
}

fn mc_moment(k: &Array2<f64>, f: impl Fn(f64) -> f64, cfg: &SamplerConfig) -> Result<Array2<f64>> {
    let h = sampling::sample_gaussian(k, cfg.batch_size, cfg.seed, cfg.jitter)?;
    let fh = h.mapv(f);
    let mut m = fh.dot(&fh.t());
    m.mapv_inplace(|v| v / cfg.batch_size as f64);
    linalg::symmetrize(&mut m);
    Ok(m)
}

/// One NNGP layer step: Phi' = <phi(h) phi(h)^T> under h ~ N(0, Phi).
pub fn nngp_layer(
    phi: &Array2<f64>,
    activation: Activation,
    mc: &SamplerConfig,
) -> Result<Array2<f64>> {
    match activation {
        Activation::Linear => Ok(phi.clone()),
        Activation::Relu => Ok(relu_arccos1(phi)),
        Activation::Tanh => mc_moment(phi, |v| v.tanh(), mc),
    }
}

/// Derivative kernel <phi'(h) phi'(h)^T> under h ~ N(0, Phi).
pub fn derivative_layer(
    phi: &Array2<f64>,
    activation: Activation,
    mc: &SamplerConfig,
) -> Result<Array2<f64>> {
    match activation {
        Activation::Linear => Ok(Array2::ones(phi.raw_dim())),
        Activation::Relu => Ok(relu_arccos0(phi)),
        Activation::Tanh => mc_moment(
            phi,
            |v| {
                let t = v.tanh();
                1.0 - t * t
            },
            mc,
        ),
    }
}

/// Lazy NNGP tower Phi^0..Phi^L from the data Gram. Seeds for the tanh
/// Monte Carlo are derived per layer from `mc.seed`.
pub fn nngp_kernels(
    phi0: &Array2<f64>,
    depth: usize,
    activation: Activation,
    mc: &SamplerConfig,
) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(depth + 1);
    out.push(phi0.clone());
    for layer in 1..=depth {
        let cfg = SamplerConfig {
            seed: sampling::derive_seed(mc.seed, "nngp-layer", layer as u64),
            ..*mc
        };
        let next = nngp_layer(out.last().unwrap(), activation, &cfg)?;
        out.push(next);
    }
    Ok(out)
}

/// Static lazy NTK: K^l = K^{l-1} o dPhi^l + Phi^l with K^0 = Phi^0.
pub fn ntk_kernel(
    phi0: &Array2<f64>,
    depth: usize,
    activation: Activation,
    mc: &SamplerConfig,
) -> Result<Array2<f64>> {
    let phis = nngp_kernels(phi0, depth, activation, mc)?;
    let mut k = phi0.clone();
    for layer in 1..=depth {
        let cfg = SamplerConfig {
            seed: sampling::derive_seed(mc.seed, "ntk-deriv", layer as u64),
            ..*mc
        };
        let dphi = derivative_layer(&phis[layer - 1], activation, &cfg)?;
        k = &k * &dphi + &phis[layer];
    }
    linalg::symmetrize(&mut k);
    Ok(k)
}

/// GP posterior mean and variance:
/// mean = k (K + I/beta)^{-1} y,
/// var_i = k_diag_i - k_i^T (K + I/beta)^{-1} k_i + 1/beta.
pub fn gp_predict(
    k_train: &KernelMatrix,
    k_test: &Array2<f64>,
    k_test_diag: &Array1<f64>,
    y: &Array1<f64>,
    beta: Beta,
) -> Result<(PredictorResult, Array1<f64>)> {
    let p = k_train.dim();
    if k_test.ncols() != p || y.len() != p || k_test_diag.len() != k_test.nrows() {
        return Err(AkernError::DimensionMismatch(
            "gp_predict shapes do not line up".into(),
        ));
    }
    let noise = beta.inverse();
    let mut system = k_train.entries().clone();
    for i in 0..p {
        system[[i, i]] += noise;
    }
    let chol = linalg::cholesky_psd(&system, 1e-10)?;
    for i in 0..p {
        if chol.lower[[i, i]] == 0.0 {
            return Err(AkernError::SingularSystem);
        }
    }
    let alpha = chol.solve_vec(y);
    let train_predictions = k_train.entries().dot(&alpha);
    let test_predictions = k_test.dot(&alpha);
    let mut variance = Array1::<f64>::zeros(k_test.nrows());
    for i in 0..k_test.nrows() {
        let ki = k_test.row(i).to_owned();
        let v = chol.solve_vec(&ki);
        let reduce = ki.dot(&v);
        let raw = k_test_diag[i] - reduce + noise;
        // Tiny negative values are rounding; anything worse is a real error.
        if raw < -1e-10 {
            return Err(AkernError::InvalidArgument(format!(
                "negative predictive variance {raw:.3e} at test point {i}"
            )));
        }
        variance[i] = raw.max(0.0);
    }
    Ok((
        PredictorResult {
            train_predictions,
            test_predictions,
            test_loss: None,
            kernel_used: k_train.clone(),
        },
        variance,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelKind;
    use ndarray::array;

    fn default_mc() -> SamplerConfig {
        SamplerConfig {
            batch_size: 20_000,
            seed: 1234,
            jitter: 1e-10,
        }
    }

    #[test]
    fn linear_recursion_is_identity() {
        let phi0 = array![[1.0, 0.3], [0.3, 0.8]];
        let phis = nngp_kernels(&phi0, 4, Activation::Linear, &default_mc()).unwrap();
        for phi in &phis {
            assert!(linalg::max_abs(&(phi - &phi0)) == 0.0);
        }
    }

    #[test]
    fn relu_identity_input_has_known_closed_form() {
        // At zero correlation the arc-cosine kernel gives 1/(2 pi) off the
        // diagonal and 1/2 on it.
        let phi0 = Array2::<f64>::eye(3);
        let phi1 = relu_arccos1(&phi0);
        for i in 0..3 {
            assert!((phi1[[i, i]] - 0.5).abs() < 1e-14);
            for j in 0..3 {
                if i != j {
                    assert!((phi1[[i, j]] - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn relu_closed_form_matches_monte_carlo() {
        let phi0 = array![[1.0, 0.4, -0.2], [0.4, 1.3, 0.1], [-0.2, 0.1, 0.7]];
        let closed = relu_arccos1(&phi0);
        let cfg = SamplerConfig {
            batch_size: 1_000_000,
            seed: 77,
            jitter: 1e-10,
        };
        let mc = mc_moment(&phi0, |v| v.max(0.0), &cfg).unwrap();
        let tol = 3.0 * 2.0 / (cfg.batch_size as f64).sqrt();
        assert!(
            linalg::max_abs(&(&closed - &mc)) < tol,
            "max err {}",
            linalg::max_abs(&(&closed - &mc))
        );
    }

    #[test]
    fn tanh_mc_is_seed_consistent() {
        let phi0 = array![[1.0, 0.5], [0.5, 1.0]];
        let a = nngp_kernels(&phi0, 1, Activation::Tanh, &default_mc()).unwrap();
        let b = nngp_kernels(
            &phi0,
            1,
            Activation::Tanh,
            &SamplerConfig {
                seed: 999,
                ..default_mc()
            },
        )
        .unwrap();
        // Two seeds agree within 3 combined standard errors.
        let tol = 3.0 * 2.0 / (20_000.0_f64).sqrt();
        assert!(linalg::max_abs(&(&a[1] - &b[1])) < tol);
    }

    #[test]
    fn linear_two_layer_ntk_doubles_gram() {
        let phi0 = array![[1.0, 0.2], [0.2, 0.9]];
        let k = ntk_kernel(&phi0, 1, Activation::Linear, &default_mc()).unwrap();
        assert!(linalg::max_abs(&(&k - &phi0.mapv(|v| 2.0 * v))) < 1e-14);
    }

    #[test]
    fn gp_prediction_on_train_point_at_zero_temperature() {
        let k = KernelMatrix::new(KernelKind::Feature, array![[1.0, 0.2], [0.2, 0.8]]).unwrap();
        let y = array![1.0, -1.0];
        // Test point equals training point 0.
        let k_test = array![[1.0, 0.2]];
        let k_diag = array![1.0];
        let (pred, var) = gp_predict(&k, &k_test, &k_diag, &y, Beta::Infinite).unwrap();
        assert!((pred.test_predictions[0] - 1.0).abs() < 1e-8);
        assert!(var[0].abs() < 1e-8);
    }

    #[test]
    fn gp_prediction_with_zero_cross_kernel() {
        let k = KernelMatrix::new(KernelKind::Feature, Array2::<f64>::eye(2)).unwrap();
        let y = array![1.0, 2.0];
        let k_test = Array2::<f64>::zeros((1, 2));
        let k_diag = array![0.7];
        let (pred, var) = gp_predict(&k, &k_test, &k_diag, &y, Beta::Finite(1.0)).unwrap();
        assert_eq!(pred.test_predictions[0], 0.0);
        assert!((var[0] - (0.7 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gp_matches_symbolic_two_point_algebra() {
        let (a, b, c) = (1.2, 0.3, 0.9);
        let beta = 2.0;
        let k = KernelMatrix::new(KernelKind::Feature, array![[a, b], [b, c]]).unwrap();
        let y = array![0.5, -1.5];
        let k_test = array![[0.4, 0.1]];
        let k_diag = array![1.1];
        let (pred, var) = gp_predict(&k, &k_test, &k_diag, &y, Beta::Finite(beta)).unwrap();
        // Symbolic 2x2 inverse of K + I/beta.
        let (aa, cc) = (a + 1.0 / beta, c + 1.0 / beta);
        let det = aa * cc - b * b;
        let alpha = array![(cc * y[0] - b * y[1]) / det, (-b * y[0] + aa * y[1]) / det];
        let mean = 0.4 * alpha[0] + 0.1 * alpha[1];
        assert!((pred.test_predictions[0] - mean).abs() < 1e-12);
        let kv = array![(cc * 0.4 - b * 0.1) / det, (-b * 0.4 + aa * 0.1) / det];
        let expect_var = 1.1 - (0.4 * kv[0] + 0.1 * kv[1]) + 1.0 / beta;
        assert!((var[0] - expect_var).abs() < 1e-12);
    }
}
