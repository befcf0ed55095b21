//! The adaptive Bayesian kernel: action evaluation, analytic saddle
//! residuals, the alternating min-max solver, the test-point extension of
//! the single-site density, the small-richness perturbative correction, and
//! tilted preactivation densities.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{AkernError, Result};
use crate::hyper::{Activation, Hyperparams};
use crate::kernel::{self, KernelKind, KernelMatrix, KernelStack, PredictorResult};
use crate::lazy;
use crate::linalg;
use crate::sampling::{self, SamplerConfig, SingleSiteEstimate};
use crate::stats;

/// Solver knobs for the alternating min-max optimization. Defaults follow
/// the reference schedule (200 inner ascent steps, up to 20000 outer
/// descent steps, steps 1e-4 / 1e-5); desk-scale runs shrink the loop
/// counts and raise the steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnbkSolverConfig {
    pub inner_steps: usize,
    pub max_outer_steps: usize,
    pub step_phi: f64,
    pub step_phi_hat: f64,
    /// Convergence threshold on residual infinity norms relative to
    /// trace(Phi^l)/P.
    pub residual_tol: f64,
    /// Outer steps over which the richness is ramped from zero. A cold
    /// start at full gamma0 pushes the duals into a non-normalizable tilt
    /// (the importance weights blow up) before the feature kernels can
    /// adapt; ramping keeps the iterate on the physical branch.
    pub ramp_steps: usize,
    pub sampler: SamplerConfig,
    /// Closed-form single-site moments for the linear activation instead of
    /// Monte Carlo.
    pub analytic_linear: bool,
}

impl Default for AnbkSolverConfig {
    fn default() -> Self {
        Self {
            inner_steps: 200,
            max_outer_steps: 20_000,
            step_phi: 1e-5,
            step_phi_hat: 1e-4,
            residual_tol: 1e-3,
            ramp_steps: 200,
            sampler: SamplerConfig::default(),
            analytic_linear: true,
        }
    }
}

/// One row of the solver's residual trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub max_residual: f64,
    pub action: f64,
    pub min_ess: f64,
}

#[derive(Debug, Clone)]
pub struct AnbkDiagnostics {
    pub converged: bool,
    pub outer_iterations: usize,
    pub final_residual: f64,
    pub trace: Vec<TraceRow>,
}

/// Saddle-equation defects for every kernel block; these are proportional
/// to the analytic gradients of the action (dS/dX = -r/2) and double as the
/// solver's ascent/descent directions.
#[derive(Debug, Clone)]
pub struct SaddleResiduals {
    /// r_phi[l-1] is the defect of the Phi^l stationarity, l = 1..=L.
    pub r_phi: Vec<Array2<f64>>,
    /// r_phi_hat[l-1] is the defect of the PhiHat^l stationarity.
    pub r_phi_hat: Vec<Array2<f64>>,
    pub min_ess: f64,
}

impl SaddleResiduals {
    /// Largest infinity norm over all blocks, each scaled by trace(Phi^l)/P.
    pub fn max_relative(&self, stack: &KernelStack) -> f64 {
        let p = stack.dim() as f64;
        let mut worst = 0.0_f64;
        for (idx, (rp, rh)) in self.r_phi.iter().zip(self.r_phi_hat.iter()).enumerate() {
            let scale = (stack.phi(idx + 1).trace() / p).abs().max(1e-12);
            worst = worst.max(linalg::max_abs(rp) / scale);
            worst = worst.max(linalg::max_abs(rh) / scale);
        }
        worst
    }
}

fn site_estimate(
    phi_prev: &Array2<f64>,
    phi_hat: &Array2<f64>,
    lambda_prev: f64,
    activation: Activation,
    cfg: &SamplerConfig,
    analytic_linear: bool,
) -> Result<SingleSiteEstimate> {
    if analytic_linear && activation == Activation::Linear {
        sampling::linear_single_site_exact(phi_prev, phi_hat, lambda_prev)
    } else {
        sampling::estimate_single_site(phi_prev, phi_hat, lambda_prev, activation, cfg)
    }
}

/// Single-site estimates for layers 1..=L with per-layer derived seeds.
/// Both the action and the residuals are assembled from the same batches,
/// which is what makes finite differences of the action match the analytic
/// residuals at a shared seed.
fn site_estimates(
    stack: &KernelStack,
    hp: &Hyperparams,
    sampler: &SamplerConfig,
    analytic_linear: bool,
) -> Result<Vec<SingleSiteEstimate>> {
    (1..=stack.depth())
        .map(|layer| {
            let cfg = SamplerConfig {
                seed: sampling::derive_seed(sampler.seed, "anbk-site", layer as u64),
                ..*sampler
            };
            site_estimate(
                stack.phi(layer - 1).entries(),
                stack.phi_hat(layer).entries(),
                hp.lambda(layer - 1),
                hp.activation,
                &cfg,
                analytic_linear,
            )
        })
        .collect()
}

/// I/beta + Phi^L/lambda_L, the data-fit system matrix.
fn data_system(stack: &KernelStack, hp: &Hyperparams) -> Array2<f64> {
    let p = stack.dim();
    let mut a = stack.phi(stack.depth()).entries().mapv(|v| v / hp.lambda_last());
    let binv = hp.beta.inverse();
    for i in 0..p {
        a[[i, i]] += binv;
    }
    a
}

/// The kernel action
/// S = -1/2 sum_l Tr(Phi^l PhiHat^l)
///     + (gamma0^2/2) y^T (I/beta + Phi^L/lambda_L)^{-1} y
///     - sum_{l=1}^{L} ln Z_l[Phi^{l-1}, PhiHat^l].
///
/// The log-partition sum runs over all L hidden layers; each Z_l couples
/// the previous feature kernel to the layer's own dual, and the layer-L
/// data term closes the stack.
pub fn action(
    stack: &KernelStack,
    y: &Array1<f64>,
    hp: &Hyperparams,
    sampler: &SamplerConfig,
    analytic_linear: bool,
) -> Result<f64> {
    let ests = site_estimates(stack, hp, sampler, analytic_linear)?;
    action_from_estimates(stack, y, hp, &ests)
}

fn action_from_estimates(
    stack: &KernelStack,
    y: &Array1<f64>,
    hp: &Hyperparams,
    ests: &[SingleSiteEstimate],
) -> Result<f64> {
    let depth = stack.depth();
    let mut s = 0.0_f64;
    for layer in 1..=depth {
        s -= 0.5
            * linalg::frobenius_inner(
                stack.phi(layer).entries(),
                stack.phi_hat(layer).entries(),
            );
    }
    if hp.gamma0 > 0.0 {
        let a = data_system(stack, hp);
        let ainv_y = linalg::solve_spd_vec(&a, y, 1e-10)?;
        s += 0.5 * hp.gamma0 * hp.gamma0 * y.dot(&ainv_y);
    }
    for est in ests {
        s -= est.log_z;
    }
    Ok(s)
}

/// Analytic saddle residuals:
/// r_phi_hat^l = Phi^l - <phi(h^l) phi(h^l)^T>_tilted,
/// r_phi^l     = PhiHat^l - [(Phi^l)^{-1} - lambda_l (Phi^l)^{-1} <h^{l+1} h^{l+1,T}> (Phi^l)^{-1}]  (l < L),
/// r_phi^L     = PhiHat^L + (gamma0^2/lambda_L) A^{-1} y y^T A^{-1}.
pub fn saddle_residuals(
    stack: &KernelStack,
    y: &Array1<f64>,
    hp: &Hyperparams,
    sampler: &SamplerConfig,
    analytic_linear: bool,
) -> Result<SaddleResiduals> {
    let ests = site_estimates(stack, hp, sampler, analytic_linear)?;
    residuals_from_estimates(stack, y, hp, &ests)
}

fn residuals_from_estimates(
    stack: &KernelStack,
    y: &Array1<f64>,
    hp: &Hyperparams,
    ests: &[SingleSiteEstimate],
) -> Result<SaddleResiduals> {
    let depth = stack.depth();
    let p = stack.dim();
    let mut r_phi = Vec::with_capacity(depth);
    let mut r_phi_hat = Vec::with_capacity(depth);
    let mut min_ess = f64::INFINITY;
    for est in ests {
        min_ess = min_ess.min(est.effective_sample_size);
    }

    for layer in 1..=depth {
        let r = stack.phi(layer).entries() - &ests[layer - 1].feature_moment;
        r_phi_hat.push(linalg::symmetrized(&r));
    }

    for layer in 1..depth {
        let phi_inv = linalg::inv_spd(stack.phi(layer).entries(), 1e-10)?;
        let inner = phi_inv
            .dot(&ests[layer].field_moment)
            .dot(&phi_inv)
            .mapv(|v| v * hp.lambda(layer));
        let r = stack.phi_hat(layer).entries() - &(&phi_inv - &inner);
        r_phi.push(linalg::symmetrized(&r));
    }

    {
        let a = data_system(stack, hp);
        let ainv_y = linalg::solve_spd_vec(&a, y, 1e-10)?;
        let coeff = hp.gamma0 * hp.gamma0 / hp.lambda_last();
        let mut source = Array2::<f64>::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                source[[i, j]] = coeff * ainv_y[i] * ainv_y[j];
            }
        }
        let r = stack.phi_hat(depth).entries() + &source;
        r_phi.push(linalg::symmetrized(&r));
    }

    Ok(SaddleResiduals {
        r_phi,
        r_phi_hat,
        min_ess,
    })
}

/// Lazy initialization of the stack: the layerwise Gaussian feature moments
/// with the per-layer ridge folded into the prior covariance, and zero
/// duals. This is the exact saddle at gamma0 = 0.
pub fn lazy_stack(phi0: &KernelMatrix, hp: &Hyperparams, mc: &SamplerConfig) -> Result<KernelStack> {
    let mut phi = vec![phi0.clone()];
    for layer in 1..=hp.depth {
        let prior = phi[layer - 1]
            .entries()
            .mapv(|v| v / hp.lambda(layer - 1));
        let cfg = SamplerConfig {
            seed: sampling::derive_seed(mc.seed, "anbk-lazy-init", layer as u64),
            ..*mc
        };
        let next = lazy::nngp_layer(&prior, hp.activation, &cfg)?;
        phi.push(KernelMatrix::new(KernelKind::Feature, next)?);
    }
    KernelStack::lazy(phi)
}

/// Multiplicative lognormal perturbation exp(scale * g) applied entrywise
/// to the feature kernels of a warm start, then symmetrized.
pub fn perturb_stack(stack: &KernelStack, scale: f64, seed: u64) -> Result<KernelStack> {
    let mut rng = sampling::rng_from_seed(seed);
    let mut phi = vec![stack.phi(0).clone()];
    for layer in 1..=stack.depth() {
        let noise =
            sampling::standard_normal_matrix(stack.dim(), stack.dim(), &mut rng);
        let perturbed = stack.phi(layer).entries() * &noise.mapv(|g| (scale * g).exp());
        phi.push(KernelMatrix::new(KernelKind::Feature, perturbed)?);
    }
    let phi_hat = stack.phi_hat.clone();
    KernelStack::new(phi, phi_hat)
}

/// Alternating min-max solve of the kernel action: `inner_steps` gradient
/// ascents on every dual kernel per one gradient descent on the feature
/// kernels, fresh Monte Carlo batch each iteration, symmetrization after
/// every update and a PSD projection of the feature kernels after each
/// outer step.
pub fn solve_anbk(
    dataset: &Dataset,
    hp: &Hyperparams,
    config: &AnbkSolverConfig,
    warm_start: Option<&KernelStack>,
) -> Result<(KernelStack, AnbkDiagnostics)> {
    let phi0 = kernel::data_gram(dataset);
    let y = dataset.targets().clone();
    let mut stack = match warm_start {
        Some(ws) => perturb_stack(
            ws,
            0.1,
            sampling::derive_seed(config.sampler.seed, "anbk-warm", 0),
        )?,
        None => lazy_stack(&phi0, hp, &config.sampler)?,
    };
    let depth = stack.depth();
    let init_norm: f64 = (1..=depth)
        .map(|l| stack.phi(l).frobenius_norm())
        .sum::<f64>()
        .max(1e-12);

    let mut trace = Vec::new();

    // gamma0 = 0 is the lazy saddle itself: duals stay zero and the feature
    // kernels are already the Gaussian moments, so no optimization runs.
    if hp.gamma0 == 0.0 {
        let res = saddle_residuals(&stack, &y, hp, &config.sampler, config.analytic_linear)?;
        let max_rel = res.max_relative(&stack);
        trace.push(TraceRow {
            iteration: 0,
            max_residual: max_rel,
            action: action(&stack, &y, hp, &config.sampler, config.analytic_linear)?,
            min_ess: res.min_ess,
        });
        return Ok((
            stack,
            AnbkDiagnostics {
                converged: true,
                outer_iterations: 0,
                final_residual: max_rel,
                trace,
            },
        ));
    }

    let mut fresh = 0u64;
    let mut converged = false;
    let mut outer_done = 0;
    let mut final_residual = f64::INFINITY;
    let ramp_steps = config.ramp_steps.max(1);
    for outer in 0..config.max_outer_steps {
        outer_done = outer + 1;
        let ramp = ((outer + 1) as f64 / ramp_steps as f64).min(1.0);
        let mut hp_eff = hp.clone();
        hp_eff.gamma0 = hp.gamma0 * ramp;
        let hp_eff = &hp_eff;
        let mut min_ess = f64::INFINITY;

        // Inner maximization over the duals.
        for _ in 0..config.inner_steps {
            let cfg = SamplerConfig {
                seed: sampling::derive_seed(config.sampler.seed, "anbk-fresh", fresh),
                ..config.sampler
            };
            fresh += 1;
            let ests = site_estimates(&stack, hp, &cfg, config.analytic_linear)?;
            let res = residuals_from_estimates(&stack, &y, hp_eff, &ests)?;
            min_ess = min_ess.min(res.min_ess);
            // ESS collapse warns and shrinks the step, never aborts.
            let step = if res.min_ess < 10.0 {
                0.5 * config.step_phi_hat
            } else {
                config.step_phi_hat
            };
            for layer in 1..=depth {
                // Ascent along dS/dPhiHat = -r_phi_hat/2.
                let updated = stack.phi_hat(layer).entries()
                    - &res.r_phi_hat[layer - 1].mapv(|v| 0.5 * step * v);
                stack.phi_hat[layer - 1] = KernelMatrix::new(KernelKind::Dual, updated)?;
            }
        }

        // One outer descent step on the feature kernels.
        let cfg = SamplerConfig {
            seed: sampling::derive_seed(config.sampler.seed, "anbk-fresh", fresh),
            ..config.sampler
        };
        fresh += 1;
        let ests = site_estimates(&stack, hp, &cfg, config.analytic_linear)?;
        let res = residuals_from_estimates(&stack, &y, hp_eff, &ests)?;
        min_ess = min_ess.min(res.min_ess);
        let max_rel = res.max_relative(&stack);
        final_residual = max_rel;
        let step = if res.min_ess < 10.0 {
            0.5 * config.step_phi
        } else {
            config.step_phi
        };
        for layer in 1..=depth {
            // Descent along -dS/dPhi = +r_phi/2, then keep the iterate PSD.
            let updated =
                stack.phi(layer).entries() + &res.r_phi[layer - 1].mapv(|v| 0.5 * step * v);
            let projected = linalg::psd_project(&updated);
            stack.phi[layer] = KernelMatrix::new(KernelKind::Feature, projected)?;
        }

        let act = action_from_estimates(&stack, &y, hp_eff, &ests)?;
        if outer % 10 == 0 || max_rel < config.residual_tol {
            trace.push(TraceRow {
                iteration: outer,
                max_residual: max_rel,
                action: act,
                min_ess,
            });
        }

        if !act.is_finite() {
            return Err(AkernError::Diverged {
                step: outer,
                reason: "action is not finite".into(),
            });
        }
        let norm: f64 = (1..=depth).map(|l| stack.phi(l).frobenius_norm()).sum();
        if norm > 1e6 * init_norm {
            return Err(AkernError::Diverged {
                step: outer,
                reason: format!("kernel norm grew {:.1e}x", norm / init_norm),
            });
        }

        if max_rel < config.residual_tol && outer + 1 >= ramp_steps {
            converged = true;
            break;
        }
    }

    Ok((
        stack,
        AnbkDiagnostics {
            converged,
            outer_iterations: outer_done,
            final_residual,
            trace,
        },
    ))
}

/// Train-test kernel blocks produced by propagating the joint single-site
/// density through the solved stack.
#[derive(Debug, Clone)]
pub struct TestKernel {
    /// P_test x P train-test kernel at the last layer.
    pub k_test: Array2<f64>,
    /// Test-test diagonal at the last layer.
    pub k_diag: Array1<f64>,
}

/// Propagate the (P + P_test)-dimensional single-site density layer by
/// layer. The joint Gaussian prior covariance carries the solved train
/// block; the tilt acts on the train block only (the test duals vanish),
/// and the tilted cross moments give the new test column and diagonal.
pub fn test_kernel_extension(
    stack: &KernelStack,
    dataset: &Dataset,
    test_inputs: &Array2<f64>,
    hp: &Hyperparams,
    sampler: &SamplerConfig,
    analytic_linear: bool,
) -> Result<TestKernel> {
    let p = dataset.len();
    let p_test = test_inputs.nrows();
    if test_inputs.ncols() != dataset.dim() {
        return Err(AkernError::DimensionMismatch(format!(
            "test inputs of dim {} against train dim {}",
            test_inputs.ncols(),
            dataset.dim()
        )));
    }
    let total = p + p_test;
    let mut all = Array2::<f64>::zeros((total, dataset.dim()));
    all.slice_mut(s![..p, ..]).assign(dataset.inputs());
    all.slice_mut(s![p.., ..]).assign(test_inputs);
    let mut joint = kernel::gram_of_rows(&all);

    for layer in 1..=stack.depth() {
        let mut tilt = Array2::<f64>::zeros((total, total));
        tilt.slice_mut(s![..p, ..p])
            .assign(stack.phi_hat(layer).entries());
        let cfg = SamplerConfig {
            seed: sampling::derive_seed(sampler.seed, "anbk-test-ext", layer as u64),
            ..*sampler
        };
        let est = site_estimate(
            &joint,
            &tilt,
            hp.lambda(layer - 1),
            hp.activation,
            &cfg,
            analytic_linear,
        )?;
        let mut next = est.feature_moment;
        // Keep the solved train block; only the test rows/columns come from
        // this layer's estimate.
        next.slice_mut(s![..p, ..p])
            .assign(stack.phi(layer).entries());
        linalg::symmetrize(&mut next);
        joint = next;
    }

    let k_test = joint.slice(s![p.., ..p]).to_owned();
    let k_diag = joint.slice(s![p.., p..]).diag().to_owned();
    Ok(TestKernel { k_test, k_diag })
}

/// Bayesian kernel regression with the solved last-layer kernel:
/// f = k_test (Phi^L + lambda_L I/beta)^{-1} y.
pub fn predict_anbk(
    stack: &KernelStack,
    k_test: &Array2<f64>,
    y: &Array1<f64>,
    hp: &Hyperparams,
) -> Result<PredictorResult> {
    kernel::kernel_ridge_predict(stack.phi(stack.depth()), k_test, y, hp.anbk_ridge())
}

/// Leading-order small-richness correction to the lazy stack: the
/// last-layer dual from the data term, a backward Hessian recursion for the
/// earlier duals, and the first-order tilt of every feature kernel, all
/// evaluated at the unperturbed Gaussian statistics.
pub fn perturbative_correction(
    lazy: &KernelStack,
    y: &Array1<f64>,
    hp: &Hyperparams,
    sampler: &SamplerConfig,
) -> Result<KernelStack> {
    let depth = lazy.depth();
    let p = lazy.dim();
    let g2 = hp.gamma0 * hp.gamma0;

    let mut phi_hat: Vec<Array2<f64>> = vec![Array2::zeros((p, p)); depth];
    if g2 > 0.0 {
        let a = data_system(lazy, hp);
        let ainv_y = linalg::solve_spd_vec(&a, y, 1e-10)?;
        let coeff = g2 / hp.lambda_last();
        for i in 0..p {
            for j in 0..p {
                phi_hat[depth - 1][[i, j]] = -coeff * ainv_y[i] * ainv_y[j];
            }
        }

        // Backward recursion: PhiHat^l = <dphi dphi^T> o PhiHat^{l+1}
        //                      + diag(sum_b <ddphi(h_m) phi(h_b)> PhiHat^{l+1}[m,b]),
        // Gaussian averages at the lazy layer-(l+1) prior.
        for layer in (1..depth).rev() {
            let prior = lazy.phi(layer).entries().mapv(|v| v / hp.lambda(layer));
            let next = phi_hat[layer].clone();
            phi_hat[layer - 1] = dual_backward_step(&prior, &next, hp.activation, sampler, layer)?;
        }
    }

    // First-order tilted feature kernels:
    // Phi^l = Phi0^l - 1/2 <phi phi^T (phi^T PhiHat^l phi)>_0
    //       + 1/2 Phi0^l <phi^T PhiHat^l phi>_0.
    let mut phi: Vec<KernelMatrix> = vec![lazy.phi(0).clone()];
    for layer in 1..=depth {
        let prior = lazy
            .phi(layer - 1)
            .entries()
            .mapv(|v| v / hp.lambda(layer - 1));
        let corrected = if g2 == 0.0 {
            lazy.phi(layer).entries().clone()
        } else {
            tilted_first_order(
                lazy.phi(layer).entries(),
                &prior,
                &phi_hat[layer - 1],
                hp.activation,
                sampler,
                layer,
            )?
        };
        phi.push(KernelMatrix::new(KernelKind::Feature, corrected)?);
    }

    let phi_hat = phi_hat
        .into_iter()
        .map(|m| KernelMatrix::new(KernelKind::Dual, m))
        .collect::<Result<Vec<_>>>()?;
    KernelStack::new(phi, phi_hat)
}

fn dual_backward_step(
    prior: &Array2<f64>,
    next_dual: &Array2<f64>,
    activation: Activation,
    sampler: &SamplerConfig,
    layer: usize,
) -> Result<Array2<f64>> {
    let p = prior.nrows();
    match activation {
        Activation::Linear => Ok(next_dual.clone()),
        Activation::Relu => {
            // <relu' relu'> is the zeroth arc-cosine kernel; the second
            // derivative term uses relu'' = delta:
            // <delta(h_m) relu(h_b)> = p_m(0) sigma(b|m) / sqrt(2 pi).
            let d = lazy::relu_arccos0(prior);
            let mut out = &d * next_dual;
            for m in 0..p {
                let cmm = prior[[m, m]].max(1e-300);
                let pm0 = 1.0 / (2.0 * std::f64::consts::PI * cmm).sqrt();
                let mut diag_term = 0.0;
                for b in 0..p {
                    if b == m {
                        continue; // relu(0) = 0
                    }
                    let cond_var = (prior[[b, b]] - prior[[m, b]] * prior[[m, b]] / cmm).max(0.0);
                    let mean_relu = (cond_var / (2.0 * std::f64::consts::PI)).sqrt();
                    diag_term += pm0 * mean_relu * next_dual[[m, b]];
                }
                out[[m, m]] += diag_term;
            }
            Ok(linalg::symmetrized(&out))
        }
        Activation::Tanh => {
            let cfg = SamplerConfig {
                seed: sampling::derive_seed(sampler.seed, "perturb-dual", layer as u64),
                ..*sampler
            };
            let h = sampling::sample_gaussian(prior, cfg.batch_size, cfg.seed, cfg.jitter)?;
            let b = cfg.batch_size as f64;
            let dphi = h.mapv(|v| Activation::Tanh.derivative(v));
            let d = dphi.dot(&dphi.t()).mapv(|v| v / b);
            let mut out = &d * next_dual;
            let f = h.mapv(|v| v.tanh());
            let ddphi = h.mapv(|v| {
                let t = v.tanh();
                -2.0 * t * (1.0 - t * t)
            });
            let cross = ddphi.dot(&f.t()).mapv(|v| v / b);
            for m in 0..p {
                let mut diag_term = 0.0;
                for bcol in 0..p {
                    diag_term += cross[[m, bcol]] * next_dual[[m, bcol]];
                }
                out[[m, m]] += diag_term;
            }
            Ok(linalg::symmetrized(&out))
        }
    }
}

fn tilted_first_order(
    phi_lazy: &Array2<f64>,
    prior: &Array2<f64>,
    dual: &Array2<f64>,
    activation: Activation,
    sampler: &SamplerConfig,
    layer: usize,
) -> Result<Array2<f64>> {
    if activation == Activation::Linear {
        // Wick contraction collapses the first-order expansion to
        // Phi = C - C PhiHat C with C the prior covariance.
        let c = prior;
        let correction = c.dot(dual).dot(c);
        return Ok(linalg::symmetrized(&(phi_lazy - &correction)));
    }
    let cfg = SamplerConfig {
        seed: sampling::derive_seed(sampler.seed, "perturb-phi", layer as u64),
        ..*sampler
    };
    let h = sampling::sample_gaussian(prior, cfg.batch_size, cfg.seed, cfg.jitter)?;
    let f = h.mapv(|v| activation.apply(v));
    let b = cfg.batch_size as f64;
    // q_k = phi(h_k)^T PhiHat phi(h_k)
    let tf = dual.dot(&f);
    let q: Array1<f64> = (&f * &tf).sum_axis(ndarray::Axis(0));
    let fq = &f * &q;
    let m1 = fq.dot(&f.t()).mapv(|v| v / b);
    let m0 = q.sum() / b;
    let corrected = phi_lazy - &m1.mapv(|v| 0.5 * v) + &phi_lazy.mapv(|v| 0.5 * m0 * v);
    Ok(linalg::symmetrized(&corrected))
}

/// Weighted kernel-density estimate of the layer-l tilted marginal of
/// h_pattern on a grid.
pub fn preactivation_density(
    stack: &KernelStack,
    layer: usize,
    pattern: usize,
    grid: &[f64],
    hp: &Hyperparams,
    sampler: &SamplerConfig,
) -> Result<Vec<f64>> {
    if layer == 0 || layer > stack.depth() {
        return Err(AkernError::InvalidArgument(format!(
            "layer {layer} outside 1..={}",
            stack.depth()
        )));
    }
    if pattern >= stack.dim() {
        return Err(AkernError::InvalidArgument(format!(
            "pattern {pattern} outside 0..{}",
            stack.dim()
        )));
    }
    let ts = sampling::tilted_sample(
        stack.phi(layer - 1).entries(),
        stack.phi_hat(layer).entries(),
        hp.lambda(layer - 1),
        hp.activation,
        sampler,
    )?;
    let points: Vec<f64> = ts.h.row(pattern).to_vec();
    let weights: Vec<f64> = ts.weights.to_vec();
    Ok(stats::weighted_kde(&points, &weights, grid))
}

/// Raw weighted samples of the layer-l tilted marginal, for KS-style
/// comparisons against network histograms.
pub fn preactivation_samples(
    stack: &KernelStack,
    layer: usize,
    pattern: usize,
    hp: &Hyperparams,
    sampler: &SamplerConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ts = sampling::tilted_sample(
        stack.phi(layer - 1).entries(),
        stack.phi_hat(layer).entries(),
        hp.lambda(layer - 1),
        hp.activation,
        sampler,
    )?;
    Ok((ts.h.row(pattern).to_vec(), ts.weights.to_vec()))
}
