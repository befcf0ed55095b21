//! The adaptive tangent kernel: two-layer mean-field dynamics of
//! preactivation and pregradient fields under gradient flow with weight
//! decay, for MLPs and for single-conv-layer patch networks, plus kernel
//! assembly, the ridge predictor, and the single-datapoint ReLU fixed point.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{AkernError, Result};
use crate::hyper::{Activation, Hyperparams};
use crate::kernel::{self, KernelKind, KernelMatrix, PredictorResult};
use crate::linalg;
use crate::sampling::{self};

/// Distribution of the initial field samples. Gaussian matches random
/// weight initialization; Laplace probes that the fixed point does not
/// depend on the initial law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldInit {
    Gaussian,
    Laplace,
}

/// Euler discretization knobs for the field dynamics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmftConfig {
    /// Number of Euler steps T.
    pub steps: usize,
    /// Step size eta.
    pub eta: f64,
    /// Monte Carlo sample count S.
    pub samples: usize,
    pub seed: u64,
    pub record_every: usize,
    pub init: FieldInit,
    /// Early stop once the error signal moves less than this per step
    /// (infinity norm); 0 disables.
    pub convergence_tol: f64,
}

impl Default for DmftConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            eta: 1e-3,
            samples: 20_000,
            seed: 0,
            record_every: 500,
            init: FieldInit::Gaussian,
            convergence_tol: 1e-9,
        }
    }
}

/// Monte Carlo field ensemble at one time: preactivations over all
/// (train + test) patterns and the shared pregradient samples.
#[derive(Debug, Clone)]
pub struct FieldEnsemble {
    /// P_total x S preactivation samples (patch-major for the CNN case).
    pub h: Array2<f64>,
    /// Pregradient samples: 1 x S for the MLP, A x S for the CNN.
    pub z: Array2<f64>,
}

impl FieldEnsemble {
    /// g = phi'(h) (.) z with z broadcast across the patterns that share a
    /// readout row.
    pub fn gradient_field(&self, activation: Activation) -> Array2<f64> {
        let a = self.z.nrows();
        let mut g = self.h.mapv(|v| activation.derivative(v));
        for (i, mut row) in g.rows_mut().into_iter().enumerate() {
            let zrow = self.z.row(i % a);
            for (ge, ze) in row.iter_mut().zip(zrow.iter()) {
                *ge *= ze;
            }
        }
        g
    }
}

/// Summary of one recorded step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmftRecord {
    pub step: usize,
    pub train_loss: f64,
    pub delta_norm: f64,
    pub phi1_trace: f64,
    pub g1_trace: f64,
}

/// Result of a field-dynamics solve.
#[derive(Debug, Clone)]
pub struct DmftOutput {
    /// Input kernel over train+test patterns (pattern level for the MLP,
    /// summed assembly input for the CNN).
    pub phi0: Array2<f64>,
    /// Final feature kernel Phi^1 over train+test patterns.
    pub phi1: Array2<f64>,
    /// Final gradient kernel G^1 over train+test patterns.
    pub g1: Array2<f64>,
    /// Assembled adaptive tangent kernel over train+test patterns.
    pub kernel: Array2<f64>,
    /// Final error signal on the train patterns.
    pub delta: Array1<f64>,
    /// In-dynamics readouts s = phi(h) z / (gamma0 S) for all patterns.
    pub readout: Array1<f64>,
    pub fields: FieldEnsemble,
    pub records: Vec<DmftRecord>,
    /// First step at which the error signal stopped moving, if any.
    pub converged_step: Option<usize>,
}

fn initial_matrix(
    rows: usize,
    cols: usize,
    init: FieldInit,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Array2<f64> {
    match init {
        FieldInit::Gaussian => sampling::standard_normal_matrix(rows, cols, rng),
        FieldInit::Laplace => sampling::unit_laplace_matrix(rows, cols, rng),
    }
}

/// Two-layer MLP field dynamics:
/// h' = h + eta (gamma0 Phi0[:, train] (Delta (.) g_train) - lambda h),
/// z' = z + eta (gamma0 phi(h_train)^T Delta - lambda z),
/// Delta = y - phi(h_train) z / (gamma0 S).
///
/// Test patterns ride along: they are driven through the Phi0 cross block
/// but contribute no error signal.
pub fn solve_dmft_two_layer(
    train: &Dataset,
    test_inputs: Option<&Array2<f64>>,
    hp: &Hyperparams,
    cfg: &DmftConfig,
) -> Result<DmftOutput> {
    hp.check_antk_supported()?;
    if hp.depth != 1 {
        return Err(AkernError::InvalidArgument(
            "field dynamics are implemented for one hidden layer".into(),
        ));
    }
    if hp.gamma0 <= 0.0 {
        return Err(AkernError::InvalidArgument(
            "field dynamics need gamma0 > 0".into(),
        ));
    }
    let p_train = train.len();
    let mut all = train.inputs().clone();
    if let Some(tx) = test_inputs {
        if tx.ncols() != train.dim() {
            return Err(AkernError::DimensionMismatch(
                "test inputs dimension differs from train".into(),
            ));
        }
        let mut stacked = Array2::<f64>::zeros((p_train + tx.nrows(), train.dim()));
        stacked.slice_mut(s![..p_train, ..]).assign(&all);
        stacked.slice_mut(s![p_train.., ..]).assign(tx);
        all = stacked;
    }
    let phi0 = kernel::gram_of_rows(&all);
    run_dynamics(&phi0, p_train, 1, train.targets(), hp, cfg)
}

/// Two-layer patch-CNN field dynamics. Fields carry a patch index; the
/// input kernel lives on (pattern, patch) pairs and the readout sums over
/// patches with per-patch pregradients.
pub fn solve_dmft_cnn_two_layer(
    train: &Dataset,
    test_inputs: Option<&Array2<f64>>,
    hp: &Hyperparams,
    cfg: &DmftConfig,
) -> Result<DmftOutput> {
    hp.check_antk_supported()?;
    if hp.depth != 1 {
        return Err(AkernError::InvalidArgument(
            "field dynamics are implemented for one hidden layer".into(),
        ));
    }
    let layout = train.patch_layout().ok_or_else(|| {
        AkernError::UnsupportedPatchLayout("cnn dynamics need a patch layout".into())
    })?;
    let p_train = train.len();
    let p_total = p_train + test_inputs.map(|t| t.nrows()).unwrap_or(0);
    let a = layout.patch_count;
    let k = layout.patch_dim;

    // Patch feature rows: row (mu * A + a) holds patch a of pattern mu,
    // so the input kernel is X_p X_p^T / k without ever materializing it
    // during the dynamics.
    let mut xp = Array2::<f64>::zeros((p_total * a, k));
    for mu in 0..p_train {
        for pa in 0..a {
            xp.row_mut(mu * a + pa).assign(&train.patch(mu, pa));
        }
    }
    if let Some(tx) = test_inputs {
        if tx.ncols() != train.dim() {
            return Err(AkernError::DimensionMismatch(
                "test inputs dimension differs from train".into(),
            ));
        }
        for (ti, row) in tx.rows().into_iter().enumerate() {
            let mu = p_train + ti;
            for pa in 0..a {
                xp.row_mut(mu * a + pa)
                    .assign(&row.slice(s![pa * k..(pa + 1) * k]));
            }
        }
    }
    let phi0_patch = xp.dot(&xp.t()).mapv(|v| v / k as f64);
    run_dynamics(&phi0_patch, p_train, a, train.targets(), hp, cfg)
}

/// Shared Euler loop over (pattern, patch) rows. `patches` = 1 recovers the
/// MLP case exactly.
fn run_dynamics(
    phi0: &Array2<f64>,
    p_train: usize,
    patches: usize,
    y: &Array1<f64>,
    hp: &Hyperparams,
    cfg: &DmftConfig,
) -> Result<DmftOutput> {
    let rows_total = phi0.nrows();
    let rows_train = p_train * patches;
    let p_total = rows_total / patches;
    let s_count = cfg.samples;
    let gamma0 = hp.gamma0;
    let lambda = hp.lambda_last();
    let eta = cfg.eta;

    let chol = linalg::cholesky_psd(phi0, 1e-10)?;
    let mut rng = sampling::rng_from_seed(cfg.seed);
    let xi = initial_matrix(rows_total, s_count, cfg.init, &mut rng);
    let mut h = chol.lower.dot(&xi);
    let mut z = initial_matrix(patches, s_count, cfg.init, &mut rng);

    let phi0_block = phi0.slice(s![.., ..rows_train]).to_owned();

    let mut records = Vec::new();
    let mut prev_delta: Option<Array1<f64>> = None;
    let mut converged_step = None;
    let inv_gs = 1.0 / (gamma0 * s_count as f64);

    let readout_of = |h: &Array2<f64>, z: &Array2<f64>, upto: usize| -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(upto);
        for mu in 0..upto {
            let mut acc = 0.0;
            for pa in 0..patches {
                let hrow = h.row(mu * patches + pa);
                let zrow = z.row(pa);
                for (hv, zv) in hrow.iter().zip(zrow.iter()) {
                    acc += hp.activation.apply(*hv) * zv;
                }
            }
            out[mu] = acc * inv_gs;
        }
        out
    };

    for step in 0..cfg.steps {
        let fields = FieldEnsemble { h, z };
        let g = fields.gradient_field(hp.activation);
        let h_cur = fields.h;
        let z_cur = fields.z;

        let s_train = readout_of(&h_cur, &z_cur, p_train);
        let delta = y - &s_train;
        let train_loss = 0.5 * delta.iter().map(|d| d * d).sum::<f64>();
        if !train_loss.is_finite() {
            return Err(AkernError::Diverged {
                step,
                reason: "train loss is not finite".into(),
            });
        }

        // Weighted train rows: row (mu, a) scaled by Delta_mu.
        let mut weighted_g = g.slice(s![..rows_train, ..]).to_owned();
        for mu in 0..p_train {
            let d = delta[mu];
            for pa in 0..patches {
                weighted_g
                    .row_mut(mu * patches + pa)
                    .mapv_inplace(|v| v * d);
            }
        }
        let drive_h = phi0_block.dot(&weighted_g);

        let f_train = h_cur.slice(s![..rows_train, ..]).mapv(|v| hp.activation.apply(v));
        let mut drive_z = Array2::<f64>::zeros((patches, s_count));
        for mu in 0..p_train {
            let d = delta[mu];
            for pa in 0..patches {
                let frow = f_train.row(mu * patches + pa);
                let mut zrow = drive_z.row_mut(pa);
                for (acc, fv) in zrow.iter_mut().zip(frow.iter()) {
                    *acc += d * fv;
                }
            }
        }

        let h_next = &h_cur + &(drive_h.mapv(|v| gamma0 * v) - h_cur.mapv(|v| lambda * v))
            .mapv(|v| eta * v);
        let z_next = &z_cur + &(drive_z.mapv(|v| gamma0 * v) - z_cur.mapv(|v| lambda * v))
            .mapv(|v| eta * v);

        if step % cfg.record_every == 0 {
            let f_all = h_cur.mapv(|v| hp.activation.apply(v));
            let phi1_trace = (&f_all * &f_all).sum() / s_count as f64;
            let g1_trace = (&g * &g).sum() / s_count as f64;
            records.push(DmftRecord {
                step,
                train_loss,
                delta_norm: delta.iter().fold(0.0_f64, |m, d| m.max(d.abs())),
                phi1_trace,
                g1_trace,
            });
        }

        let delta_change = prev_delta
            .as_ref()
            .map(|prev| {
                delta
                    .iter()
                    .zip(prev.iter())
                    .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .unwrap_or(f64::INFINITY);
        prev_delta = Some(delta.clone());
        h = h_next;
        z = z_next;
        // The error signal can freeze while initial-condition transients
        // (suppressed like e^{-lambda t}) are still draining out of the
        // fields, so the early stop also waits for t lambda to pass a
        // comfortable horizon.
        let horizon_passed = step as f64 * eta * lambda > 12.0;
        if cfg.convergence_tol > 0.0 && delta_change < cfg.convergence_tol && horizon_passed {
            converged_step = Some(step);
            break;
        }
    }

    let fields = FieldEnsemble { h, z };
    let g = fields.gradient_field(hp.activation);
    let f_all = fields.h.mapv(|v| hp.activation.apply(v));
    let s_all = readout_of(&fields.h, &fields.z, p_total);
    let delta = y - &s_all.slice(s![..p_train]);

    // Pattern-level kernels: sum over shared patch index pairs.
    let phi1_patch = f_all.dot(&f_all.t()).mapv(|v| v / s_count as f64);
    let g1_patch = g.dot(&g.t()).mapv(|v| v / s_count as f64);
    let (phi0_pat, phi1_pat, g1_pat, kernel) = if patches == 1 {
        let k = assemble_antk(phi0, &phi1_patch, &g1_patch)?;
        (
            phi0.clone(),
            phi1_patch.clone(),
            g1_patch.clone(),
            k.into_entries(),
        )
    } else {
        let k = assemble_antk_patched(phi0, &phi1_patch, &g1_patch, p_total, patches);
        // Pattern-level summaries: patch-summed feature and gradient kernels.
        let mut phi0_sum = Array2::<f64>::zeros((p_total, p_total));
        let mut phi1_sum = Array2::<f64>::zeros((p_total, p_total));
        let mut g1_sum = Array2::<f64>::zeros((p_total, p_total));
        for mu in 0..p_total {
            for nu in 0..p_total {
                for pa in 0..patches {
                    phi1_sum[[mu, nu]] += phi1_patch[[mu * patches + pa, nu * patches + pa]];
                    for pb in 0..patches {
                        phi0_sum[[mu, nu]] += phi0[[mu * patches + pa, nu * patches + pb]];
                        g1_sum[[mu, nu]] += g1_patch[[mu * patches + pa, nu * patches + pb]];
                    }
                }
            }
        }
        (phi0_sum, phi1_sum, g1_sum, k)
    };

    Ok(DmftOutput {
        phi0: phi0_pat,
        phi1: phi1_pat,
        g1: g1_pat,
        kernel,
        delta,
        readout: s_all,
        fields,
        records,
        converged_step,
    })
}

/// Two-layer tangent kernel assembly: K = G^1 (.) Phi^0 + Phi^1 (the
/// readout gradient kernel is all ones).
pub fn assemble_antk(
    phi0: &Array2<f64>,
    phi1: &Array2<f64>,
    g1: &Array2<f64>,
) -> Result<KernelMatrix> {
    if phi0.dim() != phi1.dim() || phi0.dim() != g1.dim() {
        return Err(AkernError::DimensionMismatch(
            "tangent assembly needs matching shapes".into(),
        ));
    }
    let k = &(g1 * phi0) + phi1;
    KernelMatrix::new(KernelKind::Tangent, k)
}

/// Patch-CNN assembly: K[mu,nu] = sum_ab Phi0[mu a, nu b] G1[mu a, nu b]
///                               + sum_a Phi1[mu a, nu a].
fn assemble_antk_patched(
    phi0: &Array2<f64>,
    phi1: &Array2<f64>,
    g1: &Array2<f64>,
    p_total: usize,
    patches: usize,
) -> Array2<f64> {
    let prod = phi0 * g1;
    let mut k = Array2::<f64>::zeros((p_total, p_total));
    for mu in 0..p_total {
        for nu in 0..p_total {
            let mut acc = 0.0;
            for pa in 0..patches {
                acc += phi1[[mu * patches + pa, nu * patches + pa]];
                for pb in 0..patches {
                    acc += prod[[mu * patches + pa, nu * patches + pb]];
                }
            }
            k[[mu, nu]] = acc;
        }
    }
    linalg::symmetrize(&mut k);
    k
}

/// Tangent-kernel ridge regression with the homogeneity ridge lambda_L kappa:
/// f = k (K + lambda_L kappa I)^{-1} y over the train block of a full
/// train+test kernel.
pub fn predict_antk(
    kernel_full: &Array2<f64>,
    p_train: usize,
    y: &Array1<f64>,
    hp: &Hyperparams,
) -> Result<PredictorResult> {
    if kernel_full.nrows() < p_train {
        return Err(AkernError::DimensionMismatch(
            "kernel smaller than train set".into(),
        ));
    }
    let k_train = KernelMatrix::new(
        KernelKind::Tangent,
        kernel_full.slice(s![..p_train, ..p_train]).to_owned(),
    )?;
    let k_test = kernel_full.slice(s![p_train.., ..p_train]).to_owned();
    kernel::kernel_ridge_predict(&k_train, &k_test, y, hp.antk_ridge())
}

/// Closed-form single-datapoint ReLU fixed point of the weight-decay flow:
/// above the transition (gamma0 > lambda) the error signal settles at
/// lambda/gamma0 with <h^2> = gamma0 - lambda; below it the field density
/// collapses and nothing is learned (Delta stays at y = 1).
pub fn fixed_point_relu_single(gamma0: f64, lambda: f64) -> Result<(f64, f64)> {
    if gamma0 <= 0.0 || lambda <= 0.0 {
        return Err(AkernError::InvalidArgument(
            "fixed point needs gamma0 > 0 and lambda > 0".into(),
        ));
    }
    if gamma0 > lambda {
        Ok((lambda / gamma0, gamma0 - lambda))
    } else {
        Ok((1.0, 0.0))
    }
}

/// Second moment of the train-pattern preactivation samples.
pub fn h_second_moment(out: &DmftOutput, pattern: usize) -> f64 {
    let row = out.fields.h.row(pattern);
    row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64
}

/// Fraction of samples below `threshold` for one pattern row.
pub fn negative_mass(out: &DmftOutput, pattern: usize, threshold: f64) -> f64 {
    let row = out.fields.h.row(pattern);
    row.iter().filter(|v| **v < threshold).count() as f64 / row.len() as f64
}

/// Pearson correlation between two sample rows (used for the
/// initial-condition suppression check).
pub fn sample_correlation(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-300)
}
