//! Finite-width networks trained by full-batch Langevin dynamics or
//! gradient descent with weight decay, with manual backpropagation.
//! These are the brute-force reference for every network-level claim the
//! infinite-width solvers make.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AkernError, Result};
use crate::hyper::{Activation, Hyperparams};
use crate::sampling;

/// Weights of a depth-L MLP in mean-field parameterization: W0 is N x D,
/// the hidden blocks are N x N, and the readout is 1 x N. All entries start
/// as unit Gaussians.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub weights: Vec<Array2<f64>>,
    pub width: usize,
    pub input_dim: usize,
    pub depth: usize,
    pub init_seed: u64,
}

impl MlpParams {
    pub fn init(depth: usize, width: usize, input_dim: usize, seed: u64) -> Self {
        let mut rng = sampling::rng_from_seed(seed);
        let mut weights = Vec::with_capacity(depth + 1);
        weights.push(sampling::standard_normal_matrix(width, input_dim, &mut rng));
        for _ in 1..depth {
            weights.push(sampling::standard_normal_matrix(width, width, &mut rng));
        }
        weights.push(sampling::standard_normal_matrix(1, width, &mut rng));
        Self {
            weights,
            width,
            input_dim,
            depth,
            init_seed: seed,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }
}

/// Preactivations per layer plus the readouts.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// h^1..h^L, each P x N.
    pub preactivations: Vec<Array2<f64>>,
    /// s_mu, length P.
    pub outputs: Array1<f64>,
}

/// Mean-field forward pass: h^1 = x W0^T/sqrt(D), h^{l+1} = phi(h^l) W_l^T/sqrt(N),
/// s = phi(h^L) w^T / (gamma0 N), identity readout.
pub fn forward(
    params: &MlpParams,
    inputs: &Array2<f64>,
    gamma0: f64,
    activation: Activation,
) -> ForwardPass {
    let d = params.input_dim as f64;
    let n = params.width as f64;
    let mut preactivations = Vec::with_capacity(params.depth);
    let mut h = inputs.dot(&params.weights[0].t()).mapv(|v| v / d.sqrt());
    preactivations.push(h.clone());
    for layer in 1..params.depth {
        let f = h.mapv(|v| activation.apply(v));
        h = f.dot(&params.weights[layer].t()).mapv(|v| v / n.sqrt());
        preactivations.push(h.clone());
    }
    let f_last = h.mapv(|v| activation.apply(v));
    let readout = params.weights[params.depth].row(0).to_owned();
    let outputs = f_last.dot(&readout).mapv(|v| v / (gamma0 * n));
    ForwardPass {
        preactivations,
        outputs,
    }
}

/// Manual backward pass for the squared loss L = 1/2 sum (y - s)^2.
/// Returns per-weight gradients in the same layout as the parameters.
pub fn backward(
    params: &MlpParams,
    inputs: &Array2<f64>,
    targets: &Array1<f64>,
    gamma0: f64,
    activation: Activation,
) -> (Vec<Array2<f64>>, f64) {
    let pass = forward(params, inputs, gamma0, activation);
    let n = params.width as f64;
    let d = params.input_dim as f64;
    let delta = targets - &pass.outputs;
    let loss = 0.5 * delta.iter().map(|v| v * v).sum::<f64>();

    let mut grads: Vec<Array2<f64>> = params
        .weights
        .iter()
        .map(|w| Array2::zeros(w.raw_dim()))
        .collect();

    // Readout gradient: dL/dw = -sum_mu Delta_mu phi(h^L_mu) / (gamma0 N).
    let f_last = pass.preactivations[params.depth - 1].mapv(|v| activation.apply(v));
    {
        let g = f_last
            .t()
            .dot(&delta)
            .mapv(|v| -v / (gamma0 * n));
        grads[params.depth].row_mut(0).assign(&g);
    }

    // Backpropagated dL/dh^l, P x N.
    let readout = params.weights[params.depth].row(0).to_owned();
    let mut v = pass.preactivations[params.depth - 1].mapv(|x| activation.derivative(x));
    for (mu, mut row) in v.rows_mut().into_iter().enumerate() {
        let c = -delta[mu] / (gamma0 * n);
        for (elem, w) in row.iter_mut().zip(readout.iter()) {
            *elem *= c * w;
        }
    }

    for layer in (1..params.depth).rev() {
        let f_prev = pass.preactivations[layer - 1].mapv(|x| activation.apply(x));
        grads[layer] = v.t().dot(&f_prev).mapv(|g| g / n.sqrt());
        let back = v.dot(&params.weights[layer]).mapv(|g| g / n.sqrt());
        let dphi = pass.preactivations[layer - 1].mapv(|x| activation.derivative(x));
        v = &back * &dphi;
    }
    grads[0] = v.t().dot(inputs).mapv(|g| g / d.sqrt());

    (grads, loss)
}

/// Knobs shared by both training loops. `sample_every`/`thermalize_after`
/// only matter for the Langevin averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub thermalize_after: usize,
    pub sample_every: usize,
    pub seed: u64,
    /// Layer whose preactivations are pooled into the histogram samples.
    pub record_layer: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 5e-4,
            steps: 20_000,
            thermalize_after: 5_000,
            sample_every: 1_000,
            seed: 0,
            record_layer: 1,
        }
    }
}

/// Posterior averages collected from a Langevin run.
#[derive(Debug, Clone)]
pub struct LangevinOutput {
    pub params: MlpParams,
    /// Posterior-mean readouts on the eval inputs.
    pub avg_predictions: Array1<f64>,
    /// Posterior-mean feature kernels Phi^1..Phi^L over the eval inputs.
    pub avg_phi: Vec<Array2<f64>>,
    /// Pooled preactivation samples of `record_layer` (eval rows x neurons,
    /// one block per checkpoint).
    pub preactivation_checkpoints: Vec<Array2<f64>>,
    pub checkpoints: usize,
    pub losses: Vec<f64>,
}

/// Full-batch Langevin dynamics:
/// theta <- theta - eta gamma0^2 N grad - eta (lambda/beta) theta
///          + sqrt(2 eta / beta) xi.
/// After `thermalize_after` steps, predictions and kernels on `eval_inputs`
/// are averaged every `sample_every` steps.
pub fn train_langevin(
    params: MlpParams,
    train_inputs: &Array2<f64>,
    train_targets: &Array1<f64>,
    eval_inputs: &Array2<f64>,
    hp: &Hyperparams,
    cfg: &TrainConfig,
) -> Result<LangevinOutput> {
    let mut params = params;
    let n = params.width as f64;
    let scale = hp.gamma0 * hp.gamma0 * n;
    let beta_inv = hp.beta.inverse();
    let decay = hp.lambda_last() * beta_inv;
    let noise_sd = (2.0 * cfg.eta * beta_inv).sqrt();
    let mut rng = sampling::rng_from_seed(cfg.seed);

    let eval_rows = eval_inputs.nrows();
    let mut avg_predictions = Array1::<f64>::zeros(eval_rows);
    let mut avg_phi: Vec<Array2<f64>> =
        vec![Array2::zeros((eval_rows, eval_rows)); params.depth];
    let mut preactivation_checkpoints = Vec::new();
    let mut checkpoints = 0usize;
    let mut losses = Vec::new();

    for step in 0..cfg.steps {
        let (grads, loss) = backward(&params, train_inputs, train_targets, hp.gamma0, hp.activation);
        if !loss.is_finite() {
            return Err(AkernError::Diverged {
                step,
                reason: "training loss is not finite".into(),
            });
        }
        if step % cfg.sample_every == 0 {
            losses.push(loss);
        }
        for (w, g) in params.weights.iter_mut().zip(grads.iter()) {
            for (we, ge) in w.iter_mut().zip(g.iter()) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *we -= cfg.eta * scale * ge + cfg.eta * decay * *we - noise_sd * noise;
            }
        }
        if step >= cfg.thermalize_after && (step - cfg.thermalize_after) % cfg.sample_every == 0 {
            let pass = forward(&params, eval_inputs, hp.gamma0, hp.activation);
            avg_predictions = &avg_predictions + &pass.outputs;
            for layer in 0..params.depth {
                let f = pass.preactivations[layer].mapv(|v| hp.activation.apply(v));
                let phi = f.dot(&f.t()).mapv(|v| v / n);
                avg_phi[layer] = &avg_phi[layer] + &phi;
            }
            preactivation_checkpoints.push(pass.preactivations[cfg.record_layer - 1].clone());
            checkpoints += 1;
        }
    }
    if checkpoints == 0 {
        return Err(AkernError::InvalidArgument(
            "no posterior samples collected; lower thermalize_after".into(),
        ));
    }
    let c = checkpoints as f64;
    avg_predictions.mapv_inplace(|v| v / c);
    for phi in avg_phi.iter_mut() {
        phi.mapv_inplace(|v| v / c);
    }
    Ok(LangevinOutput {
        params,
        avg_predictions,
        avg_phi,
        preactivation_checkpoints,
        checkpoints,
        losses,
    })
}

/// Deterministic gradient descent with weight decay:
/// theta <- theta - eta gamma0^2 N grad - eta lambda theta.
pub fn train_gd_weight_decay(
    params: MlpParams,
    train_inputs: &Array2<f64>,
    train_targets: &Array1<f64>,
    hp: &Hyperparams,
    cfg: &TrainConfig,
) -> Result<(MlpParams, Vec<f64>)> {
    let mut params = params;
    let n = params.width as f64;
    let scale = hp.gamma0 * hp.gamma0 * n;
    let decay = hp.lambda_last();
    let mut losses = Vec::new();
    for step in 0..cfg.steps {
        let (grads, loss) = backward(&params, train_inputs, train_targets, hp.gamma0, hp.activation);
        if !loss.is_finite() {
            return Err(AkernError::Diverged {
                step,
                reason: "training loss is not finite".into(),
            });
        }
        if step % cfg.sample_every == 0 {
            losses.push(loss);
        }
        for (w, g) in params.weights.iter_mut().zip(grads.iter()) {
            for (we, ge) in w.iter_mut().zip(g.iter()) {
                *we -= cfg.eta * scale * ge + cfg.eta * decay * *we;
            }
        }
    }
    Ok((params, losses))
}

/// Feature, gradient, and tangent kernels of a parameter point.
#[derive(Debug, Clone)]
pub struct EmpiricalKernels {
    /// Phi^0..Phi^L.
    pub phi: Vec<Array2<f64>>,
    /// G^1..G^{L+1}; the last is all ones by construction.
    pub g: Vec<Array2<f64>>,
    /// K = sum_l G^{l+1} (.) Phi^l.
    pub ntk: Array2<f64>,
}

/// Kernels at the given parameters: Phi^l = phi(h^l) phi(h^l)^T / N, the
/// backpropagated gradient kernels with the N gamma0 ds/dh scaling, and
/// their tangent assembly.
pub fn empirical_kernels(
    params: &MlpParams,
    inputs: &Array2<f64>,
    gamma0: f64,
    activation: Activation,
) -> EmpiricalKernels {
    let n = params.width as f64;
    let p = inputs.nrows();
    let pass = forward(params, inputs, gamma0, activation);

    let mut phi = Vec::with_capacity(params.depth + 1);
    phi.push(inputs.dot(&inputs.t()).mapv(|v| v / params.input_dim as f64));
    for layer in 0..params.depth {
        let f = pass.preactivations[layer].mapv(|v| activation.apply(v));
        phi.push(f.dot(&f.t()).mapv(|v| v / n));
    }

    // g^L = w (.) phi'(h^L) per pattern; earlier layers backpropagate with
    // the 1/sqrt(N) factors. The N gamma0 scaling of ds/dh makes every
    // G^l order one.
    let readout = params.weights[params.depth].row(0).to_owned();
    let mut g_mats: Vec<Array2<f64>> = Vec::with_capacity(params.depth + 1);
    let mut g_field = pass.preactivations[params.depth - 1].mapv(|x| activation.derivative(x));
    for mut row in g_field.rows_mut() {
        for (elem, w) in row.iter_mut().zip(readout.iter()) {
            *elem *= *w;
        }
    }
    g_mats.push(g_field.dot(&g_field.t()).mapv(|v| v / n));
    let mut current = g_field;
    for layer in (1..params.depth).rev() {
        let back = current.dot(&params.weights[layer]).mapv(|v| v / n.sqrt());
        let dphi = pass.preactivations[layer - 1].mapv(|x| activation.derivative(x));
        current = &back * &dphi;
        g_mats.push(current.dot(&current.t()).mapv(|v| v / n));
    }
    g_mats.reverse(); // now G^1..G^L
    g_mats.push(Array2::ones((p, p))); // G^{L+1}

    let mut ntk = Array2::<f64>::zeros((p, p));
    for layer in 0..=params.depth {
        ntk = &ntk + &(&g_mats[layer] * &phi[layer]);
    }

    EmpiricalKernels {
        phi,
        g: g_mats,
        ntk,
    }
}

/// Pooled histogram of layer preactivations across neurons for the chosen
/// patterns, normalized to unit mass.
pub fn preactivation_histogram(
    params: &MlpParams,
    inputs: &Array2<f64>,
    gamma0: f64,
    activation: Activation,
    layer: usize,
    patterns: &[usize],
    bins: usize,
    range: (f64, f64),
) -> Result<(Vec<f64>, Vec<f64>)> {
    if layer == 0 || layer > params.depth {
        return Err(AkernError::InvalidArgument(format!(
            "layer {layer} outside 1..={}",
            params.depth
        )));
    }
    let pass = forward(params, inputs, gamma0, activation);
    let h = &pass.preactivations[layer - 1];
    let mut samples = Vec::with_capacity(patterns.len() * params.width);
    for &mu in patterns {
        samples.extend(h.row(mu).iter().copied());
    }
    Ok(crate::stats::histogram(&samples, bins, range.0, range.1))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    depth: usize,
    width: usize,
    input_dim: usize,
    init_seed: u64,
    shapes: Vec<(usize, usize)>,
}

/// Flat little-endian f64 serialization of the weights.
pub fn params_to_bytes(params: &MlpParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.parameter_count() * 8);
    for w in &params.weights {
        for v in w.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// JSON shape manifest describing a flat checkpoint.
pub fn params_manifest_json(params: &MlpParams) -> String {
    let manifest = CheckpointManifest {
        depth: params.depth,
        width: params.width,
        input_dim: params.input_dim,
        init_seed: params.init_seed,
        shapes: params.weights.iter().map(|w| w.dim()).collect(),
    };
    serde_json::to_string_pretty(&manifest).expect("manifest serializes")
}

/// Save parameters as a flat little-endian f64 binary next to a JSON shape
/// manifest (`<path>.json`).
pub fn save_params(params: &MlpParams, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&params_to_bytes(params))?;
    std::fs::write(path.with_extension("json"), params_manifest_json(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<MlpParams> {
    let manifest_path = path.with_extension("json");
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
            .map_err(|e| AkernError::Config(format!("bad checkpoint manifest: {e}")))?;
    let mut file = std::fs::File::open(path)?;
    let mut weights = Vec::with_capacity(manifest.shapes.len());
    let mut buf = [0u8; 8];
    for &(r, c) in &manifest.shapes {
        let mut w = Array2::<f64>::zeros((r, c));
        for v in w.iter_mut() {
            file.read_exact(&mut buf).map_err(|e| AkernError::DataFormat {
                offset: 0,
                message: format!("checkpoint truncated: {e}"),
            })?;
            *v = f64::from_le_bytes(buf);
        }
        weights.push(w);
    }
    Ok(MlpParams {
        weights,
        width: manifest.width,
        input_dim: manifest.input_dim,
        depth: manifest.depth,
        init_seed: manifest.init_seed,
    })
}

/// Single-conv-layer network over non-overlapping patches: shared filter
/// bank W0 (N x k) and per-position readout (N x A).
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub filters: Array2<f64>,
    pub readout: Array2<f64>,
    pub width: usize,
    pub patch_dim: usize,
    pub patch_count: usize,
}

impl ConvParams {
    pub fn init(width: usize, patch_dim: usize, patch_count: usize, seed: u64) -> Self {
        let mut rng = sampling::rng_from_seed(seed);
        Self {
            filters: sampling::standard_normal_matrix(width, patch_dim, &mut rng),
            readout: sampling::standard_normal_matrix(width, patch_count, &mut rng),
            width,
            patch_dim,
            patch_count,
        }
    }
}

/// Conv tangent kernel at the given parameters over patch rows
/// (row mu*A + a holds patch a of pattern mu):
/// K[mu,nu] = sum_ab Phi0 G^1 + sum_a Phi^1[mu a, nu a].
pub fn conv_empirical_ntk(
    params: &ConvParams,
    patch_rows: &Array2<f64>,
    p_total: usize,
) -> Array2<f64> {
    let n = params.width as f64;
    let a = params.patch_count;
    let k = params.patch_dim as f64;
    // h[(mu,a), i] = patch . filter_i / sqrt(k)
    let h = patch_rows.dot(&params.filters.t()).mapv(|v| v / k.sqrt());
    let f = h.mapv(|v| v.max(0.0));
    let mut g = h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    for (row_idx, mut row) in g.rows_mut().into_iter().enumerate() {
        let pos = row_idx % a;
        for (elem, w) in row.iter_mut().zip(params.readout.column(pos).iter()) {
            *elem *= *w;
        }
    }
    let phi0 = patch_rows.dot(&patch_rows.t()).mapv(|v| v / k);
    let phi1 = f.dot(&f.t()).mapv(|v| v / n);
    let g1 = g.dot(&g.t()).mapv(|v| v / n);
    let prod = &phi0 * &g1;
    let mut out = Array2::<f64>::zeros((p_total, p_total));
    for mu in 0..p_total {
        for nu in 0..p_total {
            let mut acc = 0.0;
            for pa in 0..a {
                acc += phi1[[mu * a + pa, nu * a + pa]];
                for pb in 0..a {
                    acc += prod[[mu * a + pa, nu * a + pb]];
                }
            }
            out[[mu, nu]] = acc;
        }
    }
    crate::linalg::symmetrize(&mut out);
    out
}

/// Mean of the squared readout row, used by width-scaling checks.
pub fn readout_norm(params: &MlpParams) -> f64 {
    let w = params.weights[params.depth].row(0);
    w.iter().map(|v| v * v).sum::<f64>() / params.width as f64
}
