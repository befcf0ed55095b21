//! Subcommand implementations behind the CLI: each run resolves its data
//! and hyperparameters from one config, executes a solver, and commits an
//! output directory (results, kernels, trajectories, densities) together
//! with a manifest. Nothing is written until the run has finished, so a
//! failed run leaves no partial, unmanifested output behind.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2};

use crate::anbk::{self, AnbkSolverConfig};
use crate::antk::{self, DmftConfig};
use crate::config::{
    CompareMethod, DataConfig, OracleMode, RunConfig,
};
use crate::data::{self};
use crate::dataset::Dataset;
use crate::error::{AkernError, Result};
use crate::hyper::{Activation, Hyperparams};
use crate::kernel::{self, KernelKind, KernelMatrix, KernelStack};
use crate::lazy;
use crate::linearnet;
use crate::manifest::Manifest;
use crate::oracle;
use crate::sampling::{self, SamplerConfig};
use crate::stats;

/// Exit-code contract of the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    /// Exit 0.
    Success,
    /// Exit 4: results were written but a solver stopped at its iteration
    /// budget without meeting its tolerance.
    NonConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Anbk,
    Antk,
    Linear,
    Lazy,
    Oracle,
    Compare,
    FixedPoint,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Anbk => "anbk",
            Command::Antk => "antk",
            Command::Linear => "linear",
            Command::Lazy => "lazy",
            Command::Oracle => "oracle",
            Command::Compare => "compare",
            Command::FixedPoint => "fixedpoint",
        }
    }
}

/// Staged output files, committed atomically at the end of a run.
struct OutputStage {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputStage {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn add(&mut self, relative: &str, bytes: Vec<u8>) {
        self.files.push((relative.to_string(), bytes));
    }

    fn add_kernel(&mut self, name: &str, k: &KernelMatrix) -> Result<()> {
        let mut csv = Vec::new();
        kernel::write_kernel_csv(k, &mut csv)?;
        self.add(&format!("kernels/{name}.csv"), csv);
        let env = kernel::KernelEnvelope::from(k);
        let json =
            serde_json::to_vec_pretty(&env).map_err(|e| AkernError::Config(e.to_string()))?;
        self.add(&format!("kernels/{name}.json"), json);
        Ok(())
    }

    fn commit(self, out_dir: &Path, manifest: &mut Manifest) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        for (rel, bytes) in &self.files {
            let path = out_dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, bytes)?;
            manifest.note_output(rel);
        }
        manifest.write(out_dir)?;
        Ok(())
    }
}

/// One line of results.csv.
struct ResultRow {
    method: String,
    p: usize,
    gamma0: f64,
    test_loss: f64,
    train_loss: f64,
    runtime_s: f64,
}

fn results_csv(rows: &[ResultRow]) -> Vec<u8> {
    let mut out = String::from("method,p,gamma0,test_loss,train_loss,runtime_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.3}\n",
            r.method, r.p, r.gamma0, r.test_loss, r.train_loss, r.runtime_s
        ));
    }
    out.into_bytes()
}

fn predictions_csv(
    train_targets: &Array1<f64>,
    train_preds: &Array1<f64>,
    test_targets: &Array1<f64>,
    test_preds: &Array1<f64>,
) -> Vec<u8> {
    let mut out = String::from("split,index,target,prediction\n");
    for (i, (t, p)) in train_targets.iter().zip(train_preds.iter()).enumerate() {
        out.push_str(&format!("train,{i},{t:.16e},{p:.16e}\n"));
    }
    for (i, (t, p)) in test_targets.iter().zip(test_preds.iter()).enumerate() {
        out.push_str(&format!("test,{i},{t:.16e},{p:.16e}\n"));
    }
    out.into_bytes()
}

/// Resolved data for one run: train set plus held-out inputs/targets.
pub struct ResolvedData {
    pub train: Dataset,
    pub test_inputs: Array2<f64>,
    pub test_targets: Array1<f64>,
}

/// Materialize the data section. Train and test are disjoint by
/// construction: one balanced pool of size p + p_test is drawn and split.
pub fn resolve_data(config: &RunConfig, p_override: Option<usize>) -> Result<ResolvedData> {
    let seed = sampling::derive_seed(config.seed, "data", 0);
    let (pool, p, p_test) = match &config.data {
        DataConfig::Synthetic {
            p,
            p_test,
            d,
            labels,
        } => {
            // Whitened train rows. Test rows are noisy copies of train
            // rows (renormalized to |x| = sqrt(D)) carrying the source
            // labels: being orthogonal to the whole frame would make every
            // test prediction identical, while noisy copies give the task
            // a generalization structure the kernels can actually use.
            let p = p_override.unwrap_or(*p);
            let train = data::synth_whitened(p, *d, seed, *labels)?;
            if *p_test == 0 {
                (train, p, 0)
            } else {
                let test_seed = sampling::derive_seed(config.seed, "data-test", 0);
                let noise = data::synth_sphere_rows(*p_test, *d, test_seed)?;
                let mut all = Array2::<f64>::zeros((p + p_test, *d));
                all.slice_mut(s![..p, ..]).assign(train.inputs());
                let mut targets = Array1::<f64>::zeros(p + p_test);
                targets.slice_mut(s![..p]).assign(train.targets());
                for ti in 0..*p_test {
                    let src = ti % p;
                    let mut row = train.inputs().row(src).to_owned() + noise.row(ti);
                    let norm = row.dot(&row).sqrt();
                    row.mapv_inplace(|v| v * (*d as f64).sqrt() / norm);
                    all.row_mut(p + ti).assign(&row);
                    targets[p + ti] = train.targets()[src];
                }
                (Dataset::new(all, targets)?, p, *p_test)
            }
        }
        DataConfig::MnistIdx {
            images,
            labels,
            class_a,
            class_b,
            p,
            p_test,
        } => {
            let full = data::load_mnist_idx(images, labels)?;
            let p = p_override.unwrap_or(*p);
            let ds = data::two_class_subset(&full, *class_a, *class_b, p + p_test, seed)?;
            (ds, p, *p_test)
        }
        DataConfig::Cifar10 {
            batches,
            mode,
            class_a,
            class_b,
            p,
            p_test,
        } => {
            let full = data::load_cifar10_binary(batches, *mode)?;
            let p = p_override.unwrap_or(*p);
            let ds = data::two_class_subset(&full, *class_a, *class_b, p + p_test, seed)?;
            (ds, p, *p_test)
        }
    };
    if pool.len() != p + p_test {
        return Err(AkernError::Config(format!(
            "data pool has {} rows, expected {}",
            pool.len(),
            p + p_test
        )));
    }
    let train_rows: Vec<usize> = (0..p).collect();
    let train = pool.subset(&train_rows)?;
    let (test_inputs, test_targets) = if p_test == 0 {
        (
            Array2::<f64>::zeros((0, train.dim())),
            Array1::<f64>::zeros(0),
        )
    } else {
        let test_rows: Vec<usize> = (p..p + p_test).collect();
        let test = pool.subset(&test_rows)?;
        (test.inputs().clone(), test.targets().clone())
    };
    Ok(ResolvedData {
        train,
        test_inputs,
        test_targets,
    })
}

/// Dispatch a subcommand.
pub fn run(command: Command, config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    match command {
        Command::Anbk => run_anbk(config, out_dir),
        Command::Antk => run_antk(config, out_dir),
        Command::Linear => run_linear(config, out_dir),
        Command::Lazy => run_lazy(config, out_dir),
        Command::Oracle => run_oracle(config, out_dir),
        Command::Compare => run_compare(config, out_dir),
        Command::FixedPoint => run_fixedpoint(config, out_dir),
    }
}

fn run_anbk(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    let hp = config.hyper.build()?;
    let data = resolve_data(config, None)?;
    let mut manifest = Manifest::new("anbk", config.clone());
    let sampler_seed = sampling::derive_seed(config.seed, "anbk", 0);
    manifest.note_seed("anbk.sampler", sampler_seed);

    let solver = AnbkSolverConfig {
        inner_steps: config.anbk.inner_steps,
        max_outer_steps: config.anbk.max_outer_steps,
        step_phi: config.anbk.step_phi,
        step_phi_hat: config.anbk.step_phi_hat,
        residual_tol: config.anbk.residual_tol,
        ramp_steps: config.anbk.ramp_steps,
        sampler: SamplerConfig {
            batch_size: config.anbk.batch_size,
            seed: sampler_seed,
            jitter: 1e-10,
        },
        analytic_linear: config.anbk.analytic_linear,
    };
    let (stack, diag) = anbk::solve_anbk(&data.train, &hp, &solver, None)?;

    let mut stage = OutputStage::new();
    for layer in 0..=stack.depth() {
        stage.add_kernel(&format!("phi_{layer}"), stack.phi(layer))?;
    }
    for layer in 1..=stack.depth() {
        stage.add_kernel(&format!("phi_hat_{layer}"), stack.phi_hat(layer))?;
    }

    let mut trace = String::from("iteration,max_residual,action,min_ess\n");
    for row in &diag.trace {
        trace.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            row.iteration, row.max_residual, row.action, row.min_ess
        ));
    }
    stage.add("trace.csv", trace.into_bytes());

    // Tilted layer densities for the requested patterns.
    let grid = config.anbk.density_grid.values();
    for &pattern in &config.anbk.density_patterns {
        if pattern >= data.train.len() {
            continue;
        }
        let dens_cfg = SamplerConfig {
            batch_size: config.anbk.batch_size,
            seed: sampling::derive_seed(config.seed, "anbk-density", pattern as u64),
            jitter: 1e-10,
        };
        for layer in 1..=stack.depth() {
            let dens =
                anbk::preactivation_density(&stack, layer, pattern, &grid, &hp, &dens_cfg)?;
            let mut csv = String::from("h,density\n");
            for (x, d) in grid.iter().zip(dens.iter()) {
                csv.push_str(&format!("{x:.16e},{d:.16e}\n"));
            }
            stage.add(
                &format!("densities/layer{layer}_pattern{pattern}.csv"),
                csv.into_bytes(),
            );
        }
    }

    // Test extension and the kernel predictor.
    let mut rows = Vec::new();
    if data.test_inputs.nrows() > 0 {
        let ext_cfg = SamplerConfig {
            batch_size: config.anbk.batch_size,
            seed: sampling::derive_seed(config.seed, "anbk-test", 0),
            jitter: 1e-10,
        };
        let ext = anbk::test_kernel_extension(
            &stack,
            &data.train,
            &data.test_inputs,
            &hp,
            &ext_cfg,
            config.anbk.analytic_linear,
        )?;
        let pred = anbk::predict_anbk(&stack, &ext.k_test, data.train.targets(), &hp)?
            .score(&data.test_targets)?;
        stage.add(
            "predictions.csv",
            predictions_csv(
                data.train.targets(),
                &pred.train_predictions,
                &data.test_targets,
                &pred.test_predictions,
            ),
        );
        rows.push(ResultRow {
            method: "anbk".into(),
            p: data.train.len(),
            gamma0: hp.gamma0,
            test_loss: pred.test_loss.unwrap_or(f64::NAN),
            train_loss: pred.train_loss(data.train.targets()),
            runtime_s: started.elapsed().as_secs_f64(),
        });
    }
    stage.add("results.csv", results_csv(&rows));
    manifest.runtime_s = started.elapsed().as_secs_f64();
    stage.commit(out_dir, &mut manifest)?;
    Ok(if diag.converged {
        RunOutcome::Success
    } else {
        RunOutcome::NonConverged
    })
}

fn run_antk(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    let hp = config.hyper.build()?;
    let data = resolve_data(config, None)?;
    let mut manifest = Manifest::new("antk", config.clone());
    let seed = sampling::derive_seed(config.seed, "antk", 0);
    manifest.note_seed("antk.fields", seed);

    let cfg = DmftConfig {
        steps: config.antk.steps,
        eta: config.antk.eta,
        samples: config.antk.samples,
        seed,
        record_every: config.antk.record_every,
        init: config.antk.init,
        convergence_tol: config.antk.convergence_tol,
    };
    let test = (data.test_inputs.nrows() > 0).then_some(&data.test_inputs);
    let out = if config.antk.cnn {
        antk::solve_dmft_cnn_two_layer(&data.train, test, &hp, &cfg)?
    } else {
        antk::solve_dmft_two_layer(&data.train, test, &hp, &cfg)?
    };

    let mut stage = OutputStage::new();
    let mut traj = String::from("step,train_loss,delta_norm,phi1_trace,g1_trace\n");
    for r in &out.records {
        traj.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.step, r.train_loss, r.delta_norm, r.phi1_trace, r.g1_trace
        ));
    }
    stage.add("trajectory.csv", traj.into_bytes());

    stage.add_kernel(
        "phi_0",
        &KernelMatrix::new(KernelKind::Feature, out.phi0.clone())?,
    )?;
    stage.add_kernel(
        "phi_1",
        &KernelMatrix::new(KernelKind::Feature, out.phi1.clone())?,
    )?;
    stage.add_kernel(
        "g_1",
        &KernelMatrix::new(KernelKind::Gradient, out.g1.clone())?,
    )?;
    stage.add_kernel(
        "antk",
        &KernelMatrix::new(KernelKind::Tangent, out.kernel.clone())?,
    )?;

    // Final-field histograms for the first train pattern (preactivations)
    // and the first pregradient row.
    {
        let bins = config.antk.histogram_bins;
        let h_row: Vec<f64> = out.fields.h.row(0).to_vec();
        let z_row: Vec<f64> = out.fields.z.row(0).to_vec();
        let span = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, (hi + 1e-9).max(lo + 1e-9))
        };
        let (hlo, hhi) = span(&h_row);
        let (centers, density) = stats::histogram(&h_row, bins, hlo, hhi);
        let mut csv = String::from("h,density\n");
        for (c, d) in centers.iter().zip(density.iter()) {
            csv.push_str(&format!("{c:.16e},{d:.16e}\n"));
        }
        stage.add("histograms/preactivation.csv", csv.into_bytes());
        let (zlo, zhi) = span(&z_row);
        let (centers, density) = stats::histogram(&z_row, bins, zlo, zhi);
        let mut csv = String::from("z,density\n");
        for (c, d) in centers.iter().zip(density.iter()) {
            csv.push_str(&format!("{c:.16e},{d:.16e}\n"));
        }
        stage.add("histograms/pregradient.csv", csv.into_bytes());
    }

    let mut rows = Vec::new();
    if data.test_inputs.nrows() > 0 {
        let pred = antk::predict_antk(&out.kernel, data.train.len(), data.train.targets(), &hp)?
            .score(&data.test_targets)?;
        stage.add(
            "predictions.csv",
            predictions_csv(
                data.train.targets(),
                &pred.train_predictions,
                &data.test_targets,
                &pred.test_predictions,
            ),
        );
        // In-dynamics readouts for the same points, for cross-checking the
        // ridge form of the predictor.
        let mut csv = String::from("split,index,readout\n");
        for mu in 0..data.train.len() {
            csv.push_str(&format!("train,{mu},{:.16e}\n", out.readout[mu]));
        }
        for ti in 0..data.test_inputs.nrows() {
            csv.push_str(&format!(
                "test,{ti},{:.16e}\n",
                out.readout[data.train.len() + ti]
            ));
        }
        stage.add("readouts.csv", csv.into_bytes());
        rows.push(ResultRow {
            method: if config.antk.cnn { "cnn_antk" } else { "antk" }.into(),
            p: data.train.len(),
            gamma0: hp.gamma0,
            test_loss: pred.test_loss.unwrap_or(f64::NAN),
            train_loss: pred.train_loss(data.train.targets()),
            runtime_s: started.elapsed().as_secs_f64(),
        });
    }
    stage.add("results.csv", results_csv(&rows));
    manifest.runtime_s = started.elapsed().as_secs_f64();
    stage.commit(out_dir, &mut manifest)?;
    let converged = out.converged_step.is_some() || cfg.convergence_tol == 0.0;
    Ok(if converged {
        RunOutcome::Success
    } else {
        RunOutcome::NonConverged
    })
}

fn run_linear(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    let hp = config.hyper.build()?;
    if hp.activation != Activation::Linear {
        return Err(AkernError::Config(
            "the linear subcommand needs activation = linear".into(),
        ));
    }
    let data = resolve_data(config, None)?;
    let mut manifest = Manifest::new("linear", config.clone());

    let profile =
        linearnet::solve_whitened_overlaps(hp.gamma0, hp.beta, hp.depth, config.linear.tol)?;
    let mut csv = String::from("layer,c,c_hat\n");
    for layer in 0..hp.depth {
        csv.push_str(&format!(
            "{},{:.16e},{:.16e}\n",
            layer + 1,
            profile.c[layer],
            profile.c_hat[layer]
        ));
    }
    let mut stage = OutputStage::new();
    stage.add("overlaps.csv", csv.into_bytes());
    stage.add(
        "chi.csv",
        format!("chi\n{:.16e}\n", profile.chi).into_bytes(),
    );

    let mut converged = true;
    let mut rows = Vec::new();
    if config.linear.matrix_solver {
        let phi0 = kernel::data_gram(&data.train);
        let sol = linearnet::solve_deep_linear(
            phi0.entries(),
            data.train.targets(),
            &hp,
            config.linear.damping,
            config.linear.tol,
            config.linear.max_iter,
        )?;
        converged = sol.converged;
        for (layer, phi) in sol.phi.iter().enumerate() {
            stage.add_kernel(
                &format!("phi_{layer}"),
                &KernelMatrix::new(KernelKind::Feature, phi.clone())?,
            )?;
        }
        for (idx, dual) in sol.phi_hat.iter().enumerate() {
            stage.add_kernel(
                &format!("phi_hat_{}", idx + 1),
                &KernelMatrix::new(KernelKind::Dual, dual.clone())?,
            )?;
        }
        if data.test_inputs.nrows() > 0 {
            let stack = KernelStack::new(
                sol.phi
                    .iter()
                    .map(|m| KernelMatrix::new(KernelKind::Feature, m.clone()))
                    .collect::<Result<Vec<_>>>()?,
                sol.phi_hat
                    .iter()
                    .map(|m| KernelMatrix::new(KernelKind::Dual, m.clone()))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let ext = anbk::test_kernel_extension(
                &stack,
                &data.train,
                &data.test_inputs,
                &hp,
                &SamplerConfig::default(),
                true,
            )?;
            let pred = anbk::predict_anbk(&stack, &ext.k_test, data.train.targets(), &hp)?
                .score(&data.test_targets)?;
            stage.add(
                "predictions.csv",
                predictions_csv(
                    data.train.targets(),
                    &pred.train_predictions,
                    &data.test_targets,
                    &pred.test_predictions,
                ),
            );
            rows.push(ResultRow {
                method: "deep_linear".into(),
                p: data.train.len(),
                gamma0: hp.gamma0,
                test_loss: pred.test_loss.unwrap_or(f64::NAN),
                train_loss: pred.train_loss(data.train.targets()),
                runtime_s: started.elapsed().as_secs_f64(),
            });
        }
    }
    stage.add("results.csv", results_csv(&rows));
    manifest.runtime_s = started.elapsed().as_secs_f64();
    stage.commit(out_dir, &mut manifest)?;
    Ok(if converged {
        RunOutcome::Success
    } else {
        RunOutcome::NonConverged
    })
}

fn run_lazy(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    let hp = config.hyper.build()?;
    let data = resolve_data(config, None)?;
    let mut manifest = Manifest::new("lazy", config.clone());
    let seed = sampling::derive_seed(config.seed, "lazy", 0);
    manifest.note_seed("lazy.mc", seed);
    let mc = SamplerConfig {
        batch_size: config.lazy.batch_size,
        seed,
        jitter: 1e-10,
    };

    let p = data.train.len();
    let p_test = data.test_inputs.nrows();
    let mut all = Array2::<f64>::zeros((p + p_test, data.train.dim()));
    all.slice_mut(s![..p, ..]).assign(data.train.inputs());
    if p_test > 0 {
        all.slice_mut(s![p.., ..]).assign(&data.test_inputs);
    }
    let joint_gram = kernel::gram_of_rows(&all);
    let phis = lazy::nngp_kernels(&joint_gram, hp.depth, hp.activation, &mc)?;
    let ntk = lazy::ntk_kernel(&joint_gram, hp.depth, hp.activation, &mc)?;

    let mut stage = OutputStage::new();
    for (layer, phi) in phis.iter().enumerate() {
        stage.add_kernel(
            &format!("nngp_{layer}"),
            &KernelMatrix::new(KernelKind::Feature, phi.clone())?,
        )?;
    }
    stage.add_kernel("ntk", &KernelMatrix::new(KernelKind::Tangent, ntk.clone())?)?;

    let mut rows = Vec::new();
    if p_test > 0 {
        let last = &phis[hp.depth];
        let k_train = KernelMatrix::new(KernelKind::Feature, last.slice(s![..p, ..p]).to_owned())?;
        let k_test = last.slice(s![p.., ..p]).to_owned();
        let k_diag = last.slice(s![p.., p..]).diag().to_owned();
        let nngpk = kernel::kernel_ridge_predict(
            &k_train,
            &k_test,
            data.train.targets(),
            hp.anbk_ridge(),
        )?
        .score(&data.test_targets)?;
        let (gp, variance) = lazy::gp_predict(
            &k_train,
            &k_test,
            &k_diag,
            data.train.targets(),
            hp.beta,
        )?;
        let ntk_pred = antk::predict_antk(&ntk, p, data.train.targets(), &hp)?
            .score(&data.test_targets)?;

        stage.add(
            "predictions.csv",
            predictions_csv(
                data.train.targets(),
                &nngpk.train_predictions,
                &data.test_targets,
                &nngpk.test_predictions,
            ),
        );
        let mut var_csv = String::from("index,gp_mean,gp_variance\n");
        for i in 0..p_test {
            var_csv.push_str(&format!(
                "{i},{:.16e},{:.16e}\n",
                gp.test_predictions[i], variance[i]
            ));
        }
        stage.add("gp_variance.csv", var_csv.into_bytes());
        rows.push(ResultRow {
            method: "nngpk".into(),
            p,
            gamma0: 0.0,
            test_loss: nngpk.test_loss.unwrap_or(f64::NAN),
            train_loss: nngpk.train_loss(data.train.targets()),
            runtime_s: started.elapsed().as_secs_f64(),
        });
        rows.push(ResultRow {
            method: "ntk".into(),
            p,
            gamma0: 0.0,
            test_loss: ntk_pred.test_loss.unwrap_or(f64::NAN),
            train_loss: ntk_pred.train_loss(data.train.targets()),
            runtime_s: started.elapsed().as_secs_f64(),
        });
    }
    stage.add("results.csv", results_csv(&rows));
    manifest.runtime_s = started.elapsed().as_secs_f64();
    stage.commit(out_dir, &mut manifest)?;
    Ok(RunOutcome::Success)
}

fn run_oracle(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    let hp = config.hyper.build()?;
    let data = resolve_data(config, None)?;
    let mut manifest = Manifest::new("oracle", config.clone());
    let init_seed = sampling::derive_seed(config.seed, "oracle-init", 0);
    let train_seed = sampling::derive_seed(config.seed, "oracle-train", 0);
    manifest.note_seed("oracle.init", init_seed);
    manifest.note_seed("oracle.train", train_seed);

    let params = oracle::MlpParams::init(hp.depth, config.oracle.width, data.train.dim(), init_seed);
    let train_cfg = oracle::TrainConfig {
        eta: config.oracle.eta,
        steps: config.oracle.steps,
        thermalize_after: config.oracle.thermalize_after,
        sample_every: config.oracle.sample_every,
        seed: train_seed,
        record_layer: config.oracle.record_layer,
    };

    let p = data.train.len();
    let p_test = data.test_inputs.nrows();
    let mut eval = Array2::<f64>::zeros((p + p_test, data.train.dim()));
    eval.slice_mut(s![..p, ..]).assign(data.train.inputs());
    if p_test > 0 {
        eval.slice_mut(s![p.., ..]).assign(&data.test_inputs);
    }

    let mut stage = OutputStage::new();
    let mut rows = Vec::new();
    match config.oracle.mode {
        OracleMode::Langevin => {
            let out = oracle::train_langevin(
                params,
                data.train.inputs(),
                data.train.targets(),
                &eval,
                &hp,
                &train_cfg,
            )?;
            let mut losses = String::from("step,loss\n");
            for (i, l) in out.losses.iter().enumerate() {
                losses.push_str(&format!("{},{l:.16e}\n", i * train_cfg.sample_every));
            }
            stage.add("losses.csv", losses.into_bytes());
            for (layer, phi) in out.avg_phi.iter().enumerate() {
                stage.add_kernel(
                    &format!("phi_{}_empirical", layer + 1),
                    &KernelMatrix::new(KernelKind::Feature, phi.clone())?,
                )?;
            }
            // Pooled preactivation histogram across checkpoints for the
            // first train pattern.
            let mut samples = Vec::new();
            for ckpt in &out.preactivation_checkpoints {
                samples.extend(ckpt.row(0).iter().copied());
            }
            let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
            let (centers, density) =
                stats::histogram(&samples, config.oracle.histogram_bins, lo, hi);
            let mut csv = String::from("h,density\n");
            for (c, d) in centers.iter().zip(density.iter()) {
                csv.push_str(&format!("{c:.16e},{d:.16e}\n"));
            }
            stage.add("histograms/preactivation.csv", csv.into_bytes());

            let train_preds = out.avg_predictions.slice(s![..p]).to_owned();
            let test_preds = out.avg_predictions.slice(s![p..]).to_owned();
            stage.add(
                "predictions.csv",
                predictions_csv(
                    data.train.targets(),
                    &train_preds,
                    &data.test_targets,
                    &test_preds,
                ),
            );
            let test_loss = if p_test > 0 {
                test_preds
                    .iter()
                    .zip(data.test_targets.iter())
                    .map(|(f, y)| (f - y) * (f - y))
                    .sum::<f64>()
                    / p_test as f64
            } else {
                f64::NAN
            };
            let train_loss = train_preds
                .iter()
                .zip(data.train.targets().iter())
                .map(|(f, y)| (f - y) * (f - y))
                .sum::<f64>()
                / p as f64;
            rows.push(ResultRow {
                method: "oracle_langevin".into(),
                p,
                gamma0: hp.gamma0,
                test_loss,
                train_loss,
                runtime_s: started.elapsed().as_secs_f64(),
            });
        }
        OracleMode::GdWeightDecay => {
            let (trained, losses) = oracle::train_gd_weight_decay(
                params,
                data.train.inputs(),
                data.train.targets(),
                &hp,
                &train_cfg,
            )?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{},{l:.16e}\n", i * train_cfg.sample_every));
            }
            stage.add("losses.csv", csv.into_bytes());
            let kern = oracle::empirical_kernels(&trained, &eval, hp.gamma0, hp.activation);
            for (layer, phi) in kern.phi.iter().enumerate() {
                stage.add_kernel(
                    &format!("phi_{layer}_empirical"),
                    &KernelMatrix::new(KernelKind::Feature, phi.clone())?,
                )?;
            }
            stage.add_kernel(
                "ntk_empirical",
                &KernelMatrix::new(KernelKind::Tangent, kern.ntk.clone())?,
            )?;
            let pass = oracle::forward(&trained, &eval, hp.gamma0, hp.activation);
            let train_preds = pass.outputs.slice(s![..p]).to_owned();
            let test_preds = pass.outputs.slice(s![p..]).to_owned();
            stage.add(
                "predictions.csv",
                predictions_csv(
                    data.train.targets(),
                    &train_preds,
                    &data.test_targets,
                    &test_preds,
                ),
            );
            stage.add("checkpoint.bin", oracle::params_to_bytes(&trained));
            stage.add(
                "checkpoint.json",
                oracle::params_manifest_json(&trained).into_bytes(),
            );
            let test_loss = if p_test > 0 {
                test_preds
                    .iter()
                    .zip(data.test_targets.iter())
                    .map(|(f, y)| (f - y) * (f - y))
                    .sum::<f64>()
                    / p_test as f64
            } else {
                f64::NAN
            };
            let train_loss = train_preds
                .iter()
                .zip(data.train.targets().iter())
                .map(|(f, y)| (f - y) * (f - y))
                .sum::<f64>()
                / p as f64;
            rows.push(ResultRow {
                method: "oracle_gd".into(),
                p,
                gamma0: hp.gamma0,
                test_loss,
                train_loss,
                runtime_s: started.elapsed().as_secs_f64(),
            });
            stage.add("results.csv", results_csv(&rows));
            manifest.runtime_s = started.elapsed().as_secs_f64();
            stage.commit(out_dir, &mut manifest)?;
            return Ok(RunOutcome::Success);
        }
    }
    stage.add("results.csv", results_csv(&rows));
    manifest.runtime_s = started.elapsed().as_secs_f64();
    stage.commit(out_dir, &mut manifest)?;
    Ok(RunOutcome::Success)
}

fn run_compare(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    let mut manifest = Manifest::new("compare", config.clone());
    let mut rows = Vec::new();
    let mut stage = OutputStage::new();
    let mut all_converged = true;

    for &p in &config.compare.p_values {
        let data = resolve_data(config, Some(p))?;
        for &gamma0 in &config.compare.gamma0_values {
            for &method in &config.compare.methods {
                let cell_started = Instant::now();
                let mut hyper = config.hyper.clone();
                hyper.gamma0 = gamma0;
                let hp = hyper.build()?;
                let cell = format!("cells/{}_p{}_g{:.3}", method.name(), p, gamma0);
                let (test_loss, train_loss, preds, converged) =
                    run_compare_cell(config, &data, &hp, method)?;
                all_converged &= converged;
                stage.add(
                    &format!("{cell}/predictions.csv"),
                    predictions_csv(
                        data.train.targets(),
                        &preds.0,
                        &data.test_targets,
                        &preds.1,
                    ),
                );
                rows.push(ResultRow {
                    method: method.name().into(),
                    p,
                    gamma0,
                    test_loss,
                    train_loss,
                    runtime_s: cell_started.elapsed().as_secs_f64(),
                });
            }
        }
    }
    stage.add("results.csv", results_csv(&rows));
    manifest.runtime_s = started.elapsed().as_secs_f64();
    stage.commit(out_dir, &mut manifest)?;
    Ok(if all_converged {
        RunOutcome::Success
    } else {
        RunOutcome::NonConverged
    })
}

#[allow(clippy::type_complexity)]
fn run_compare_cell(
    config: &RunConfig,
    data: &ResolvedData,
    hp: &Hyperparams,
    method: CompareMethod,
) -> Result<(f64, f64, (Array1<f64>, Array1<f64>), bool)> {
    let p = data.train.len();
    let p_test = data.test_inputs.nrows();
    if p_test == 0 {
        return Err(AkernError::Config(
            "compare needs a nonzero test split".into(),
        ));
    }
    let mut all = Array2::<f64>::zeros((p + p_test, data.train.dim()));
    all.slice_mut(s![..p, ..]).assign(data.train.inputs());
    all.slice_mut(s![p.., ..]).assign(&data.test_inputs);

    let result = match method {
        CompareMethod::Nngpk => {
            let mc = SamplerConfig {
                batch_size: config.lazy.batch_size,
                seed: sampling::derive_seed(config.seed, "compare-lazy", p as u64),
                jitter: 1e-10,
            };
            let joint = kernel::gram_of_rows(&all);
            let phis = lazy::nngp_kernels(&joint, hp.depth, hp.activation, &mc)?;
            let last = &phis[hp.depth];
            let k_train =
                KernelMatrix::new(KernelKind::Feature, last.slice(s![..p, ..p]).to_owned())?;
            let k_test = last.slice(s![p.., ..p]).to_owned();
            let pred = kernel::kernel_ridge_predict(
                &k_train,
                &k_test,
                data.train.targets(),
                hp.anbk_ridge(),
            )?;
            (pred, true)
        }
        CompareMethod::Ntk => {
            let mc = SamplerConfig {
                batch_size: config.lazy.batch_size,
                seed: sampling::derive_seed(config.seed, "compare-lazy", p as u64),
                jitter: 1e-10,
            };
            let joint = kernel::gram_of_rows(&all);
            let ntk = lazy::ntk_kernel(&joint, hp.depth, hp.activation, &mc)?;
            let pred = antk::predict_antk(&ntk, p, data.train.targets(), hp)?;
            (pred, true)
        }
        CompareMethod::Anbk => {
            let solver = AnbkSolverConfig {
                inner_steps: config.anbk.inner_steps,
                max_outer_steps: config.anbk.max_outer_steps,
                step_phi: config.anbk.step_phi,
                step_phi_hat: config.anbk.step_phi_hat,
                residual_tol: config.anbk.residual_tol,
                ramp_steps: config.anbk.ramp_steps,
                sampler: SamplerConfig {
                    batch_size: config.anbk.batch_size,
                    seed: sampling::derive_seed(config.seed, "compare-anbk", p as u64),
                    jitter: 1e-10,
                },
                analytic_linear: config.anbk.analytic_linear,
            };
            let (stack, diag) = anbk::solve_anbk(&data.train, hp, &solver, None)?;
            let ext_cfg = SamplerConfig {
                batch_size: config.anbk.batch_size,
                seed: sampling::derive_seed(config.seed, "compare-anbk-test", p as u64),
                jitter: 1e-10,
            };
            let ext = anbk::test_kernel_extension(
                &stack,
                &data.train,
                &data.test_inputs,
                hp,
                &ext_cfg,
                config.anbk.analytic_linear,
            )?;
            let pred = anbk::predict_anbk(&stack, &ext.k_test, data.train.targets(), hp)?;
            (pred, diag.converged)
        }
        CompareMethod::Antk | CompareMethod::CnnAntk => {
            let cfg = DmftConfig {
                steps: config.antk.steps,
                eta: config.antk.eta,
                samples: config.antk.samples,
                seed: sampling::derive_seed(config.seed, "compare-antk", p as u64),
                record_every: config.antk.record_every,
                init: config.antk.init,
                convergence_tol: config.antk.convergence_tol,
            };
            let out = if method == CompareMethod::CnnAntk {
                antk::solve_dmft_cnn_two_layer(&data.train, Some(&data.test_inputs), hp, &cfg)?
            } else {
                antk::solve_dmft_two_layer(&data.train, Some(&data.test_inputs), hp, &cfg)?
            };
            let pred = antk::predict_antk(&out.kernel, p, data.train.targets(), hp)?;
            (pred, out.converged_step.is_some() || cfg.convergence_tol == 0.0)
        }
    };
    let (pred, converged) = result;
    let pred = pred.score(&data.test_targets)?;
    Ok((
        pred.test_loss.unwrap_or(f64::NAN),
        pred.train_loss(data.train.targets()),
        (pred.train_predictions, pred.test_predictions),
        converged,
    ))
}

fn run_fixedpoint(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    let mut manifest = Manifest::new("fixedpoint", config.clone());
    let mut csv = String::from(
        "gamma0,lambda,delta_theory,h2_theory,delta_dmft,h2_dmft,negative_mass,converged_step\n",
    );
    let single = Dataset::new(Array2::<f64>::ones((1, 1)), Array1::from_vec(vec![1.0]))?;
    for (gi, &gamma0) in config.fixedpoint.gamma0_values.iter().enumerate() {
        for (li, &lambda) in config.fixedpoint.lambda_values.iter().enumerate() {
            let hp = Hyperparams::uniform(
                gamma0,
                crate::hyper::Beta::Infinite,
                lambda,
                1,
                Activation::Relu,
            )?;
            let cfg = DmftConfig {
                steps: config.fixedpoint.steps,
                eta: config.fixedpoint.eta,
                samples: config.fixedpoint.samples,
                seed: sampling::derive_seed(
                    config.seed,
                    "fixedpoint",
                    (gi * config.fixedpoint.lambda_values.len() + li) as u64,
                ),
                record_every: config.fixedpoint.steps.max(1),
                init: crate::antk::FieldInit::Gaussian,
                convergence_tol: 1e-12,
            };
            let out = antk::solve_dmft_two_layer(&single, None, &hp, &cfg)?;
            let (d_star, h2_star) = antk::fixed_point_relu_single(gamma0, lambda)?;
            csv.push_str(&format!(
                "{gamma0:.16e},{lambda:.16e},{d_star:.16e},{h2_star:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                out.delta[0],
                antk::h_second_moment(&out, 0),
                antk::negative_mass(&out, 0, -0.01),
                out.converged_step.map(|s| s as i64).unwrap_or(-1),
            ));
        }
    }
    let mut stage = OutputStage::new();
    stage.add("fixedpoint.csv", csv.into_bytes());
    stage.add("results.csv", results_csv(&[]));
    manifest.runtime_s = started.elapsed().as_secs_f64();
    stage.commit(out_dir, &mut manifest)?;
    Ok(RunOutcome::Success)
}

/// Classify an error for the CLI's exit-code contract:
/// 1 config, 2 data, 3 solver.
pub fn exit_code_for(err: &AkernError) -> i32 {
    match err {
        AkernError::Config(_) | AkernError::InvalidArgument(_) | AkernError::DimensionMismatch(_) => 1,
        AkernError::Io(_) | AkernError::DataFormat { .. } | AkernError::UnsupportedPatchLayout(_) => 2,
        AkernError::Diverged { .. }
        | AkernError::NotPsd { .. }
        | AkernError::SingularSystem
        | AkernError::SingularLu(_)
        | AkernError::BracketFailure { .. }
        | AkernError::DegenerateKernel => 3,
    }
}

/// Parse a subcommand name.
pub fn parse_command(name: &str) -> Option<Command> {
    match name {
        "anbk" => Some(Command::Anbk),
        "antk" => Some(Command::Antk),
        "linear" => Some(Command::Linear),
        "lazy" => Some(Command::Lazy),
        "oracle" => Some(Command::Oracle),
        "compare" => Some(Command::Compare),
        "fixedpoint" => Some(Command::FixedPoint),
        _ => None,
    }
}
