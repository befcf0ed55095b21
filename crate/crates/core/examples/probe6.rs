use akern_core::anbk::{self, AnbkSolverConfig};
use akern_core::antk::{self, DmftConfig, FieldInit};
use akern_core::config::RunConfig;
use akern_core::hyper::{Activation, Beta, Hyperparams};
use akern_core::kernel::{self, KernelKind, KernelMatrix};
use akern_core::oracle;
use akern_core::runner;
use akern_core::sampling::SamplerConfig;
use akern_core::stats;
use ndarray::{s, Array2};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let config = RunConfig::from_json(r#"{
        "seed": 606,
        "data": {"synthetic": {"p": 20, "p_test": 20, "d": 64}},
        "hyper": {"gamma0": 0.5, "beta": 50.0, "lambda": 1.0, "depth": 1, "activation": "relu"}
    }"#).unwrap();
    let data = runner::resolve_data(&config, None).unwrap();
    let hp = Hyperparams::uniform(0.5, Beta::Finite(50.0), 1.0, 1, Activation::Relu).unwrap();
    let p = data.train.len();
    let mut eval = Array2::<f64>::zeros((p + 20, 64));
    eval.slice_mut(s![..p, ..]).assign(data.train.inputs());
    eval.slice_mut(s![p.., ..]).assign(&data.test_inputs);

    // aNBK with a large batch, fixed budget.
    let solver = AnbkSolverConfig {
        inner_steps: 20, max_outer_steps: 800, step_phi: 1.5e-2, step_phi_hat: 8e-2,
        residual_tol: 1e-4, ramp_steps: 200,
        sampler: SamplerConfig { batch_size: 24_000, seed: 630, jitter: 1e-10 },
        analytic_linear: true,
    };
    let (stack, diag) = anbk::solve_anbk(&data.train, &hp, &solver, None).unwrap();
    eprintln!("[{:.0?}] anbk: res={:.3} iters={}", t0.elapsed(), diag.final_residual, diag.outer_iterations);
    let ext = anbk::test_kernel_extension(&stack, &data.train, &data.test_inputs, &hp,
        &SamplerConfig { batch_size: 150_000, seed: 631, jitter: 1e-10 }, true).unwrap();
    let theory = anbk::predict_anbk(&stack, &ext.k_test, data.train.targets(), &hp).unwrap();

    // Langevin.
    let params = oracle::MlpParams::init(1, 1024, 64, 620);
    let lcfg = oracle::TrainConfig { eta: 5e-4, steps: 20_000, thermalize_after: 5_000,
        sample_every: 500, seed: 621, record_layer: 1 };
    let lang = oracle::train_langevin(params.clone(), data.train.inputs(), data.train.targets(), &eval, &hp, &lcfg).unwrap();
    eprintln!("[{:.0?}] langevin done ({} checkpoints)", t0.elapsed(), lang.checkpoints);
    let net_test: Vec<f64> = lang.avg_predictions.slice(s![p..]).to_vec();
    let r2_a = stats::r_squared(&theory.test_predictions.to_vec(), &net_test);
    let emp_phi1 = KernelMatrix::new(KernelKind::Feature, lang.avg_phi[0].slice(s![..p, ..p]).to_owned()).unwrap();
    let align = kernel::kernel_alignment(stack.phi(1), &emp_phi1).unwrap();

    // DMFT + GD runs.
    let dmft_cfg = DmftConfig { steps: 15_000, eta: 1.5e-3, samples: 8_000, seed: 640,
        record_every: 3_000, init: FieldInit::Gaussian, convergence_tol: 1e-10 };
    let dmft = antk::solve_dmft_two_layer(&data.train, Some(&data.test_inputs), &hp, &dmft_cfg).unwrap();
    let antk_pred = antk::predict_antk(&dmft.kernel, p, data.train.targets(), &hp).unwrap();
    let gd_cfg = oracle::TrainConfig { eta: 1e-3, steps: 20_000, thermalize_after: 0,
        sample_every: 2_000, seed: 641, record_layer: 1 };
    let (gd1, _) = oracle::train_gd_weight_decay(params.clone(), data.train.inputs(), data.train.targets(), &hp, &gd_cfg).unwrap();
    let gd1_test: Vec<f64> = oracle::forward(&gd1, &eval, 0.5, Activation::Relu).outputs.slice(s![p..]).to_vec();
    let r2_b = stats::r_squared(&antk_pred.test_predictions.to_vec(), &gd1_test);
    let hp0 = Hyperparams::uniform(0.5, Beta::Infinite, 0.0, 1, Activation::Relu).unwrap();
    let (gd0, _) = oracle::train_gd_weight_decay(params, data.train.inputs(), data.train.targets(), &hp0, &gd_cfg).unwrap();
    let gd0_test: Vec<f64> = oracle::forward(&gd0, &eval, 0.5, Activation::Relu).outputs.slice(s![p..]).to_vec();
    let r2_d_same_ref = stats::r_squared(&antk_pred.test_predictions.to_vec(), &gd0_test);
    let kern0 = oracle::empirical_kernels(&gd0, &eval, 0.5, Activation::Relu);
    let reg0 = antk::predict_antk(&kern0.ntk, p, data.train.targets(), &hp0).unwrap();
    let r2_d_own = stats::r_squared(&reg0.test_predictions.to_vec(), &gd0_test);

    // Density (criterion 7).
    let mut net_samples = Vec::new();
    for ckpt in &lang.preactivation_checkpoints { net_samples.extend(ckpt.row(0).iter().copied()); }
    let (pts, w) = anbk::preactivation_samples(&stack, 1, 0, &hp,
        &SamplerConfig { batch_size: 100_000, seed: 650, jitter: 1e-10 }).unwrap();
    let ks = stats::ks_statistic_weighted(&net_samples, &pts, &w);

    eprintln!("[{:.0?}] all done", t0.elapsed());
    println!("(a) R2 anbk vs langevin = {r2_a:.4}");
    println!("(c) alignment           = {align:.4}");
    println!("(b) R2 antk vs gd(l=1)  = {r2_b:.4}");
    println!("(d) R2 antk vs gd(l=0)  = {r2_d_same_ref:.4}  [gap {:.4}]", r2_b - r2_d_same_ref);
    println!("(d') R2 own-kernel l=0  = {r2_d_own:.4}");
    println!("(7) KS distance         = {ks:.4}");
    println!("anbk test preds: {:?}", &theory.test_predictions.to_vec()[..6]);
    println!("net  test preds: {:?}", &net_test[..6]);
}
