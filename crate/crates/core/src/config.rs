//! Run-configuration schema: one JSON document with a root seed, a data
//! section, the hyperparameters, and one section per solver. Defaults are
//! chosen so that omitted sections still describe a runnable experiment.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::antk::FieldInit;
use crate::data::{CifarMode, LabelNorm};
use crate::error::{AkernError, Result};
use crate::hyper::{Activation, Beta, Hyperparams};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stream the run uses is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub hyper: HyperConfig,
    #[serde(default)]
    pub anbk: AnbkSection,
    #[serde(default)]
    pub antk: AntkSection,
    #[serde(default)]
    pub linear: LinearSection,
    #[serde(default)]
    pub lazy: LazySection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub fixedpoint: FixedPointSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AkernError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataConfig {
    /// Orthonormalized Gaussian rows with x.x/D = delta.
    Synthetic {
        p: usize,
        #[serde(default)]
        p_test: usize,
        d: usize,
        #[serde(default = "default_labels")]
        labels: LabelNorm,
    },
    /// IDX image/label pair reduced to a balanced two-class subset.
    MnistIdx {
        images: PathBuf,
        labels: PathBuf,
        class_a: usize,
        class_b: usize,
        p: usize,
        #[serde(default)]
        p_test: usize,
    },
    /// CIFAR-10 binary batches reduced to a balanced two-class subset.
    Cifar10 {
        batches: Vec<PathBuf>,
        mode: CifarMode,
        class_a: usize,
        class_b: usize,
        p: usize,
        #[serde(default)]
        p_test: usize,
    },
}

fn default_labels() -> LabelNorm {
    LabelNorm::PlusMinusOne
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub gamma0: f64,
    /// Finite float or the string "inf".
    pub beta: Beta,
    pub lambda: f64,
    pub depth: usize,
    pub activation: Activation,
}

impl HyperConfig {
    pub fn build(&self) -> Result<Hyperparams> {
        Hyperparams::uniform(
            self.gamma0,
            self.beta,
            self.lambda,
            self.depth,
            self.activation,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnbkSection {
    pub inner_steps: usize,
    pub max_outer_steps: usize,
    pub step_phi: f64,
    pub step_phi_hat: f64,
    pub residual_tol: f64,
    pub ramp_steps: usize,
    pub batch_size: usize,
    pub analytic_linear: bool,
    /// Patterns whose tilted layer densities are written out.
    pub density_patterns: Vec<usize>,
    pub density_grid: GridConfig,
}

impl Default for AnbkSection {
    fn default() -> Self {
        Self {
            inner_steps: 40,
            max_outer_steps: 1500,
            step_phi: 2e-3,
            step_phi_hat: 2e-2,
            residual_tol: 0.02,
            ramp_steps: 150,
            batch_size: 4_000,
            analytic_linear: true,
            density_patterns: vec![0],
            density_grid: GridConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: -4.0,
            hi: 4.0,
            points: 161,
        }
    }
}

impl GridConfig {
    pub fn values(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.points.max(2) - 1) as f64;
        (0..self.points).map(|i| self.lo + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AntkSection {
    pub steps: usize,
    pub eta: f64,
    pub samples: usize,
    pub record_every: usize,
    pub init: FieldInit,
    pub convergence_tol: f64,
    /// Use the patch-CNN dynamics (requires a dataset with a patch layout).
    pub cnn: bool,
    pub histogram_bins: usize,
}

impl Default for AntkSection {
    fn default() -> Self {
        Self {
            steps: 20_000,
            eta: 1e-3,
            samples: 20_000,
            record_every: 500,
            init: FieldInit::Gaussian,
            convergence_tol: 1e-9,
            cnn: false,
            histogram_bins: 80,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSection {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Also run the P x P matrix fixed point (the scalar overlap profile is
    /// always produced).
    pub matrix_solver: bool,
}

impl Default for LinearSection {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 20_000,
            matrix_solver: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LazySection {
    pub batch_size: usize,
}

impl Default for LazySection {
    fn default() -> Self {
        Self { batch_size: 20_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Langevin,
    GdWeightDecay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub width: usize,
    pub mode: OracleMode,
    pub eta: f64,
    pub steps: usize,
    pub thermalize_after: usize,
    pub sample_every: usize,
    pub record_layer: usize,
    pub histogram_bins: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            width: 1024,
            mode: OracleMode::Langevin,
            eta: 5e-4,
            steps: 20_000,
            thermalize_after: 5_000,
            sample_every: 1_000,
            record_layer: 1,
            histogram_bins: 80,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub methods: Vec<CompareMethod>,
    pub gamma0_values: Vec<f64>,
    pub p_values: Vec<usize>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            methods: vec![
                CompareMethod::Nngpk,
                CompareMethod::Ntk,
                CompareMethod::Anbk,
                CompareMethod::Antk,
            ],
            gamma0_values: vec![0.3],
            p_values: vec![8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMethod {
    Nngpk,
    Ntk,
    Anbk,
    Antk,
    CnnAntk,
}

impl CompareMethod {
    pub fn name(self) -> &'static str {
        match self {
            CompareMethod::Nngpk => "nngpk",
            CompareMethod::Ntk => "ntk",
            CompareMethod::Anbk => "anbk",
            CompareMethod::Antk => "antk",
            CompareMethod::CnnAntk => "cnn_antk",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointSection {
    pub gamma0_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub samples: usize,
    pub steps: usize,
    pub eta: f64,
}

impl Default for FixedPointSection {
    fn default() -> Self {
        Self {
            gamma0_values: vec![0.5, 1.0, 2.0, 4.0],
            lambda_values: vec![1.0],
            samples: 20_000,
            steps: 30_000,
            eta: 1e-3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let text = r#"{
            "seed": 7,
            "data": {"synthetic": {"p": 8, "d": 32}},
            "hyper": {"gamma0": 0.5, "beta": "inf", "lambda": 1.0, "depth": 1, "activation": "relu"}
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.anbk.inner_steps, 40);
        let hp = cfg.hyper.build().unwrap();
        assert!(hp.beta.is_infinite());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{
            "seed": 7,
            "data": {"synthetic": {"p": 8, "d": 32}},
            "hyper": {"gamma0": 0.5, "beta": 50.0, "lambda": 1.0, "depth": 1, "activation": "relu"},
            "mystery": true
        }"#;
        assert!(RunConfig::from_json(text).is_err());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let text = r#"{
            "seed": 1,
            "data": {"synthetic": {"p": 4, "p_test": 2, "d": 16, "labels": "unit_norm"}},
            "hyper": {"gamma0": 1.5, "beta": 50.0, "lambda": 1.0, "depth": 2, "activation": "tanh"}
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back.to_json(), cfg.to_json());
    }
}
