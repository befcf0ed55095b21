//! Hyperparameters of the infinite-width limits: richness, temperature,
//! per-layer ridges, depth, and the activation.

use serde::{Deserialize, Serialize};

use crate::error::{AkernError, Result};

/// Activation function of the hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// Degree-1 homogeneous in the preactivation (so the whole network is
    /// homogeneous in its weights)?
    pub fn is_homogeneous(self) -> bool {
        matches!(self, Activation::Linear | Activation::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Inverse temperature; `Infinite` drops every I/beta term symbolically
/// instead of relying on a large float.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Beta {
    Finite(f64),
    #[serde(with = "infinite_beta")]
    Infinite,
}

mod infinite_beta {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str("inf")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<(), D::Error> {
        let tag = String::deserialize(d)?;
        if tag == "inf" {
            Ok(())
        } else {
            Err(D::Error::custom("expected \"inf\""))
        }
    }
}

impl Beta {
    /// 1/beta, zero in the infinite case.
    pub fn inverse(self) -> f64 {
        match self {
            Beta::Finite(b) => 1.0 / b,
            Beta::Infinite => 0.0,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Beta::Infinite)
    }
}

/// Hyperparameters of a depth-L network in mean-field parameterization.
///
/// `lambdas` holds the per-layer ridges lambda_0..lambda_L (length L+1);
/// `kappa` is the homogeneity degree of the network in its weights, L+1 for
/// linear and ReLU stacks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    pub gamma0: f64,
    pub beta: Beta,
    pub lambdas: Vec<f64>,
    pub depth: usize,
    pub activation: Activation,
    pub kappa: f64,
}

impl Hyperparams {
    pub fn new(
        gamma0: f64,
        beta: Beta,
        lambdas: Vec<f64>,
        depth: usize,
        activation: Activation,
    ) -> Result<Self> {
        if gamma0 < 0.0 || !gamma0.is_finite() {
            return Err(AkernError::InvalidArgument(format!(
                "gamma0 must be a finite nonnegative real, got {gamma0}"
            )));
        }
        if let Beta::Finite(b) = beta {
            if b <= 0.0 || !b.is_finite() {
                return Err(AkernError::InvalidArgument(format!(
                    "beta must be positive or infinite, got {b}"
                )));
            }
        }
        if depth < 1 {
            return Err(AkernError::InvalidArgument("depth must be >= 1".into()));
        }
        if lambdas.len() != depth + 1 {
            return Err(AkernError::InvalidArgument(format!(
                "need {} ridges for depth {}, got {}",
                depth + 1,
                depth,
                lambdas.len()
            )));
        }
        if lambdas.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(AkernError::InvalidArgument(
                "per-layer ridges must be nonnegative".into(),
            ));
        }
        Ok(Self {
            gamma0,
            beta,
            lambdas,
            depth,
            activation,
            kappa: (depth + 1) as f64,
        })
    }

    /// Uniform ridge across layers.
    pub fn uniform(
        gamma0: f64,
        beta: Beta,
        lambda: f64,
        depth: usize,
        activation: Activation,
    ) -> Result<Self> {
        Self::new(gamma0, beta, vec![lambda; depth + 1], depth, activation)
    }

    pub fn lambda(&self, layer: usize) -> f64 {
        self.lambdas[layer]
    }

    pub fn lambda_last(&self) -> f64 {
        self.lambdas[self.depth]
    }

    /// Effective ridge of the Bayesian kernel predictor, lambda_L / beta.
    pub fn anbk_ridge(&self) -> f64 {
        self.lambda_last() * self.beta.inverse()
    }

    /// Effective ridge of the weight-decay tangent predictor, lambda_L kappa.
    pub fn antk_ridge(&self) -> f64 {
        self.lambda_last() * self.kappa
    }

    /// Tangent-kernel dynamics require a homogeneous activation.
    pub fn check_antk_supported(&self) -> Result<()> {
        if !self.activation.is_homogeneous() {
            return Err(AkernError::InvalidArgument(
                "tangent-kernel dynamics need a homogeneous activation (linear or relu)".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_is_depth_plus_one() {
        let hp = Hyperparams::uniform(0.5, Beta::Infinite, 1.0, 1, Activation::Relu).unwrap();
        assert_eq!(hp.kappa, 2.0);
        assert_eq!(hp.antk_ridge(), 2.0);
        assert_eq!(hp.anbk_ridge(), 0.0);
    }

    #[test]
    fn tanh_rejected_for_antk() {
        let hp = Hyperparams::uniform(0.5, Beta::Finite(50.0), 1.0, 1, Activation::Tanh).unwrap();
        assert!(hp.check_antk_supported().is_err());
    }

    #[test]
    fn beta_roundtrips_through_json() {
        let inf: Beta = serde_json::from_str("\"inf\"").unwrap();
        assert!(inf.is_infinite());
        let fin: Beta = serde_json::from_str("50.0").unwrap();
        assert_eq!(fin.inverse(), 0.02);
        assert_eq!(serde_json::to_string(&Beta::Infinite).unwrap(), "\"inf\"");
    }

    #[test]
    fn ridge_validation() {
        assert!(Hyperparams::new(0.1, Beta::Infinite, vec![1.0], 1, Activation::Linear).is_err());
        assert!(
            Hyperparams::new(0.1, Beta::Infinite, vec![1.0, -0.5], 1, Activation::Linear).is_err()
        );
        // lambda = 0 is allowed at the type level; weight-decay-free runs
        // use it for the non-kernel negative control.
        assert!(
            Hyperparams::new(0.1, Beta::Infinite, vec![0.0, 0.0], 1, Activation::Linear).is_ok()
        );
    }
}
