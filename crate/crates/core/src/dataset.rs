//! Datasets: input rows, regression targets, and the optional patch layout
//! used by the convolutional solvers.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{AkernError, Result};

/// Non-overlapping patch decomposition of each input row: `patch_count`
/// patches of dimension `patch_dim`, with patch_count * patch_dim = D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub patch_count: usize,
    pub patch_dim: usize,
}

/// A regression dataset of P rows in D dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Array2<f64>,
    targets: Array1<f64>,
    patch_layout: Option<PatchLayout>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Array1<f64>) -> Result<Self> {
        Self::with_patches(inputs, targets, None)
    }

    pub fn with_patches(
        inputs: Array2<f64>,
        targets: Array1<f64>,
        patch_layout: Option<PatchLayout>,
    ) -> Result<Self> {
        let (p, d) = inputs.dim();
        if p == 0 || d == 0 {
            return Err(AkernError::InvalidArgument(format!(
                "dataset must have P >= 1 and D >= 1, got {p}x{d}"
            )));
        }
        if targets.len() != p {
            return Err(AkernError::DimensionMismatch(format!(
                "{} targets for {} rows",
                targets.len(),
                p
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
            return Err(AkernError::InvalidArgument(
                "dataset contains non-finite entries".into(),
            ));
        }
        if let Some(layout) = patch_layout {
            if layout.patch_count * layout.patch_dim != d {
                return Err(AkernError::UnsupportedPatchLayout(format!(
                    "{} patches of dim {} do not tile D={}",
                    layout.patch_count, layout.patch_dim, d
                )));
            }
        }
        Ok(Self {
            inputs,
            targets,
            patch_layout,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array1<f64> {
        &self.targets
    }

    pub fn patch_layout(&self) -> Option<PatchLayout> {
        self.patch_layout
    }

    /// Patch `a` of row `mu` under the stored layout.
    pub fn patch(&self, mu: usize, a: usize) -> ArrayView1<'_, f64> {
        let layout = self.patch_layout.expect("dataset has no patch layout");
        let k = layout.patch_dim;
        self.inputs.row(mu).slice_move(ndarray::s![a * k..(a + 1) * k])
    }

    /// Row subset as a new dataset (targets carried along).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut inputs = Array2::<f64>::zeros((rows.len(), d));
        let mut targets = Array1::<f64>::zeros(rows.len());
        for (dst, &src) in rows.iter().enumerate() {
            inputs.row_mut(dst).assign(&self.inputs.row(src));
            targets[dst] = self.targets[src];
        }
        Self::with_patches(inputs, targets, self.patch_layout)
    }
}
