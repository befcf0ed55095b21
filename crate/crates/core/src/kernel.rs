//! Kernel matrices: the data Gram, alignment, ridge regression, and the
//! CSV/JSON serialization used by every solver.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{AkernError, Result};
use crate::linalg;

/// Role of a kernel matrix in the theory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Feature kernel phi(h) phi(h)^T / N.
    Feature,
    /// Dual (conjugate) kernel tilting the preactivation density.
    Dual,
    /// Gradient kernel g g^T / N.
    Gradient,
    /// Tangent kernel, sum of gradient-feature products.
    Tangent,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Feature => "feature",
            KernelKind::Dual => "dual",
            KernelKind::Gradient => "gradient",
            KernelKind::Tangent => "tangent",
        }
    }
}

/// A symmetric P x P kernel. Symmetrization is applied on construction, so
/// every `KernelMatrix` in the crate satisfies K[i,j] == K[j,i] exactly.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    kind: KernelKind,
    entries: Array2<f64>,
}

impl KernelMatrix {
    pub fn new(kind: KernelKind, mut entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(AkernError::DimensionMismatch(format!(
                "kernel must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        linalg::symmetrize(&mut entries);
        Ok(Self { kind, entries })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<f64> {
        self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.diag().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        linalg::frobenius_norm(&self.entries)
    }

    /// Smallest eigenvalue relative to trace/P; the PSD invariant checks
    /// this against a jitter-scale floor.
    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.entries)
    }
}

/// The per-layer order parameters of a depth-L network: feature kernels
/// Phi^0..Phi^L and dual kernels PhiHat^1..PhiHat^L, all P x P.
#[derive(Debug, Clone)]
pub struct KernelStack {
    /// Feature kernels, index 0..=L (Phi^0 is the data Gram).
    pub phi: Vec<KernelMatrix>,
    /// Dual kernels, index 0 holds PhiHat^1 and so on.
    pub phi_hat: Vec<KernelMatrix>,
}

impl KernelStack {
    pub fn new(phi: Vec<KernelMatrix>, phi_hat: Vec<KernelMatrix>) -> Result<Self> {
        if phi.is_empty() || phi_hat.len() + 1 != phi.len() {
            return Err(AkernError::DimensionMismatch(format!(
                "stack with {} feature and {} dual kernels",
                phi.len(),
                phi_hat.len()
            )));
        }
        let p = phi[0].dim();
        if phi.iter().any(|k| k.dim() != p) || phi_hat.iter().any(|k| k.dim() != p) {
            return Err(AkernError::DimensionMismatch(
                "stack kernels must share dimension".into(),
            ));
        }
        Ok(Self { phi, phi_hat })
    }

    /// Feature tower plus all-zero duals.
    pub fn lazy(phi: Vec<KernelMatrix>) -> Result<Self> {
        let p = phi.first().map(|k| k.dim()).unwrap_or(0);
        let duals = (1..phi.len())
            .map(|_| KernelMatrix::new(KernelKind::Dual, Array2::zeros((p, p))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(phi, duals)
    }

    pub fn depth(&self) -> usize {
        self.phi.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.phi[0].dim()
    }

    /// Phi^layer for layer in 0..=L.
    pub fn phi(&self, layer: usize) -> &KernelMatrix {
        &self.phi[layer]
    }

    /// PhiHat^layer for layer in 1..=L.
    pub fn phi_hat(&self, layer: usize) -> &KernelMatrix {
        &self.phi_hat[layer - 1]
    }
}

/// Data Gram Phi^0 with Phi^0[m,n] = x_m . x_n / D.
pub fn data_gram(dataset: &Dataset) -> KernelMatrix {
    let gram = gram_of_rows(dataset.inputs());
    KernelMatrix::new(KernelKind::Feature, gram).expect("gram is square")
}

/// x x^T / D for an arbitrary row matrix (train or train+test stacks).
pub fn gram_of_rows(x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut g = x.dot(&x.t());
    g.mapv_inplace(|v| v / d);
    linalg::symmetrize(&mut g);
    g
}

/// Cosine similarity in Frobenius geometry: Tr(A B) / (|A|_F |B|_F).
pub fn kernel_alignment(a: &KernelMatrix, b: &KernelMatrix) -> Result<f64> {
    alignment_of(a.entries(), b.entries())
}

/// Alignment on raw symmetric matrices.
pub fn alignment_of(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(AkernError::DimensionMismatch(format!(
            "alignment of {:?} with {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let na = linalg::frobenius_norm(a);
    let nb = linalg::frobenius_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(AkernError::DegenerateKernel);
    }
    Ok(linalg::frobenius_inner(a, b) / (na * nb))
}

/// Train/test predictions of a kernel predictor plus the kernel that made
/// them. `test_loss` is filled in once test targets are known.
#[derive(Debug, Clone)]
pub struct PredictorResult {
    pub train_predictions: Array1<f64>,
    pub test_predictions: Array1<f64>,
    pub test_loss: Option<f64>,
    pub kernel_used: KernelMatrix,
}

impl PredictorResult {
    /// Mean squared error over the test points.
    pub fn score(mut self, test_targets: &Array1<f64>) -> Result<Self> {
        if test_targets.len() != self.test_predictions.len() {
            return Err(AkernError::DimensionMismatch(format!(
                "{} test targets for {} predictions",
                test_targets.len(),
                self.test_predictions.len()
            )));
        }
        let p = test_targets.len().max(1) as f64;
        let loss = self
            .test_predictions
            .iter()
            .zip(test_targets.iter())
            .map(|(f, y)| (f - y) * (f - y))
            .sum::<f64>()
            / p;
        self.test_loss = Some(loss);
        Ok(self)
    }

    pub fn train_loss(&self, train_targets: &Array1<f64>) -> f64 {
        let p = train_targets.len().max(1) as f64;
        self.train_predictions
            .iter()
            .zip(train_targets.iter())
            .map(|(f, y)| (f - y) * (f - y))
            .sum::<f64>()
            / p
    }
}

/// Kernel ridge regression: f = k_test (K + ridge I)^{-1} y. Train
/// predictions reuse the same coefficients with k_test = K.
pub fn kernel_ridge_predict(
    k_train: &KernelMatrix,
    k_test: &Array2<f64>,
    y: &Array1<f64>,
    ridge: f64,
) -> Result<PredictorResult> {
    let p = k_train.dim();
    if y.len() != p || k_test.ncols() != p {
        return Err(AkernError::DimensionMismatch(format!(
            "kernel {}x{} with {} targets and test rows of width {}",
            p,
            p,
            y.len(),
            k_test.ncols()
        )));
    }
    if ridge < 0.0 {
        return Err(AkernError::InvalidArgument("ridge must be >= 0".into()));
    }
    let mut system = k_train.entries().clone();
    for i in 0..p {
        system[[i, i]] += ridge;
    }
    let alpha = linalg::solve_spd_vec(&system, y, 1e-10).map_err(|e| match e {
        AkernError::NotPsd { .. } => AkernError::SingularSystem,
        other => other,
    })?;
    let train_predictions = k_train.entries().dot(&alpha);
    let test_predictions = k_test.dot(&alpha);
    Ok(PredictorResult {
        train_predictions,
        test_predictions,
        test_loss: None,
        kernel_used: k_train.clone(),
    })
}

/// JSON envelope {kind, p, entries} for a kernel matrix.
#[derive(Debug, Serialize, Deserialize)]
pub struct KernelEnvelope {
    pub kind: KernelKind,
    pub p: usize,
    pub entries: Vec<Vec<f64>>,
}

impl From<&KernelMatrix> for KernelEnvelope {
    fn from(k: &KernelMatrix) -> Self {
        let p = k.dim();
        let entries = (0..p).map(|i| k.entries().row(i).to_vec()).collect();
        KernelEnvelope {
            kind: k.kind(),
            p,
            entries,
        }
    }
}

impl KernelEnvelope {
    pub fn into_kernel(self) -> Result<KernelMatrix> {
        let p = self.p;
        if self.entries.len() != p || self.entries.iter().any(|r| r.len() != p) {
            return Err(AkernError::DataFormat {
                offset: 0,
                message: "kernel envelope entries do not match declared P".into(),
            });
        }
        let flat: Vec<f64> = self.entries.into_iter().flatten().collect();
        let m = Array2::from_shape_vec((p, p), flat).expect("checked shape");
        KernelMatrix::new(self.kind, m)
    }
}

/// Full row-major CSV with 17 significant digits per entry.
pub fn write_kernel_csv<W: Write>(k: &KernelMatrix, mut w: W) -> Result<()> {
    for i in 0..k.dim() {
        let row: Vec<String> = k
            .entries()
            .row(i)
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_kernel_csv<R: BufRead>(kind: KernelKind, r: R) -> Result<KernelMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| AkernError::DataFormat {
            offset: lineno as u64,
            message: format!("bad float on line {}: {e}", lineno + 1),
        })?;
        rows.push(row);
    }
    let p = rows.len();
    if p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(AkernError::DataFormat {
            offset: 0,
            message: "kernel csv is not a square matrix".into(),
        });
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    KernelMatrix::new(kind, Array2::from_shape_vec((p, p), flat).expect("square"))
}
