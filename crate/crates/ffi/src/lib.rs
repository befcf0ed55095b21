//! C ABI over the adaptive kernel solvers: opaque handles, status codes,
//! and a thread-local last-error message. Matrices cross the boundary as
//! row-major f64 buffers sized by the caller.

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use ndarray::{Array1, Array2};

use akern_core::anbk::{self, AnbkSolverConfig};
use akern_core::antk::{self, DmftConfig, FieldInit};
use akern_core::data::{self, LabelNorm};
use akern_core::dataset::Dataset;
use akern_core::error::AkernError;
use akern_core::hyper::{Activation, Beta, Hyperparams};
use akern_core::kernel::{self, KernelKind, KernelMatrix};
use akern_core::lazy;
use akern_core::linearnet;
use akern_core::sampling::SamplerConfig;

/// Status codes returned by every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AkernStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalFailure = 3,
    NotConverged = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &AkernError) -> AkernStatus {
    match err {
        AkernError::InvalidArgument(_)
        | AkernError::Config(_)
        | AkernError::DimensionMismatch(_)
        | AkernError::UnsupportedPatchLayout(_) => AkernStatus::InvalidArgument,
        _ => AkernStatus::NumericalFailure,
    }
}

/// Copy the last error message into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to at least `len` writable bytes, or be NULL (in which
/// case only the length is returned).
#[no_mangle]
pub unsafe extern "C" fn akern_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Opaque dataset handle.
pub struct AkernDataset {
    inner: Dataset,
}

/// Opaque kernel-matrix handle.
pub struct AkernKernel {
    inner: KernelMatrix,
}

fn guard<F: FnOnce() -> AkernStatus>(f: F) -> AkernStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic crossed the FFI boundary");
            AkernStatus::Panic
        }
    }
}

unsafe fn slice_from<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

fn activation_from(code: u32) -> Option<Activation> {
    match code {
        0 => Some(Activation::Linear),
        1 => Some(Activation::Relu),
        2 => Some(Activation::Tanh),
        _ => None,
    }
}

/// beta <= 0 means infinite temperature damping (beta = infinity).
fn beta_from(beta: f64) -> Beta {
    if beta > 0.0 {
        Beta::Finite(beta)
    } else {
        Beta::Infinite
    }
}

/// Build a dataset from a row-major P x D input buffer and P targets.
///
/// # Safety
/// `rows` must hold p*d doubles, `targets` p doubles, and `out` must be a
/// valid location for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn akern_dataset_create(
    rows: *const f64,
    p: usize,
    d: usize,
    targets: *const f64,
    out: *mut *mut AkernDataset,
) -> AkernStatus {
    guard(|| {
        if out.is_null() {
            set_error("out handle is NULL");
            return AkernStatus::NullPointer;
        }
        let (Some(rows), Some(targets)) = (slice_from(rows, p * d), slice_from(targets, p))
        else {
            set_error("input buffer is NULL");
            return AkernStatus::NullPointer;
        };
        let inputs = match Array2::from_shape_vec((p, d), rows.to_vec()) {
            Ok(m) => m,
            Err(e) => {
                set_error(e.to_string());
                return AkernStatus::InvalidArgument;
            }
        };
        match Dataset::new(inputs, Array1::from_vec(targets.to_vec())) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(AkernDataset { inner: ds }));
                AkernStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Whitened synthetic dataset: P orthonormalized rows in D dimensions with
/// alternating labels (unit_norm_labels scales them to |y| = 1).
///
/// # Safety
/// `out` must be a valid location for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn akern_dataset_synth_whitened(
    p: usize,
    d: usize,
    seed: u64,
    unit_norm_labels: bool,
    out: *mut *mut AkernDataset,
) -> AkernStatus {
    guard(|| {
        if out.is_null() {
            set_error("out handle is NULL");
            return AkernStatus::NullPointer;
        }
        let labels = if unit_norm_labels {
            LabelNorm::UnitNorm
        } else {
            LabelNorm::PlusMinusOne
        };
        match data::synth_whitened(p, d, seed, labels) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(AkernDataset { inner: ds }));
                AkernStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `ds` must be a handle returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn akern_dataset_free(ds: *mut AkernDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of rows in a dataset.
///
/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn akern_dataset_len(ds: *const AkernDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).inner.len()
}

/// Data Gram x x^T / D of a dataset.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn akern_data_gram(
    ds: *const AkernDataset,
    out: *mut *mut AkernKernel,
) -> AkernStatus {
    guard(|| {
        if ds.is_null() || out.is_null() {
            set_error("NULL handle");
            return AkernStatus::NullPointer;
        }
        let k = kernel::data_gram(&(*ds).inner);
        *out = Box::into_raw(Box::new(AkernKernel { inner: k }));
        AkernStatus::Ok
    })
}

/// # Safety
/// `k` must be a handle returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn akern_kernel_free(k: *mut AkernKernel) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// Kernel dimension P.
///
/// # Safety
/// `k` must be a live kernel handle.
#[no_mangle]
pub unsafe extern "C" fn akern_kernel_dim(k: *const AkernKernel) -> usize {
    if k.is_null() {
        return 0;
    }
    (*k).inner.dim()
}

/// Copy the P x P entries row-major into `buf`.
///
/// # Safety
/// `k` must be a live kernel handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn akern_kernel_entries(
    k: *const AkernKernel,
    buf: *mut f64,
    len: usize,
) -> AkernStatus {
    guard(|| {
        if k.is_null() || buf.is_null() {
            set_error("NULL handle or buffer");
            return AkernStatus::NullPointer;
        }
        let p = (*k).inner.dim();
        if len < p * p {
            set_error(format!("need {} doubles, got {}", p * p, len));
            return AkernStatus::BufferTooSmall;
        }
        for (i, v) in (*k).inner.entries().iter().enumerate() {
            *buf.add(i) = *v;
        }
        AkernStatus::Ok
    })
}

/// Frobenius-cosine alignment of two kernels.
///
/// # Safety
/// `a`, `b` must be live kernel handles; `out` a valid f64 location.
#[no_mangle]
pub unsafe extern "C" fn akern_kernel_alignment(
    a: *const AkernKernel,
    b: *const AkernKernel,
    out: *mut f64,
) -> AkernStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            set_error("NULL handle");
            return AkernStatus::NullPointer;
        }
        match kernel::kernel_alignment(&(*a).inner, &(*b).inner) {
            Ok(v) => {
                *out = v;
                AkernStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Lazy NNGP kernel at the last layer of a depth-L tower over the given
/// Gram. Activation codes: 0 linear, 1 relu, 2 tanh.
///
/// # Safety
/// `gram` must be a live kernel handle; `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn akern_nngp_kernel(
    gram: *const AkernKernel,
    depth: usize,
    activation: u32,
    mc_batch: usize,
    seed: u64,
    out: *mut *mut AkernKernel,
) -> AkernStatus {
    guard(|| {
        if gram.is_null() || out.is_null() {
            set_error("NULL handle");
            return AkernStatus::NullPointer;
        }
        let Some(act) = activation_from(activation) else {
            set_error("unknown activation code");
            return AkernStatus::InvalidArgument;
        };
        let mc = SamplerConfig {
            batch_size: mc_batch.max(1),
            seed,
            jitter: 1e-10,
        };
        match lazy::nngp_kernels((*gram).inner.entries(), depth, act, &mc) {
            Ok(phis) => {
                let k = KernelMatrix::new(KernelKind::Feature, phis[depth].clone())
                    .expect("square kernel");
                *out = Box::into_raw(Box::new(AkernKernel { inner: k }));
                AkernStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Static lazy NTK over the given Gram.
///
/// # Safety
/// `gram` must be a live kernel handle; `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn akern_ntk_kernel(
    gram: *const AkernKernel,
    depth: usize,
    activation: u32,
    mc_batch: usize,
    seed: u64,
    out: *mut *mut AkernKernel,
) -> AkernStatus {
    guard(|| {
        if gram.is_null() || out.is_null() {
            set_error("NULL handle");
            return AkernStatus::NullPointer;
        }
        let Some(act) = activation_from(activation) else {
            set_error("unknown activation code");
            return AkernStatus::InvalidArgument;
        };
        let mc = SamplerConfig {
            batch_size: mc_batch.max(1),
            seed,
            jitter: 1e-10,
        };
        match lazy::ntk_kernel((*gram).inner.entries(), depth, act, &mc) {
            Ok(ntk) => {
                let k = KernelMatrix::new(KernelKind::Tangent, ntk).expect("square kernel");
                *out = Box::into_raw(Box::new(AkernKernel { inner: k }));
                AkernStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Whitened deep-linear overlaps: writes c_1..c_L and chat_1..chat_L into
/// caller buffers of length `depth` and the conserved product into `chi`.
/// beta <= 0 encodes infinite beta.
///
/// # Safety
/// `c_out` and `c_hat_out` must hold `depth` doubles; `chi_out` one double.
#[no_mangle]
pub unsafe extern "C" fn akern_whitened_overlaps(
    gamma0: f64,
    beta: f64,
    depth: usize,
    c_out: *mut f64,
    c_hat_out: *mut f64,
    chi_out: *mut f64,
) -> AkernStatus {
    guard(|| {
        if c_out.is_null() || c_hat_out.is_null() || chi_out.is_null() {
            set_error("NULL output buffer");
            return AkernStatus::NullPointer;
        }
        match linearnet::solve_whitened_overlaps(gamma0, beta_from(beta), depth, 1e-12) {
            Ok(prof) => {
                for l in 0..depth {
                    *c_out.add(l) = prof.c[l];
                    *c_hat_out.add(l) = prof.c_hat[l];
                }
                *chi_out = prof.chi;
                AkernStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Solve the Bayesian min-max problem on a dataset and return the adapted
/// last-layer feature kernel. Returns NotConverged (with the kernel still
/// written) when the residual tolerance was not reached.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` a valid location.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn akern_anbk_solve(
    ds: *const AkernDataset,
    gamma0: f64,
    beta: f64,
    lambda: f64,
    depth: usize,
    activation: u32,
    batch_size: usize,
    inner_steps: usize,
    max_outer_steps: usize,
    step_phi: f64,
    step_phi_hat: f64,
    residual_tol: f64,
    ramp_steps: usize,
    seed: u64,
    out: *mut *mut AkernKernel,
) -> AkernStatus {
    guard(|| {
        if ds.is_null() || out.is_null() {
            set_error("NULL handle");
            return AkernStatus::NullPointer;
        }
        let Some(act) = activation_from(activation) else {
            set_error("unknown activation code");
            return AkernStatus::InvalidArgument;
        };
        let hp = match Hyperparams::uniform(gamma0, beta_from(beta), lambda, depth, act) {
            Ok(hp) => hp,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let cfg = AnbkSolverConfig {
            inner_steps,
            max_outer_steps,
            step_phi,
            step_phi_hat,
            residual_tol,
            ramp_steps,
            sampler: SamplerConfig {
                batch_size: batch_size.max(1),
                seed,
                jitter: 1e-10,
            },
            analytic_linear: true,
        };
        match anbk::solve_anbk(&(*ds).inner, &hp, &cfg, None) {
            Ok((stack, diag)) => {
                let k = stack.phi(depth).clone();
                *out = Box::into_raw(Box::new(AkernKernel { inner: k }));
                if diag.converged {
                    AkernStatus::Ok
                } else {
                    set_error(format!(
                        "stopped at residual {:.3e} after {} outer steps",
                        diag.final_residual, diag.outer_iterations
                    ));
                    AkernStatus::NotConverged
                }
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Run the two-layer field dynamics and return the converged adaptive
/// tangent kernel over the train patterns.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` a valid location.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn akern_antk_solve(
    ds: *const AkernDataset,
    gamma0: f64,
    lambda: f64,
    activation: u32,
    steps: usize,
    eta: f64,
    samples: usize,
    seed: u64,
    out: *mut *mut AkernKernel,
) -> AkernStatus {
    guard(|| {
        if ds.is_null() || out.is_null() {
            set_error("NULL handle");
            return AkernStatus::NullPointer;
        }
        let Some(act) = activation_from(activation) else {
            set_error("unknown activation code");
            return AkernStatus::InvalidArgument;
        };
        let hp = match Hyperparams::uniform(gamma0, Beta::Infinite, lambda, 1, act) {
            Ok(hp) => hp,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let cfg = DmftConfig {
            steps,
            eta,
            samples: samples.max(1),
            seed,
            record_every: steps.max(1),
            init: FieldInit::Gaussian,
            convergence_tol: 1e-9,
        };
        match antk::solve_dmft_two_layer(&(*ds).inner, None, &hp, &cfg) {
            Ok(dmft) => {
                let k = match KernelMatrix::new(KernelKind::Tangent, dmft.kernel) {
                    Ok(k) => k,
                    Err(e) => {
                        set_error(e.to_string());
                        return status_of(&e);
                    }
                };
                *out = Box::into_raw(Box::new(AkernKernel { inner: k }));
                AkernStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Kernel ridge regression: predictions = k_test (K + ridge I)^{-1} y.
/// `k_test` is row-major P_test x P; `predictions` must hold P_test.
///
/// # Safety
/// All buffers must match the documented lengths; `k_train` must be a live
/// kernel handle.
#[no_mangle]
pub unsafe extern "C" fn akern_kernel_ridge_predict(
    k_train: *const AkernKernel,
    k_test: *const f64,
    p_test: usize,
    y: *const f64,
    ridge: f64,
    predictions: *mut f64,
) -> AkernStatus {
    guard(|| {
        if k_train.is_null() || predictions.is_null() {
            set_error("NULL handle or buffer");
            return AkernStatus::NullPointer;
        }
        let p = (*k_train).inner.dim();
        let (Some(kt), Some(yv)) = (slice_from(k_test, p_test * p), slice_from(y, p)) else {
            set_error("NULL input buffer");
            return AkernStatus::NullPointer;
        };
        let k_test = match Array2::from_shape_vec((p_test, p), kt.to_vec()) {
            Ok(m) => m,
            Err(e) => {
                set_error(e.to_string());
                return AkernStatus::InvalidArgument;
            }
        };
        let y = Array1::from_vec(yv.to_vec());
        match kernel::kernel_ridge_predict(&(*k_train).inner, &k_test, &y, ridge) {
            Ok(pred) => {
                for (i, v) in pred.test_predictions.iter().enumerate() {
                    *predictions.add(i) = *v;
                }
                AkernStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn akern_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
