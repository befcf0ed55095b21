#ifndef AKERN_H
#define AKERN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every FFI call.
 */
typedef enum AkernStatus {
  AKERN_STATUS_OK = 0,
  AKERN_STATUS_NULL_POINTER = 1,
  AKERN_STATUS_INVALID_ARGUMENT = 2,
  AKERN_STATUS_NUMERICAL_FAILURE = 3,
  AKERN_STATUS_NOT_CONVERGED = 4,
  AKERN_STATUS_BUFFER_TOO_SMALL = 5,
  AKERN_STATUS_PANIC = 6,
} AkernStatus;

/**
 * Opaque dataset handle.
 */
typedef struct AkernDataset AkernDataset;

/**
 * Opaque kernel-matrix handle.
 */
typedef struct AkernKernel AkernKernel;

/**
 * Copy the last error message into `buf` (NUL-terminated, truncated to
 * `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to at least `len` writable bytes, or be NULL (in which
 * case only the length is returned).
 */
uintptr_t akern_last_error(char *buf, uintptr_t len);

/**
 * Build a dataset from a row-major P x D input buffer and P targets.
 *
 * # Safety
 * `rows` must hold p*d doubles, `targets` p doubles, and `out` must be a
 * valid location for a handle pointer.
 */
enum AkernStatus akern_dataset_create(const double *rows,
                                      uintptr_t p,
                                      uintptr_t d,
                                      const double *targets,
                                      struct AkernDataset **out);

/**
 * Whitened synthetic dataset: P orthonormalized rows in D dimensions with
 * alternating labels (unit_norm_labels scales them to |y| = 1).
 *
 * # Safety
 * `out` must be a valid location for a handle pointer.
 */
enum AkernStatus akern_dataset_synth_whitened(uintptr_t p,
                                              uintptr_t d,
                                              uint64_t seed,
                                              bool unit_norm_labels,
                                              struct AkernDataset **out);

/**
 * # Safety
 * `ds` must be a handle returned by this library and not yet freed.
 */
void akern_dataset_free(struct AkernDataset *ds);

/**
 * Number of rows in a dataset.
 *
 * # Safety
 * `ds` must be a live dataset handle.
 */
uintptr_t akern_dataset_len(const struct AkernDataset *ds);

/**
 * Data Gram x x^T / D of a dataset.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` a valid location.
 */
enum AkernStatus akern_data_gram(const struct AkernDataset *ds, struct AkernKernel **out);

/**
 * # Safety
 * `k` must be a handle returned by this library and not yet freed.
 */
void akern_kernel_free(struct AkernKernel *k);

/**
 * Kernel dimension P.
 *
 * # Safety
 * `k` must be a live kernel handle.
 */
uintptr_t akern_kernel_dim(const struct AkernKernel *k);

/**
 * Copy the P x P entries row-major into `buf`.
 *
 * # Safety
 * `k` must be a live kernel handle and `buf` must hold `len` doubles.
 */
enum AkernStatus akern_kernel_entries(const struct AkernKernel *k, double *buf, uintptr_t len);

/**
 * Frobenius-cosine alignment of two kernels.
 *
 * # Safety
 * `a`, `b` must be live kernel handles; `out` a valid f64 location.
 */
enum AkernStatus akern_kernel_alignment(const struct AkernKernel *a,
                                        const struct AkernKernel *b,
                                        double *out);

/**
 * Lazy NNGP kernel at the last layer of a depth-L tower over the given
 * Gram. Activation codes: 0 linear, 1 relu, 2 tanh.
 *
 * # Safety
 * `gram` must be a live kernel handle; `out` a valid location.
 */
enum AkernStatus akern_nngp_kernel(const struct AkernKernel *gram,
                                   uintptr_t depth,
                                   uint32_t activation,
                                   uintptr_t mc_batch,
                                   uint64_t seed,
                                   struct AkernKernel **out);

/**
 * Static lazy NTK over the given Gram.
 *
 * # Safety
 * `gram` must be a live kernel handle; `out` a valid location.
 */
enum AkernStatus akern_ntk_kernel(const struct AkernKernel *gram,
                                  uintptr_t depth,
                                  uint32_t activation,
                                  uintptr_t mc_batch,
                                  uint64_t seed,
                                  struct AkernKernel **out);

/**
 * Whitened deep-linear overlaps: writes c_1..c_L and chat_1..chat_L into
 * caller buffers of length `depth` and the conserved product into `chi`.
 * beta <= 0 encodes infinite beta.
 *
 * # Safety
 * `c_out` and `c_hat_out` must hold `depth` doubles; `chi_out` one double.
 */
enum AkernStatus akern_whitened_overlaps(double gamma0,
                                         double beta,
                                         uintptr_t depth,
                                         double *c_out,
                                         double *c_hat_out,
                                         double *chi_out);

/**
 * Solve the Bayesian min-max problem on a dataset and return the adapted
 * last-layer feature kernel. Returns NotConverged (with the kernel still
 * written) when the residual tolerance was not reached.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` a valid location.
 */
enum AkernStatus akern_anbk_solve(const struct AkernDataset *ds,
                                  double gamma0,
                                  double beta,
                                  double lambda,
                                  uintptr_t depth,
                                  uint32_t activation,
                                  uintptr_t batch_size,
                                  uintptr_t inner_steps,
                                  uintptr_t max_outer_steps,
                                  double step_phi,
                                  double step_phi_hat,
                                  double residual_tol,
                                  uintptr_t ramp_steps,
                                  uint64_t seed,
                                  struct AkernKernel **out);

/**
 * Run the two-layer field dynamics and return the converged adaptive
 * tangent kernel over the train patterns.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` a valid location.
 */
enum AkernStatus akern_antk_solve(const struct AkernDataset *ds,
                                  double gamma0,
                                  double lambda,
                                  uint32_t activation,
                                  uintptr_t steps,
                                  double eta,
                                  uintptr_t samples,
                                  uint64_t seed,
                                  struct AkernKernel **out);

/**
 * Kernel ridge regression: predictions = k_test (K + ridge I)^{-1} y.
 * `k_test` is row-major P_test x P; `predictions` must hold P_test.
 *
 * # Safety
 * All buffers must match the documented lengths; `k_train` must be a live
 * kernel handle.
 */
enum AkernStatus akern_kernel_ridge_predict(const struct AkernKernel *k_train,
                                            const double *k_test,
                                            uintptr_t p_test,
                                            const double *y,
                                            double ridge,
                                            double *predictions);

/**
 * Library version as a static NUL-terminated string.
 */
const char *akern_version(void);

#endif  /* AKERN_H */
