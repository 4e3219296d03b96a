#ifndef NESSLSI_H
#define NESSLSI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum NlsiStatus {
  NLSI_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  NLSI_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  NLSI_STATUS_INVALID_UTF8 = 2,
  /**
   * Parameters, dimensions or configuration were rejected.
   */
  NLSI_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Quadrature, simulation or an estimator failed.
   */
  NLSI_STATUS_NUMERICAL = 4,
  /**
   * Filesystem or serialization failure.
   */
  NLSI_STATUS_IO = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  NLSI_STATUS_PANIC = 6,
} NlsiStatus;

/**
 * Opaque metric: parameters plus the tabulated profile.
 */
typedef struct NlsiMetric NlsiMetric;

/**
 * Inputs of the elliptic constants.
 */
typedef struct NlsiEllipticInputs {
  double l;
  double rho;
  double r;
  double sigma;
  size_t d;
  double alpha_ext;
  /**
   * `sup{-x·b(x) : |x| ≤ R_*}`; ignored unless `has_sup_inner` is nonzero.
   */
  double sup_inner;
  int32_t has_sup_inner;
} NlsiEllipticInputs;

/**
 * Elliptic constants; `c_ls = a + c(b + 2)/4`.
 */
typedef struct NlsiConstants {
  double a;
  double b;
  double c;
  double c_ls;
  double t0;
  double hyper_bound_2t0;
  /**
   * Nonzero when σ is below the threshold of the Poincaré bound.
   */
  int32_t sigma_below_threshold;
} NlsiConstants;

/**
 * Scalars of a metric table.
 */
typedef struct NlsiMetricScalars {
  double theta;
  double eta;
  double lambda;
  double r0;
  double r_end;
  double kappa1;
  double kappa2;
  double epsilon;
  double kappa;
  double c1;
  double c2;
  size_t dim;
} NlsiMetricScalars;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null if none.
 *
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *nlsi_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nlsi_version(void);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void nlsi_string_free(char *s);

/**
 * Computes the elliptic log-Sobolev constants.
 *
 * # Safety
 * `inputs` and `out` must be valid pointers.
 */
enum NlsiStatus nlsi_constants_compute(const struct NlsiEllipticInputs *inputs,
                                       struct NlsiConstants *out);

/**
 * Harnack factor for `(P_t f)^α(y) ≤ P_t f^α(x) · factor`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum NlsiStatus nlsi_harnack_factor(double k_w,
                                    double sigma,
                                    double alpha,
                                    double t,
                                    double dist,
                                    double *out);

/**
 * Hypercontractivity time `t₀` and the `‖P_t‖_{α→β}` bound at `t > t₀`.
 *
 * # Safety
 * `t0_out` and `bound_out` must be valid pointers.
 */
enum NlsiStatus nlsi_hypercontractivity_bound(double l,
                                              double rho,
                                              double r,
                                              double sigma,
                                              size_t d,
                                              double alpha,
                                              double beta,
                                              double t,
                                              double *t0_out,
                                              double *bound_out);

/**
 * Builds the kinetic metric for the row-major `dim × dim` stiffness `k`.
 *
 * `n_smooth = 0` selects the limiting profile; `n_grid = 0` the default grid.
 *
 * # Safety
 * `k` must point to `dim * dim` doubles and `out` must be a valid pointer.
 */
enum NlsiStatus nlsi_metric_new(const double *k,
                                size_t dim,
                                double l1,
                                double l2,
                                double r,
                                double quad_tol,
                                uint64_t n_smooth,
                                size_t n_grid,
                                struct NlsiMetric **out);

/**
 * Releases a metric handle. Null is a no-op.
 *
 * # Safety
 * `m` must come from [`nlsi_metric_new`] and not have been freed.
 */
void nlsi_metric_free(struct NlsiMetric *m);

/**
 * Scalars of the metric.
 *
 * # Safety
 * `m` and `out` must be valid pointers.
 */
enum NlsiStatus nlsi_metric_scalars(const struct NlsiMetric *m, struct NlsiMetricScalars *out);

/**
 * Concave profile `f(r)`.
 *
 * # Safety
 * `m` and `out` must be valid pointers.
 */
enum NlsiStatus nlsi_metric_f(const struct NlsiMetric *m, double r, double *out);

/**
 * Semimetric `ρ(z, z')` on phase space; `z` and `zp` hold `2·dim` doubles.
 *
 * # Safety
 * `z` and `zp` must point to `len` doubles; `m` and `out` must be valid.
 */
enum NlsiStatus nlsi_metric_rho(const struct NlsiMetric *m,
                                const double *z,
                                const double *zp,
                                size_t len,
                                double *out);

/**
 * Runs the estimator battery of a JSON scenario config.
 *
 * On success `*report_json` holds the run report (free it with
 * [`nlsi_string_free`]) and `*exit_code` the CLI exit code of the run
 * (0 all pass, 1 violation, 3 aborted). `out_dir` may be null, in which case
 * no files are written.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string, `out_dir` null or one, and
 * `report_json` and `exit_code` valid pointers.
 */
enum NlsiStatus nlsi_verify_json(const char *config_json,
                                 const char *out_dir,
                                 char **report_json,
                                 int32_t *exit_code);

/**
 * Closed-form constants of a JSON scenario config, as a JSON string.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `constants_json` valid.
 */
enum NlsiStatus nlsi_constants_json(const char *config_json, char **constants_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NESSLSI_H */
