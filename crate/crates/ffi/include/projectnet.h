#ifndef PROJECTNET_H
#define PROJECTNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum {
  PN_STATUS_OK = 0,
  PN_STATUS_NULL_POINTER = 1,
  PN_STATUS_INVALID_ARGUMENT = 2,
  PN_STATUS_DIMENSION_MISMATCH = 3,
  PN_STATUS_INFEASIBLE = 4,
  PN_STATUS_DIVERGED = 5,
  PN_STATUS_NON_FINITE = 6,
  PN_STATUS_CONFIG = 7,
  PN_STATUS_IO = 8,
  PN_STATUS_PANIC = 9,
} PnStatus;

/**
 * Update rule `L(u)`.
 */
typedef struct PnModel PnModel;

/**
 * Problem instance built from a JSON problem kind.
 */
typedef struct PnProblem PnProblem;

/**
 * Solver settings; see [`pn_solve_config_default`].
 */
typedef struct {
  double eta;
  double gamma;
  uintptr_t iterations;
  uintptr_t cycles;
  /**
   * Nonzero applies a converged projection to the final iterate.
   */
  int32_t polish;
} PnSolveConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`) and returns the full message length.
 *
 * # Safety
 * `buf` must point to `len` writable bytes or be null.
 */
uintptr_t pn_last_error(char *buf, uintptr_t len);

/**
 * Solver defaults: `η = γ = 0.1`, 5 iterations, 10 projection cycles.
 */
PnSolveConfig pn_solve_config_default(void);

/**
 * Builds a problem from a JSON kind such as `{"kind":"matching","n":3}`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
PnStatus pn_problem_new(const char *json, PnProblem **out);

/**
 * # Safety
 * `p` must come from [`pn_problem_new`] and not be used afterwards.
 */
void pn_problem_free(PnProblem *p);

/**
 * Decision and uncertainty dimensions.
 *
 * # Safety
 * `p` must be a live handle; `dim` and `u_dim` writable or null.
 */
PnStatus pn_problem_dims(const PnProblem *p, uintptr_t *dim, uintptr_t *u_dim);

/**
 * Model with `L ≡ 0`, under which the solver is projected gradient descent.
 *
 * # Safety
 * `out` must be writable.
 */
PnStatus pn_model_zero(uintptr_t dim, uintptr_t u_dim, PnModel **out);

/**
 * Loads a trained model checkpoint (JSON file).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PnStatus pn_model_load(const char *path, PnModel **out);

/**
 * # Safety
 * `m` must come from a `pn_model_*` constructor and not be used afterwards.
 */
void pn_model_free(PnModel *m);

/**
 * Runs the unrolled solver on `u` and writes the decision into `w`.
 *
 * # Safety
 * Handles must be live; `u` holds `u_len` values and `w` has room for
 * `w_len`; `cfg` may be null for defaults.
 */
PnStatus pn_solve(const PnProblem *p,
                  const PnModel *m,
                  const double *u,
                  uintptr_t u_len,
                  const PnSolveConfig *cfg,
                  double *w,
                  uintptr_t w_len);

/**
 * `k`-cycle approximate projection of `w_in` onto a problem with a fixed
 * feasible set.
 *
 * # Safety
 * `p` must be live; `w_in` and `w_out` hold `len` values each.
 */
PnStatus pn_project(const PnProblem *p,
                    const double *w_in,
                    uintptr_t len,
                    uintptr_t cycles,
                    double *w_out);

/**
 * Exact optimum for `u`, written into `w`, and its objective.
 *
 * # Safety
 * `p` must be live; `u` holds `u_len` values, `w` has room for `w_len`;
 * `objective` writable or null.
 */
PnStatus pn_optimum(const PnProblem *p,
                    const double *u,
                    uintptr_t u_len,
                    double *w,
                    uintptr_t w_len,
                    double *objective);

/**
 * Runs an experiment config (JSON text) and writes its artifacts to `out_dir`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
PnStatus pn_run_experiment(const char *config_json, const char *out_dir);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pn_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROJECTNET_H */
