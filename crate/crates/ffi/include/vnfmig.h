#ifndef VNFMIG_H
#define VNFMIG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  VNF_STATUS_OK = 0,
  VNF_STATUS_INVALID_ARGUMENT = 1,
  VNF_STATUS_CAPACITY = 2,
  VNF_STATUS_CONFIG = 3,
  VNF_STATUS_DATA = 4,
  VNF_STATUS_FORMAT = 5,
  VNF_STATUS_IO = 6,
  VNF_STATUS_NULL_POINTER = 7,
  VNF_STATUS_PANIC = 8,
} VnfStatus;

/**
 * A reliability chain together with its private random stream.
 */
typedef struct VnfChain VnfChain;

/**
 * Trained mixture density network.
 */
typedef struct VnfModel VnfModel;

typedef struct {
  double loss_rate;
  double cost_nf;
  double cost_sp;
  /**
   * Interval length in steps; every horizon has this many entries.
   */
  size_t interval;
} VnfEconomics;

typedef struct {
  bool migrate;
  size_t n_synced;
  double bound_migrate;
  double bound_stay;
  double achieved;
} VnfDecision;

/**
 * One bivariate Gaussian component, in meters per step.
 */
typedef struct {
  double weight;
  double mean_x;
  double mean_y;
  double std_x;
  double std_y;
  double rho;
} VnfComponent;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *vnf_last_error(void);

/**
 * Cost-loss-optimal decision for one interval.
 *
 * `p_visit` holds `n_users * interval` values, one row per user.
 * `synced_out` receives `n_users` flags (1 = profile synced).
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
VnfStatus vnf_decide(const uint64_t *user_ids,
                     size_t n_users,
                     const double *p_outage,
                     const double *p_visit,
                     const VnfEconomics *params,
                     VnfDecision *out,
                     uint8_t *synced_out);

/**
 * Chain from a row-major `n_states x n_states` matrix.
 *
 * # Safety
 * `transitions` must hold `n_states^2` values, `outage_states` `n_outage`
 * indices, and `out` must be writable.
 */
VnfStatus vnf_chain_new(const double *transitions,
                        size_t n_states,
                        const size_t *outage_states,
                        size_t n_outage,
                        size_t initial_state,
                        uint64_t seed,
                        VnfChain **out);

/**
 * The default normal/degraded/outage/repairing chain, starting in `normal`.
 *
 * # Safety
 * `out` must be writable.
 */
VnfStatus vnf_chain_default(uint64_t seed, VnfChain **out);

/**
 * # Safety
 * `chain` must be null or a handle from `vnf_chain_new`/`vnf_chain_default`
 * not yet freed.
 */
void vnf_chain_free(VnfChain *chain);

/**
 * Writes the outage probabilities of the next `horizon` steps.
 *
 * # Safety
 * `chain` must be a live handle and `out` valid for `horizon` writes.
 */
VnfStatus vnf_chain_outage_horizon(const VnfChain *chain, size_t horizon, double *out);

/**
 * # Safety
 * `chain` must be a live handle and `out` writable.
 */
VnfStatus vnf_chain_outage_probability(const VnfChain *chain,
                                       size_t from_state,
                                       size_t steps_ahead,
                                       double *out);

/**
 * Advances the chain one step; writes the new state and whether it is an outage state.
 *
 * # Safety
 * `chain` must be a live handle; `state` and `in_outage` may be null.
 */
VnfStatus vnf_chain_step(VnfChain *chain, size_t *state, bool *in_outage);

/**
 * # Safety
 * `chain` must be a live handle.
 */
VnfStatus vnf_chain_set_state(VnfChain *chain, size_t state);

/**
 * Loads a checkpoint written by `vnfmig train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
VnfStatus vnf_model_load(const char *path, VnfModel **out);

/**
 * # Safety
 * `model` must be null or a live handle from `vnf_model_load`.
 */
void vnf_model_free(VnfModel *model);

/**
 * Number of mixture components the model emits, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t vnf_model_components(const VnfModel *model);

/**
 * Next-step mixture for a window of 32 displacements (64 values, x/y interleaved).
 *
 * # Safety
 * `window` must hold `window_len` values and `out` have room for `capacity` components.
 */
VnfStatus vnf_model_forward(const VnfModel *model,
                            const double *window,
                            size_t window_len,
                            VnfComponent *out,
                            size_t capacity,
                            size_t *n_written);

/**
 * Mixture density at `(x, y)`.
 *
 * # Safety
 * `components` must hold `n` entries and `out` be writable.
 */
VnfStatus vnf_mixture_density(const VnfComponent *components,
                              size_t n,
                              double x,
                              double y,
                              double *out);

/**
 * Monte-Carlo probability of being inside the disc at each of the next
 * `horizon` steps. `positions` holds `n_positions >= 33` (x, y) pairs,
 * oldest first.
 *
 * # Safety
 * `positions` must hold `2 * n_positions` values and `out` `horizon` slots.
 */
VnfStatus vnf_predict_visit(const VnfModel *model,
                            const double *positions,
                            size_t n_positions,
                            double center_x,
                            double center_y,
                            double radius,
                            size_t horizon,
                            size_t n_rollouts,
                            uint64_t seed,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VNFMIG_H */
