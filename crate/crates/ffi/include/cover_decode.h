#ifndef COVER_DECODE_H
#define COVER_DECODE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum CdStatus {
  CD_STATUS_OK = 0,
  CD_STATUS_INVALID_INPUT = 1,
  CD_STATUS_PARSE = 2,
  CD_STATUS_VALIDATION = 3,
  CD_STATUS_IO = 4,
  CD_STATUS_INFEASIBLE = 5,
  CD_STATUS_AUDIT = 6,
  CD_STATUS_OVERLAP = 7,
  CD_STATUS_UNSUPPORTED = 8,
  CD_STATUS_NULL_POINTER = 9,
  CD_STATUS_PANIC = 10,
} CdStatus;

// Tabular autoregressive scorer.
typedef struct CdArModel CdArModel;

// Calibrated cluster-step thresholds.
typedef struct CdModel CdModel;

// Decoded prediction set.
typedef struct CdSet CdSet;

// Loaded calibration or evaluation traces.
typedef struct CdTraces CdTraces;

// Calibration parameters. Start from [`cd_cover_params_default`].
typedef struct CdCoverParams {
  double alpha;
  double gamma;
  double lambda;
  // When true, scales lambda by each cluster's share of the traces.
  bool lambda_count_scaled;
  size_t clusters;
  size_t min_count;
  size_t bucket_width;
  size_t budget;
  size_t max_len;
  // Lower the anchor level to fund each raise instead of only raising.
  bool anchor_transfer;
  uint64_t seed;
} CdCoverParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer stays
// valid until the next call into this library on the same thread.
const char *cd_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cd_version(void);

struct CdCoverParams cd_cover_params_default(void);

// Conformal quantile of `values[0..n]` at level `tau`.
//
// # Safety
// `values` must point to `n` readable doubles (or be NULL with `n == 0`).
enum CdStatus cd_quantile(double tau, const double *values, size_t n, double *out);

// # Safety
// `out` must be a valid pointer to a double.
enum CdStatus cd_empirical_bernstein(double mean, double var, size_t n, double delta, double *out);

// # Safety
// `out` must be a valid pointer to a double.
enum CdStatus cd_hoeffding_upper(double p_hat, size_t n, double zeta, double *out);

// # Safety
// `out` must be a valid pointer to a double.
enum CdStatus cd_beta_quantile(double delta, double a, double b, double *out);

// Loads a line-delimited trace file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum CdStatus cd_traces_load(const char *path, struct CdTraces **out);

// # Safety
// `traces` must be a live handle; `path` a NUL-terminated string.
enum CdStatus cd_traces_save(const struct CdTraces *traces, const char *path);

// Number of traces; 0 for NULL.
//
// # Safety
// `traces` must be NULL or a live handle.
size_t cd_traces_len(const struct CdTraces *traces);

// # Safety
// `traces` must be NULL or a handle not yet freed.
void cd_traces_free(struct CdTraces *traces);

// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum CdStatus cd_ar_model_load(const char *path, struct CdArModel **out);

// First-order long-tail model: `head` frequent tokens (the last of them is
// the terminator) and `vocab - head` tail tokens sharing `tail_mass`.
//
// # Safety
// `out` must be a valid handle slot.
enum CdStatus cd_ar_model_longtail(size_t vocab,
                                   size_t head,
                                   size_t max_len,
                                   double tail_mass,
                                   double head_skew,
                                   uint64_t seed,
                                   struct CdArModel **out);

// Samples `n` traces; ids depend on `seed`.
//
// # Safety
// `model` must be a live handle; `out` a valid handle slot.
enum CdStatus cd_ar_model_sample(const struct CdArModel *model,
                                 size_t n,
                                 uint64_t seed,
                                 struct CdTraces **out);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum CdStatus cd_ar_model_save(const struct CdArModel *model, const char *path);

// # Safety
// `model` must be NULL or a handle not yet freed.
void cd_ar_model_free(struct CdArModel *model);

// Runs clustering and threshold optimization on `traces`.
//
// # Safety
// `traces` must be a live handle, `params` NULL (defaults) or valid, `out` a
// valid handle slot.
enum CdStatus cd_calibrate(const struct CdTraces *traces,
                           const struct CdCoverParams *params,
                           struct CdModel **out);

// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum CdStatus cd_model_load(const char *path, struct CdModel **out);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum CdStatus cd_model_save(const struct CdModel *model, const char *path);

// Threshold applied to `token` at step `l` (1-based).
//
// # Safety
// `model` must be a live handle; `out` a valid pointer.
enum CdStatus cd_model_threshold(const struct CdModel *model,
                                 size_t l,
                                 uint32_t token,
                                 double *out);

// # Safety
// `model` must be NULL or a handle not yet freed.
void cd_model_free(struct CdModel *model);

// Expands every prefix kept by `model` under `scorer`. `max_len == 0` uses
// the model's horizon.
//
// # Safety
// `model` and `scorer` must be live handles; `out` a valid handle slot.
enum CdStatus cd_decode(const struct CdModel *model,
                        const struct CdArModel *scorer,
                        size_t max_len,
                        size_t max_nodes,
                        struct CdSet **out);

// Number of complete sequences; 0 for NULL.
//
// # Safety
// `set` must be NULL or a live handle.
size_t cd_set_len(const struct CdSet *set);

// # Safety
// `set` must be NULL or a live handle.
size_t cd_set_expanded_nodes(const struct CdSet *set);

// True when expansion stopped at the node cap.
//
// # Safety
// `set` must be NULL or a live handle.
bool cd_set_truncated(const struct CdSet *set);

// Borrows sequence `i`. The tokens stay valid until the set is freed.
//
// # Safety
// `set` must be a live handle; `tokens` and `len` valid pointers.
enum CdStatus cd_set_sequence(const struct CdSet *set,
                              size_t i,
                              const uint32_t **tokens,
                              size_t *len);

// # Safety
// `set` must be NULL or a handle not yet freed.
void cd_set_free(struct CdSet *set);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COVER_DECODE_H */
