#ifndef LPACC_H
#define LPACC_H

/* Generated by cbindgen from the lpacc-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum {
  LPACC_STATUS_OK = 0,
  LPACC_STATUS_NULL_POINTER = 1,
  LPACC_STATUS_INVALID_ARGUMENT = 2,
  LPACC_STATUS_IO_ERROR = 3,
  LPACC_STATUS_FORMAT_ERROR = 4,
  LPACC_STATUS_PANIC = 5,
} LpaccStatus;

/**
 * Accumulation semantics for the simulated register.
 */
typedef enum {
  LPACC_ACC_MODE_EXACT = 0,
  LPACC_ACC_MODE_WRAPAROUND = 1,
  LPACC_ACC_MODE_SATURATE = 2,
} LpaccAccMode;

/**
 * Opaque handle to a loaded model checkpoint.
 */
typedef struct LpaccCheckpoint LpaccCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static name for a status code.
 */
const char *lpacc_status_name(LpaccStatus status);

/**
 * Data-type accumulator bound for a `k`-element dot product of
 * `input_bits`-bit inputs and `weight_bits`-bit signed weights. Writes the
 * real-valued bound and its minimal integer width.
 *
 * # Safety
 * `out_min_bits` and `out_real_bound` must be valid for writes or null (a
 * null out-pointer is skipped).
 */
LpaccStatus lpacc_datatype_bound(uint64_t k,
                                 uint32_t input_bits,
                                 bool input_signed,
                                 uint32_t weight_bits,
                                 uint32_t *out_min_bits,
                                 double *out_real_bound);

/**
 * Weight-norm accumulator bound for one output channel's integer codes.
 * `out_degenerate` is set when the channel is all-zero (the bound is then
 * reported as 1 bit).
 *
 * # Safety
 * `weights` must point to `len` readable values; out-pointers as above.
 */
LpaccStatus lpacc_weight_bound(const int64_t *weights,
                               size_t len,
                               uint32_t input_bits,
                               bool input_signed,
                               uint32_t *out_min_bits,
                               double *out_real_bound,
                               bool *out_degenerate);

/**
 * Per-channel l1 budget `(2^(P-1) - 1) * 2^(1_signed - N)` for a target
 * accumulator width.
 *
 * # Safety
 * `out_budget` must be valid for a write.
 */
LpaccStatus lpacc_l1_budget(uint32_t acc_bits,
                            uint32_t input_bits,
                            bool input_signed,
                            double *out_budget);

/**
 * Exact-integer overflow-avoidance certificate: true iff the worst-case
 * partial-sum magnitude of these codes fits a signed `acc_bits` register.
 *
 * # Safety
 * `weights` must point to `len` readable values; `out_fits` valid for write.
 */
LpaccStatus lpacc_worst_case_fits(const int64_t *weights,
                                  size_t len,
                                  uint32_t input_bits,
                                  bool input_signed,
                                  uint32_t acc_bits,
                                  bool *out_fits);

/**
 * Simulate one dot product accumulated left-to-right into a signed
 * `acc_bits` register under the given mode. Writes the stored result and
 * the overflow-event count.
 *
 * # Safety
 * `x` and `w` must point to `len` readable values each; out-pointers valid
 * for writes or null.
 */
LpaccStatus lpacc_dot_accumulate(const int64_t *x,
                                 const int64_t *w,
                                 size_t len,
                                 uint32_t acc_bits,
                                 LpaccAccMode mode,
                                 int64_t *out_result,
                                 uint64_t *out_overflows);

/**
 * Load a JSON checkpoint from `path` into an opaque handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_handle` valid for a write.
 * The returned handle must be released with [`lpacc_checkpoint_free`].
 */
LpaccStatus lpacc_checkpoint_load(const char *path, LpaccCheckpoint **out_handle);

/**
 * Number of layers in a loaded checkpoint.
 *
 * # Safety
 * `handle` must come from [`lpacc_checkpoint_load`]; `out_layers` valid for
 * a write.
 */
LpaccStatus lpacc_checkpoint_layer_count(const LpaccCheckpoint *handle, size_t *out_layers);

/**
 * Run the exact overflow-avoidance certificate over every channel of every
 * layer at the given accumulator width. `out_all_pass` receives the verdict.
 *
 * # Safety
 * `handle` must come from [`lpacc_checkpoint_load`]; `out_all_pass` valid
 * for a write.
 */
LpaccStatus lpacc_checkpoint_verify(const LpaccCheckpoint *handle,
                                    uint32_t acc_bits,
                                    bool *out_all_pass);

/**
 * Release a checkpoint handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from [`lpacc_checkpoint_load`] and not be used again.
 */
void lpacc_checkpoint_free(LpaccCheckpoint *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPACC_H */
