#ifndef SEQMIX_H
#define SEQMIX_H

/* Generated by cbindgen from the seqmix-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum SeqmixStatus {
  SEQMIX_STATUS_OK = 0,
  SEQMIX_STATUS_NULL_POINTER = 1,
  SEQMIX_STATUS_INVALID_ARGUMENT = 2,
  SEQMIX_STATUS_DOMAIN = 3,
  SEQMIX_STATUS_NON_FINITE = 4,
  SEQMIX_STATUS_NUMERIC = 5,
  SEQMIX_STATUS_IO = 6,
  SEQMIX_STATUS_INTERNAL = 7,
} SeqmixStatus;

/**
 * Opaque handle to one initialized attention block (configuration plus
 * randomly initialized weights).
 */
typedef struct SeqmixBlock SeqmixBlock;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the message for the most recent error on this thread into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length in
 * bytes, excluding the terminator; 0 means no error has been recorded.
 */
uintptr_t seqmix_last_error_message(char *buf, uintptr_t len);

/**
 * Create a block for a named preset (`linear`, `mamba2`, `mamba2s`,
 * `twomamba`, `twomamba_e`, `softmax`) with seeded weight initialization.
 * On success writes the handle to `out` and returns `SEQMIX_STATUS_OK`.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SeqmixStatus seqmix_block_new(const char *preset,
                                   uintptr_t d_model,
                                   uintptr_t heads,
                                   uintptr_t d_head,
                                   uint64_t seed,
                                   struct SeqmixBlock **out);

/**
 * Release a block handle. A null handle is a no-op.
 *
 * # Safety
 * `block` must be a handle from `seqmix_block_new` not yet freed.
 */
void seqmix_block_free(struct SeqmixBlock *block);

/**
 * Run the quadratic (materialized score matrix) path. `input` and `output`
 * are row-major `[seq_len, d_model]` buffers of `seq_len * d_model` doubles.
 *
 * # Safety
 * Pointers must be valid for `seq_len * d_model` doubles.
 */
enum SeqmixStatus seqmix_block_forward(const struct SeqmixBlock *block,
                                       const double *input,
                                       uintptr_t seq_len,
                                       double *output);

/**
 * Run the stateful token-by-token path; numerically equivalent to
 * `seqmix_block_forward` within 1e-9 relative error.
 *
 * # Safety
 * Pointers must be valid for `seq_len * d_model` doubles.
 */
enum SeqmixStatus seqmix_block_forward_stateful(const struct SeqmixBlock *block,
                                                const double *input,
                                                uintptr_t seq_len,
                                                double *output);

/**
 * Fixed per-head second-order recurrent state size in scalar elements:
 * `d (d + 1)^2 / 2 + 3 d`.
 */
uint64_t seqmix_second_order_state(uint64_t d_head);

/**
 * Smallest sequence length at which a growing KV cache costs strictly more
 * than the fixed second-order state. Writes the answer to `out`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SeqmixStatus seqmix_kv_crossover(uint64_t d_head, uint64_t *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SEQMIX_H */
