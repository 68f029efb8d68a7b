/* C interface to the csamp compressed-sensing toolkit. */

#ifndef CSAMP_H
#define CSAMP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define CSAMP_OK 0

#define CSAMP_ERR_PARAMETER -1

#define CSAMP_ERR_DIMENSION -2

#define CSAMP_ERR_DATA -3

#define CSAMP_ERR_IO -4

#define CSAMP_ERR_SINGULAR -5

#define CSAMP_ERR_DIVERGENCE -6

#define CSAMP_ERR_NUMERIC -7

#define CSAMP_ERR_CONTRACT -8

#define CSAMP_ERR_NULL -9

#define CSAMP_ERR_PANIC -10

#define CSAMP_TRANSFORM_IDENTITY 0

#define CSAMP_TRANSFORM_DCT 1

/**
 * A reconstruction network restored from an `.ampck` checkpoint.
 */
typedef struct CsampModel CsampModel;

/**
 * A Gaussian sensing operator with its prefactored pseudo-inverse.
 */
typedef struct CsampSensing CsampSensing;

/**
 * Library version as a static NUL-terminated string.
 */
const char *csamp_version(void);

/**
 * Message for the last failure on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *csamp_last_error(void);

/**
 * Creates a seeded Gaussian sensing operator with `round(ratio * n_p)`
 * rows. On success writes the handle to `out`.
 */
int32_t csamp_sensing_new(double ratio, uintptr_t n_p, uint64_t seed, struct CsampSensing **out);

/**
 * Releases a sensing handle. Null is a no-op.
 */
void csamp_sensing_free(struct CsampSensing *s);

/**
 * Measurement count m_p, or 0 for a null handle.
 */
uintptr_t csamp_sensing_rows(const struct CsampSensing *s);

/**
 * Block length n_p, or 0 for a null handle.
 */
uintptr_t csamp_sensing_cols(const struct CsampSensing *s);

/**
 * y = Phi x for one block: `x` has `n` values, `y` receives `m` values.
 */
int32_t csamp_sensing_measure(const struct CsampSensing *s,
                              const double *x,
                              uintptr_t n,
                              double *y,
                              uintptr_t m);

/**
 * Recovers one block from its measurements with the classical solver.
 * `transform` selects the sparsifying basis, `CSAMP_TRANSFORM_IDENTITY`
 * or `CSAMP_TRANSFORM_DCT` (block length must then be a perfect square).
 * `x_out` receives `n` values.
 */
int32_t csamp_amp_reconstruct(const struct CsampSensing *s,
                              const double *y,
                              uintptr_t m,
                              uint32_t max_iters,
                              double alpha,
                              int32_t transform,
                              double *x_out,
                              uintptr_t n);

/**
 * Restores a network from an `.ampck` checkpoint file.
 */
int32_t csamp_model_load(const char *path, struct CsampModel **out);

/**
 * Releases a model handle. Null is a no-op.
 */
void csamp_model_free(struct CsampModel *model);

/**
 * Block length n_p the model reconstructs, or 0 for a null handle.
 */
uintptr_t csamp_model_block_len(const struct CsampModel *model);

/**
 * Measurement count m_p the model expects, or 0 for a null handle.
 */
uintptr_t csamp_model_measurements(const struct CsampModel *model);

/**
 * y = W_phi x with the model's learned sensing matrix.
 */
int32_t csamp_model_measure(const struct CsampModel *model,
                            const double *x,
                            uintptr_t n,
                            double *y,
                            uintptr_t m);

/**
 * Reconstructs one block from its measurements with the loaded network.
 * `y` has `m` values, `x_out` receives `n` values.
 */
int32_t csamp_model_reconstruct(struct CsampModel *model,
                                const double *y,
                                uintptr_t m,
                                double *x_out,
                                uintptr_t n);

/**
 * PSNR in dB between two equal-length 8-bit buffers at the given peak.
 * Identical buffers yield +infinity.
 */
int32_t csamp_psnr(const uint8_t *a, const uint8_t *b, uintptr_t len, double peak, double *out_db);

#endif  /* CSAMP_H */
