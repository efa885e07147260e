#ifndef CC_HARDY_H
#define CC_HARDY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes.
 */
typedef enum CchStatus {
  CCH_STATUS_OK = 0,
  CCH_STATUS_NULL_POINTER = 1,
  CCH_STATUS_INVALID_ARGUMENT = 2,
  CCH_STATUS_UNKNOWN_SYSTEM = 3,
  CCH_STATUS_PARSE = 4,
  CCH_STATUS_EMPTY_DOMAIN = 5,
  CCH_STATUS_NON_CONVERGENCE = 6,
  CCH_STATUS_BOUND_EXCEEDED = 7,
  CCH_STATUS_NUMERICAL = 8,
  CCH_STATUS_PANIC = 9,
} CchStatus;

/**
 * Discretized domain handle.
 */
typedef struct CchDomain CchDomain;

/**
 * Vector-field system handle.
 */
typedef struct CchSystem CchSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`) and returns its full length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t cch_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cch_version(void);

/**
 * Built-in system by name (`euclidean3`, `heisenberg1`, `htype(k,q)`, ...).
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` a valid pointer.
 */
enum CchStatus cch_system_builtin(const char *name, struct CchSystem **out);

/**
 * System from text: one field per line, comma-separated polynomial
 * components in `x1..xn`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` a valid pointer.
 */
enum CchStatus cch_system_parse(const char *text, struct CchSystem **out);

/**
 * # Safety
 * `sys` must be null or a handle from a `cch_system_*` constructor, not
 * yet freed.
 */
void cch_system_free(struct CchSystem *sys);

/**
 * Ambient dimension and number of fields.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CchStatus cch_system_dims(const struct CchSystem *sys, size_t *n, size_t *m);

/**
 * Monte-Carlo volume of the CC ball `B(x, r)`.
 *
 * # Safety
 * `x` must point to `n` doubles, `n` the system dimension.
 */
enum CchStatus cch_ball_volume(const struct CchSystem *sys,
                               const double *x,
                               size_t n,
                               double r,
                               size_t samples,
                               uint64_t seed,
                               double *out);

/**
 * Euclidean ball domain `B(center, radius)` at spacing `h` with its
 * boundary distance computed.
 *
 * # Safety
 * `center` must point to `n` doubles.
 */
enum CchStatus cch_domain_ball(const struct CchSystem *sys,
                               const double *center,
                               size_t n,
                               double radius,
                               double h,
                               struct CchDomain **out);

/**
 * # Safety
 * `d` must be null or a live domain handle.
 */
void cch_domain_free(struct CchDomain *d);

/**
 * Number of inside cells.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CchStatus cch_domain_inside_cells(const struct CchDomain *d, size_t *out);

/**
 * `cap_p(B̄(center, inner), Ω)` where `center` is any point of the domain.
 *
 * # Safety
 * `center` must point to `n` doubles.
 */
enum CchStatus cch_capacity_ball(const struct CchDomain *d,
                                 const double *center,
                                 size_t n,
                                 double inner,
                                 double p,
                                 double *out);

/**
 * Best Hardy ratio for `V = d(·, x0)^{-p}` on the domain.
 *
 * # Safety
 * `x0` must point to `n` doubles.
 */
enum CchStatus cch_point_hardy(const struct CchDomain *d,
                               const double *x0,
                               size_t n,
                               double p,
                               double *out);

/**
 * One-dimensional Hardy quotient supremum over power profiles.
 *
 * # Safety
 * `out` must be valid.
 */
enum CchStatus cch_hardy_1d(double p, size_t n_grid, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CC_HARDY_H */
