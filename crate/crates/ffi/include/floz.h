#ifndef FLOZ_H
#define FLOZ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes; the nonzero input, numerical and coverage codes match the
// exit codes of the `floz` tool.
typedef enum FlozStatus {
  FLOZ_STATUS_OK = 0,
  // NULL pointer, bad UTF-8 or inconsistent sizes.
  FLOZ_STATUS_INVALID_ARGUMENT = 1,
  // Parse, schema, domain or configuration error.
  FLOZ_STATUS_INPUT = 2,
  // Degenerate geometry or training failure.
  FLOZ_STATUS_NUMERICAL = 3,
  // Too few samples inside the latent ball.
  FLOZ_STATUS_COVERAGE = 4,
  // Internal panic caught at the boundary.
  FLOZ_STATUS_PANIC = 5,
} FlozStatus;

typedef struct FlozConfig FlozConfig;

typedef struct FlozMetadata FlozMetadata;

typedef struct FlozResult FlozResult;

typedef struct FlozSamples FlozSamples;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *floz_version(void);

// Message of the last failed call on this thread, or NULL. Valid until the
// next call on the same thread.
const char *floz_last_error_message(void);

// `{"error": {...}}` for the last failed call on this thread, or NULL.
const char *floz_last_error_json(void);

// Sample set from row-major `params` (`n × d`) and `log_p_hat` (`n`).
//
// # Safety
// `params` must point to `n * d` doubles and `log_p_hat` to `n` doubles.
enum FlozStatus floz_samples_new(const double *params,
                                 const double *log_p_hat,
                                 size_t n,
                                 size_t d,
                                 struct FlozSamples **out);

// Loads a sample CSV and its metadata JSON.
//
// # Safety
// Paths must be NUL-terminated; output pointers must be writable.
enum FlozStatus floz_samples_load(const char *samples_path,
                                  const char *metadata_path,
                                  struct FlozSamples **out_samples,
                                  struct FlozMetadata **out_metadata);

// # Safety
// `s` must be NULL or a handle from this library not yet freed.
void floz_samples_free(struct FlozSamples *s);

// # Safety
// `s` must be a live handle and `out` writable.
enum FlozStatus floz_samples_shape(const struct FlozSamples *s, size_t *out_n, size_t *out_d);

// Prior metadata from its JSON text.
//
// # Safety
// `json` must be NUL-terminated and `out` writable.
enum FlozStatus floz_metadata_from_json(const char *json, struct FlozMetadata **out);

// # Safety
// `m` must be NULL or a live handle.
void floz_metadata_free(struct FlozMetadata *m);

// Run configuration from JSON text; NULL gives the defaults.
//
// # Safety
// `json` must be NULL or NUL-terminated; `out` writable.
enum FlozStatus floz_config_from_json(const char *json, struct FlozConfig **out);

// # Safety
// `c` must be NULL or a live handle.
void floz_config_free(struct FlozConfig *c);

// Trains a flow on `samples` and extracts the evidence. `config` may be
// NULL for the defaults.
//
// # Safety
// Handles must be live (or NULL for `config`); `out` writable.
enum FlozStatus floz_estimate(const struct FlozSamples *samples,
                              const struct FlozMetadata *metadata,
                              const struct FlozConfig *config,
                              struct FlozResult **out);

// # Safety
// `r` must be NULL or a live handle.
void floz_result_free(struct FlozResult *r);

// # Safety
// `r` must be a live handle; outputs writable or NULL to skip.
enum FlozStatus floz_result_evidence(const struct FlozResult *r,
                                     double *out_log_z,
                                     double *out_uncertainty,
                                     size_t *out_n_in_ball);

// Full result document as JSON, owned by the result handle.
//
// # Safety
// `r` must be NULL or a live handle.
const char *floz_result_json(const struct FlozResult *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOZ_H */
