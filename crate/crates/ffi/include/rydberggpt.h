#ifndef RYDBERGGPT_H
#define RYDBERGGPT_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Status codes returned by every fallible call.
typedef enum RgptStatus {
  RGPT_STATUS_OK = 0,
  RGPT_STATUS_INVALID_ARGUMENT = 1,
  RGPT_STATUS_RESOURCE_LIMIT = 2,
  RGPT_STATUS_IO = 3,
  RGPT_STATUS_PARSE = 4,
  RGPT_STATUS_ARTIFACT_MISMATCH = 5,
  RGPT_STATUS_NUMERICAL_FAILURE = 6,
  RGPT_STATUS_INVALID_STATE = 7,
  // A Rust panic was caught at the boundary.
  RGPT_STATUS_INTERNAL = 8,
} RgptStatus;

// Opaque model handle.
typedef struct RgptModel RgptModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into this library on the same thread.
const char *rgpt_last_error_message(void);

// Loads a checkpoint file into a new model handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum RgptStatus rgpt_model_load(const char *path, struct RgptModel **out);

// Creates a freshly initialized model with the default architecture.
//
// # Safety
// `out` must be a valid pointer.
enum RgptStatus rgpt_model_init(uint64_t seed, struct RgptModel **out);

// Writes the model to a checkpoint file.
//
// # Safety
// `model` must come from this library and `path` must be NUL-terminated.
enum RgptStatus rgpt_model_save(const struct RgptModel *model, const char *path);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must come from this library and must not be used afterwards.
void rgpt_model_free(struct RgptModel *model);

// Number of trainable scalars, or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t rgpt_model_parameter_count(const struct RgptModel *model);

// Log-probabilities of `count` configurations on an `l`×`l` array.
//
// # Safety
// `configs` must hold `count*l*l` bytes and `out` room for `count` doubles.
enum RgptStatus rgpt_model_log_probs(const struct RgptModel *model,
                                     size_t l,
                                     double delta_over_omega,
                                     double rb_over_a,
                                     double beta_omega,
                                     const uint8_t *configs,
                                     size_t count,
                                     double *out);

// Draws `count` configurations; writes `count*l*l` bytes to `out`.
// `cached` selects the incremental sampler; both give identical output.
//
// # Safety
// `out` must have room for `count*l*l` bytes.
enum RgptStatus rgpt_model_sample(const struct RgptModel *model,
                                  size_t l,
                                  double delta_over_omega,
                                  double rb_over_a,
                                  double beta_omega,
                                  size_t count,
                                  uint64_t seed,
                                  bool cached,
                                  uint8_t *out);

// Exact observables of the ground state (`thermal == false`) or the thermal
// state at `beta_omega`. Writes energy, `<σx>` and staggered magnetization to
// `out[0..3]`.
//
// # Safety
// `out` must have room for 3 doubles.
enum RgptStatus rgpt_exact_observables(size_t l,
                                       double delta_over_omega,
                                       double rb_over_a,
                                       double beta_omega,
                                       bool thermal,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RYDBERGGPT_H */
