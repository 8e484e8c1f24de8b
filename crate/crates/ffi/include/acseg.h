#ifndef ACSEG_H
#define ACSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum AcsegStatus {
  ACSEG_STATUS_OK = 0,
  ACSEG_STATUS_NULL_POINTER = 1,
  ACSEG_STATUS_INVALID_ARGUMENT = 2,
  // File could not be read or was malformed.
  ACSEG_STATUS_FORMAT = 3,
  ACSEG_STATUS_DIMENSION = 4,
  ACSEG_STATUS_NUMERIC = 5,
  ACSEG_STATUS_PANIC = 6,
} AcsegStatus;

// A trained concept generator.
typedef struct AcsegModel AcsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until
// the next call on the same thread.
const char *acseg_last_error(void);

// Library version as a static NUL-terminated string.
const char *acseg_version(void);

// Loads a checkpoint. On success `*out` owns a model that must be
// released with [`acseg_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AcsegStatus acseg_model_load(const char *path, struct AcsegModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`acseg_model_load`] and not be used afterwards.
void acseg_model_free(struct AcsegModel *model);

// Writes the prototype count and feature width.
//
// # Safety
// `model` must be a live handle; the out pointers may be null.
enum AcsegStatus acseg_model_shape(const struct AcsegModel *model,
                                   size_t *num_prototypes,
                                   size_t *embed_dim);

// Segments one `grid_h × grid_w` feature map given row-major as
// `grid_h·grid_w × dim` floats. Writes one concept index per patch into
// `labels` and, when `active_count` is not null, the number of concepts
// that own at least one patch.
//
// # Safety
// `features` must hold `grid_h·grid_w·dim` values and `labels`
// `grid_h·grid_w` slots.
enum AcsegStatus acseg_model_segment(const struct AcsegModel *model,
                                     const float *features,
                                     size_t grid_h,
                                     size_t grid_w,
                                     size_t dim,
                                     uint32_t *labels,
                                     size_t *active_count);

// Maximum-overlap one-to-one matching on a row-major `rows × cols`
// matrix. `matches[r]` receives the column matched to row `r`, or −1.
//
// # Safety
// `overlap` must hold `rows·cols` values and `matches` `rows` slots.
enum AcsegStatus acseg_hungarian(const double *overlap, size_t rows, size_t cols, int64_t *matches);

// Modularity training loss of soft assignments `soft` (`n × k`) on the
// affinity graph of `features` (`n × d`), both row-major.
//
// # Safety
// Buffers must hold the stated number of values; `loss` must be valid.
enum AcsegStatus acseg_modularity_loss(const double *features,
                                       size_t n,
                                       size_t d,
                                       const double *soft,
                                       size_t k,
                                       bool include_diagonal,
                                       double *loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACSEG_H */
