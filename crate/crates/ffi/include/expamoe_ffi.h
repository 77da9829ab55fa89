#ifndef EXPAMOE_FFI_H
#define EXPAMOE_FFI_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result codes.
typedef enum XpmoStatus {
  XPMO_STATUS_OK = 0,
  XPMO_STATUS_NULL_POINTER = 1,
  XPMO_STATUS_INVALID_ARGUMENT = 2,
  XPMO_STATUS_CONFIG = 3,
  XPMO_STATUS_CHECKPOINT = 4,
  XPMO_STATUS_IO = 5,
  XPMO_STATUS_SHAPE = 6,
  XPMO_STATUS_NUMERIC = 7,
  XPMO_STATUS_BUFFER_TOO_SMALL = 8,
  XPMO_STATUS_PANIC = 9,
  XPMO_STATUS_INTERNAL = 10,
} XpmoStatus;

// An adaptation session owning its model and registry.
typedef struct XpmoAdapter XpmoAdapter;

// A model checkpoint with its optional domain registry.
typedef struct XpmoModel XpmoModel;

// A standalone domain registry.
typedef struct XpmoRegistry XpmoRegistry;

// Outcome of a registry assignment.
typedef struct XpmoAssignment {
  size_t domain;
  bool is_new;
  double min_distance;
} XpmoAssignment;

// Outcome of one adaptation step.
typedef struct XpmoStepReport {
  size_t domain_id;
  size_t sodd_domain;
  bool is_new;
  size_t pass_count;
  double loss;
  bool updated;
} XpmoStepReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message, NUL-terminated and
// truncated to `len`. Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t xpmo_last_error(char *buf, size_t len);

// Loads an `XPMO` checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum XpmoStatus xpmo_model_load(const char *path, struct XpmoModel **out);

// Loads a checkpoint from memory.
//
// # Safety
// `bytes` must point to `len` readable bytes; `out` must be writable.
enum XpmoStatus xpmo_model_load_bytes(const uint8_t *bytes, size_t len, struct XpmoModel **out);

// Writes the model and its registry to `path`.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum XpmoStatus xpmo_model_save(const struct XpmoModel *model, const char *path);

// # Safety
// `model` must be null or come from this library and not be used again.
void xpmo_model_free(struct XpmoModel *model);

// Number of classes, domain branches and the expected image side.
//
// # Safety
// `model` must come from this library; outputs must be writable or null.
enum XpmoStatus xpmo_model_info(const struct XpmoModel *model,
                                size_t *classes,
                                size_t *branches,
                                size_t *image_size);

// Predicted class per image through domain branch `domain_id`.
//
// # Safety
// `pixels` holds `n` images as described in the crate docs; `labels_out`
// has room for `n` values.
enum XpmoStatus xpmo_model_predict(const struct XpmoModel *model,
                                   const double *pixels,
                                   size_t n,
                                   size_t height,
                                   size_t width,
                                   size_t channels,
                                   size_t domain_id,
                                   size_t *labels_out);

// Spectral descriptor of one image. `out_len` receives the descriptor
// length; with a short or null `out`, nothing is written and
// `BufferTooSmall` is returned.
//
// # Safety
// `pixels` holds one image; `out` is null or has room for `capacity`.
enum XpmoStatus xpmo_descriptor(const double *pixels,
                                size_t height,
                                size_t width,
                                size_t channels,
                                size_t crop_radius,
                                bool log_compress,
                                double *out,
                                size_t capacity,
                                size_t *out_len);

// Copies the registry stored in a checkpoint.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum XpmoStatus xpmo_registry_from_model(const struct XpmoModel *model, struct XpmoRegistry **out);

// # Safety
// `registry` must be null or come from this library and not be used again.
void xpmo_registry_free(struct XpmoRegistry *registry);

// Domain count, descriptor dimension and novelty threshold.
//
// # Safety
// `registry` must come from this library; outputs must be writable or null.
enum XpmoStatus xpmo_registry_info(const struct XpmoRegistry *registry,
                                   size_t *domains,
                                   size_t *dim,
                                   double *tau);

// Batch decision for `batch` descriptors of length `dim`, row-major.
// The registry is not modified.
//
// # Safety
// `descriptors` holds `batch·dim` values; `out` must be writable.
enum XpmoStatus xpmo_registry_assign(const struct XpmoRegistry *registry,
                                     const double *descriptors,
                                     size_t batch,
                                     size_t dim,
                                     struct XpmoAssignment *out);

// Starts an adaptation session from a warmed-up checkpoint. `config_toml`
// is an experiment config (null for defaults); its `adapt` and `spectral`
// sections apply. The model handle stays valid and unchanged.
//
// # Safety
// `model` must come from this library; `config_toml` is null or
// NUL-terminated; `out` must be writable.
enum XpmoStatus xpmo_adapter_new(const struct XpmoModel *model,
                                 const char *config_toml,
                                 struct XpmoAdapter **out);

// One adaptation step on an unlabeled batch. `labels_out` may be null;
// otherwise it receives `n` predictions.
//
// # Safety
// `pixels` holds `n` images; `report` must be writable.
enum XpmoStatus xpmo_adapter_step(struct XpmoAdapter *adapter,
                                  const double *pixels,
                                  size_t n,
                                  size_t height,
                                  size_t width,
                                  size_t channels,
                                  struct XpmoStepReport *report,
                                  size_t *labels_out);

// Snapshot of the session's model and registry as a new model handle.
//
// # Safety
// `adapter` must come from this library; `out` must be writable.
enum XpmoStatus xpmo_adapter_model(const struct XpmoAdapter *adapter, struct XpmoModel **out);

// # Safety
// `adapter` must be null or come from this library and not be used again.
void xpmo_adapter_free(struct XpmoAdapter *adapter);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXPAMOE_FFI_H */
