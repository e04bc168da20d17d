#ifndef SEI_AL_H
#define SEI_AL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum SeiStatus {
  SEI_STATUS_OK = 0,
  SEI_STATUS_NULL_POINTER = 1,
  SEI_STATUS_INVALID_ARGUMENT = 2,
  SEI_STATUS_BUFFER_TOO_SMALL = 3,
  SEI_STATUS_CONFIG = 10,
  SEI_STATUS_SHAPE = 11,
  SEI_STATUS_NUMERIC = 12,
  SEI_STATUS_SELECTION = 13,
  SEI_STATUS_PARSE = 14,
  SEI_STATUS_CHECKPOINT = 15,
  SEI_STATUS_REPORT = 16,
  SEI_STATUS_IO = 17,
  SEI_STATUS_PANIC = 99,
} SeiStatus;

// Experiment configuration handle.
typedef struct SeiConfig SeiConfig;

// A list of I/Q records plus their sample rate.
typedef struct SeiDataset SeiDataset;

// Network parameters (query and key branches, heads, classifier).
typedef struct SeiModel SeiModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null if none.
//
// The pointer stays valid until the next failing call on this thread.
const char *sei_last_error(void);

// Library version as a static NUL-terminated string.
const char *sei_version(void);

// Creates a configuration holding the library defaults.
struct SeiConfig *sei_config_new(void);

// Parses a `key = value` configuration file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SeiStatus sei_config_load(const char *path, struct SeiConfig **out);

// Sets one configuration key from its textual value.
//
// # Safety
// `config` must be a live handle; `key` and `value` NUL-terminated strings.
enum SeiStatus sei_config_set(struct SeiConfig *config, const char *key, const char *value);

// Releases a configuration. Null is ignored.
//
// # Safety
// `config` must be null or a handle not yet freed.
void sei_config_free(struct SeiConfig *config);

// Simulates the dataset described by `config` (emitters, records, length, SNR).
//
// # Safety
// `config` must be a live handle and `out` a valid pointer.
enum SeiStatus sei_dataset_simulate(const struct SeiConfig *config,
                                    uint64_t seed,
                                    struct SeiDataset **out);

// Builds a dataset from interleaved I/Q samples.
//
// `iq` holds `count * length * 2` values, record-major, I before Q.
// `labels` is null or holds `count` entries; a negative label means unlabeled.
//
// # Safety
// Buffers must hold the stated number of elements; `out` must be valid.
enum SeiStatus sei_dataset_from_iq(const double *iq,
                                   size_t count,
                                   size_t length,
                                   const int32_t *labels,
                                   double sample_rate,
                                   struct SeiDataset **out);

// Reads an I/Q dataset file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SeiStatus sei_dataset_load(const char *path, struct SeiDataset **out);

// Writes a dataset in the I/Q file format.
//
// # Safety
// `dataset` must be a live handle and `path` a NUL-terminated string.
enum SeiStatus sei_dataset_save(const struct SeiDataset *dataset, const char *path);

// Number of records, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t sei_dataset_len(const struct SeiDataset *dataset);

// Samples per record (length of the first record), or 0 if empty.
//
// # Safety
// `dataset` must be null or a live handle.
size_t sei_dataset_record_length(const struct SeiDataset *dataset);

// Copies record `index` as interleaved I/Q into `out` (capacity `cap` values).
//
// # Safety
// `dataset` must be a live handle and `out` must hold `cap` doubles.
enum SeiStatus sei_dataset_samples(const struct SeiDataset *dataset,
                                   size_t index,
                                   double *out,
                                   size_t cap);

// Ground-truth emitter of record `index`, or -1 if unknown or out of range.
//
// # Safety
// `dataset` must be null or a live handle.
int64_t sei_dataset_truth(const struct SeiDataset *dataset, size_t index);

// Releases a dataset. Null is ignored.
//
// # Safety
// `dataset` must be null or a handle not yet freed.
void sei_dataset_free(struct SeiDataset *dataset);

// Creates a freshly initialised model for `num_classes` emitters and
// records of `length` samples, using the channel plan in `config`.
//
// # Safety
// `config` must be a live handle and `out` a valid pointer.
enum SeiStatus sei_model_new(const struct SeiConfig *config,
                             size_t num_classes,
                             size_t length,
                             uint64_t seed,
                             struct SeiModel **out);

// Loads a checkpoint; any architecture is accepted.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SeiStatus sei_model_load(const char *path, struct SeiModel **out);

// Writes a checkpoint tagged with `seed` and a free-form `stage` name.
//
// # Safety
// `model` must be a live handle; `path` and `stage` NUL-terminated strings.
enum SeiStatus sei_model_save(const struct SeiModel *model,
                              const char *path,
                              uint64_t seed,
                              const char *stage);

// Embedding width (rows written per record by [`sei_model_embed`]).
//
// # Safety
// `model` must be null or a live handle.
size_t sei_model_embed_dim(const struct SeiModel *model);

// Number of emitter classes the classifier predicts.
//
// # Safety
// `model` must be null or a live handle.
size_t sei_model_num_classes(const struct SeiModel *model);

// Writes eval-mode projection embeddings, `len(dataset) * embed_dim` values.
//
// # Safety
// Handles must be live and `out` must hold `cap` doubles.
enum SeiStatus sei_model_embed(const struct SeiModel *model,
                               const struct SeiDataset *dataset,
                               double *out,
                               size_t cap);

// Writes the predicted class of every record into `out` (capacity `cap`).
//
// # Safety
// Handles must be live and `out` must hold `cap` values.
enum SeiStatus sei_model_predict(const struct SeiModel *model,
                                 const struct SeiDataset *dataset,
                                 size_t *out,
                                 size_t cap);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void sei_model_free(struct SeiModel *model);

// K-center greedy over row-major embeddings.
//
// Picks `k` of the `num_candidates` rows, farthest first in cosine distance
// from the `num_centers` labeled rows, writing candidate indices to `out`.
//
// # Safety
// Buffers must hold the stated element counts; `out` must hold `k` values.
enum SeiStatus sei_select_kcenter(const double *candidates,
                                  size_t num_candidates,
                                  const double *centers,
                                  size_t num_centers,
                                  size_t dim,
                                  size_t k,
                                  size_t *out);

// BALD mutual information per record from `passes` stacked softmax outputs.
//
// `probs` is `passes * count * num_classes` values, pass-major; `out` receives
// `count` scores.
//
// # Safety
// `probs` must hold the stated element count and `out` must hold `count` values.
enum SeiStatus sei_bald_scores(const double *probs,
                               size_t passes,
                               size_t count,
                               size_t num_classes,
                               double *out);

// Runs a full experiment and writes the per-round test accuracy.
//
// `accuracy` must hold `rounds + 1` values; `written` receives the number of
// rounds actually reported (fewer if the pool ran out). The run directory is
// written only if `out_dir` is set in the configuration.
//
// # Safety
// `config` must be a live handle; `accuracy` must hold `cap` doubles and
// `written` must be valid.
enum SeiStatus sei_run_experiment(const struct SeiConfig *config,
                                  double *accuracy,
                                  size_t cap,
                                  size_t *written);

// Aggregates run directories below `dir` and writes `curves.csv` there.
//
// # Safety
// `dir` must be a NUL-terminated string.
enum SeiStatus sei_report(const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEI_AL_H */
