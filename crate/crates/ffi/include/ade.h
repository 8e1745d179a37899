#ifndef ADE_H
#define ADE_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum AdeStatus {
  ADE_STATUS_OK = 0,
  ADE_STATUS_NULL_POINTER = 1,
  ADE_STATUS_INVALID_UTF8 = 2,
  ADE_STATUS_CONFIG = 3,
  ADE_STATUS_DATA = 4,
  ADE_STATUS_USAGE = 5,
  ADE_STATUS_SHAPE = 6,
  ADE_STATUS_NON_FINITE = 7,
  ADE_STATUS_DEGENERATE = 8,
  ADE_STATUS_INTEGRITY = 9,
  ADE_STATUS_FORMAT = 10,
  ADE_STATUS_IO = 11,
  ADE_STATUS_BUFFER_TOO_SMALL = 12,
  ADE_STATUS_PANIC = 13,
} AdeStatus;

typedef enum AdeAdjustMode {
  ADE_ADJUST_MODE_FREEZE_ONLY = 0,
  ADE_ADJUST_MODE_EXPAND_ONLY = 1,
  ADE_ADJUST_MODE_FREEZE_AND_EXPAND = 2,
} AdeAdjustMode;

/**
 * Initialization of blocks added by expansion. The random variants use a
 * gain of 1.
 */
typedef enum AdeInit {
  ADE_INIT_RANDOM_SCALED = 0,
  ADE_INIT_COPY_PREVIOUS = 1,
  ADE_INIT_IDENTITY_ZERO_OUT = 2,
} AdeInit;

/**
 * Experiment configuration.
 */
typedef struct AdeConfig AdeConfig;

/**
 * Block importance report.
 */
typedef struct AdeImportance AdeImportance;

/**
 * A model, possibly carrying a freeze mask or LoRA adapters.
 */
typedef struct AdeModel AdeModel;

typedef struct AdeModelInfo {
  size_t n_blocks;
  size_t d_model;
  size_t vocab_size;
  size_t max_seq_len;
  size_t n_params;
  size_t n_trainable;
  bool has_lora;
} AdeModelInfo;

/**
 * One row of an importance report. `block_index` is 1-based and compares
 * the inputs of blocks `block_index` and `block_index + 1`.
 */
typedef struct AdeImportanceEntry {
  size_t block_index;
  double mean_cos;
  double var_cos;
  double metric;
  size_t n_samples;
} AdeImportanceEntry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ade_version(void);

/**
 * Message of the last failure on this thread, or NULL if none. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *ade_last_error(void);

/**
 * Static name of a status code.
 */
const char *ade_status_name(enum AdeStatus status);

/**
 * Minutes-scale built-in config.
 *
 * # Safety
 * `out` must be valid for writing a pointer.
 */
enum AdeStatus ade_config_tiny(struct AdeConfig **out);

/**
 * Desk-scale built-in config.
 *
 * # Safety
 * `out` must be valid for writing a pointer.
 */
enum AdeStatus ade_config_desk(struct AdeConfig **out);

/**
 * Reads and validates a TOML config file.
 *
 * # Safety
 * `file` must be a NUL-terminated string and `out` valid for writing.
 */
enum AdeStatus ade_config_load(const char *file, struct AdeConfig **out);

/**
 * Writes the config as TOML.
 *
 * # Safety
 * `config` must come from this library and `file` be NUL-terminated.
 */
enum AdeStatus ade_config_save(const struct AdeConfig *config, const char *file);

/**
 * # Safety
 * `config` must come from this library.
 */
enum AdeStatus ade_config_set_seed(struct AdeConfig *config, uint64_t seed);

/**
 * Writes the 64-character hex config hash and a terminating NUL, so `buf`
 * needs room for 65 bytes.
 *
 * # Safety
 * `config` must come from this library and `buf` be writable for `cap`
 * bytes.
 */
enum AdeStatus ade_config_hash(const struct AdeConfig *config, char *buf, size_t cap);

/**
 * # Safety
 * `config` must be NULL or come from this library and not be used again.
 */
void ade_config_free(struct AdeConfig *config);

/**
 * A freshly initialized model with the config's architecture.
 *
 * # Safety
 * `config` must come from this library and `out` be valid for writing.
 */
enum AdeStatus ade_model_init(const struct AdeConfig *config, uint64_t seed, struct AdeModel **out);

/**
 * Loads the model from a checkpoint, verifying its content hash.
 *
 * # Safety
 * `file` must be NUL-terminated and `out` valid for writing.
 */
enum AdeStatus ade_model_load(const char *file, struct AdeModel **out);

/**
 * Saves the model as a checkpoint stamped with `config`, which may be
 * NULL.
 *
 * # Safety
 * `model` must come from this library, `config` be NULL or come from this
 * library, and `file` be NUL-terminated.
 */
enum AdeStatus ade_model_save(const struct AdeModel *model,
                              const struct AdeConfig *config,
                              const char *file);

/**
 * # Safety
 * `model` must come from this library and `out` be valid for writing.
 */
enum AdeStatus ade_model_info(const struct AdeModel *model, struct AdeModelInfo *out);

/**
 * Next-token logits for one sequence, row-major `[n_tokens, vocab_size]`.
 *
 * # Safety
 * `tokens` must hold `n_tokens` ids and `logits` be writable for `cap`
 * floats.
 */
enum AdeStatus ade_model_logits(const struct AdeModel *model,
                                const uint32_t *tokens,
                                size_t n_tokens,
                                float *logits,
                                size_t cap);

/**
 * Token-level perplexity over sequences packed back to back in `tokens`,
 * sequence `i` having `lengths[i]` tokens.
 *
 * # Safety
 * `lengths` must hold `n_seqs` values, `tokens` their sum, and `out` be
 * writable.
 */
enum AdeStatus ade_model_perplexity(const struct AdeModel *model,
                                    const uint32_t *tokens,
                                    const size_t *lengths,
                                    size_t n_seqs,
                                    double *out);

/**
 * # Safety
 * `model` must be NULL or come from this library and not be used again.
 */
void ade_model_free(struct AdeModel *model);

/**
 * Angular-distance importance of every consecutive block pair over a
 * `fraction` subsample (chosen with `seed`) of the given sequences.
 *
 * # Safety
 * As for [`ade_model_perplexity`]; `out` must be valid for writing.
 */
enum AdeStatus ade_importance_compute(const struct AdeModel *model,
                                      const uint32_t *tokens,
                                      const size_t *lengths,
                                      size_t n_seqs,
                                      double fraction,
                                      uint64_t seed,
                                      struct AdeImportance **out);

/**
 * Reads an importance CSV as written by the `importance` command.
 *
 * # Safety
 * `file` must be NUL-terminated and `out` valid for writing.
 */
enum AdeStatus ade_importance_load(const char *file, struct AdeImportance **out);

/**
 * Number of rows, one per consecutive block pair.
 *
 * # Safety
 * `report` must come from this library and `out` be writable.
 */
enum AdeStatus ade_importance_len(const struct AdeImportance *report, size_t *out);

/**
 * # Safety
 * `report` must come from this library and `out` be writable.
 */
enum AdeStatus ade_importance_entry(const struct AdeImportance *report,
                                    size_t index,
                                    struct AdeImportanceEntry *out);

/**
 * The `k` blocks with the highest metric, 1-based and ascending.
 *
 * # Safety
 * `report` must come from this library and `blocks` be writable for `cap`
 * values.
 */
enum AdeStatus ade_importance_top_k(const struct AdeImportance *report,
                                    size_t k,
                                    size_t *blocks,
                                    size_t cap);

/**
 * # Safety
 * `report` must be NULL or come from this library and not be used again.
 */
void ade_importance_free(struct AdeImportance *report);

/**
 * Selects the top `k` blocks of `report` and returns a new model with the
 * blocks expanded and/or the rest frozen. The input model is unchanged.
 *
 * # Safety
 * `model` and `report` must come from this library and `out` be writable.
 */
enum AdeStatus ade_surgery_apply(const struct AdeModel *model,
                                 const struct AdeImportance *report,
                                 size_t k,
                                 enum AdeAdjustMode mode,
                                 enum AdeInit init,
                                 uint64_t seed,
                                 struct AdeModel **out);

/**
 * Runs the `importance` command into `out_dir`.
 *
 * # Safety
 * `config` must come from this library; the paths must be NUL-terminated.
 */
enum AdeStatus ade_cmd_importance(const struct AdeConfig *config,
                                  const char *checkpoint,
                                  const char *out_dir);

/**
 * Runs the `surgery` command with the config's ADE settings.
 *
 * # Safety
 * `config` must come from this library; the paths must be NUL-terminated.
 */
enum AdeStatus ade_cmd_surgery(const struct AdeConfig *config,
                               const char *checkpoint,
                               const char *out_dir);

/**
 * Runs the `train` command for the config's arm. `checkpoint` and
 * `resume` may be NULL.
 *
 * # Safety
 * `config` must come from this library; non-NULL paths must be
 * NUL-terminated.
 */
enum AdeStatus ade_cmd_train(const struct AdeConfig *config,
                             const char *checkpoint,
                             const char *resume,
                             const char *out_dir);

/**
 * Runs the `eval` command. `reference` may be NULL.
 *
 * # Safety
 * `config` must come from this library; non-NULL paths must be
 * NUL-terminated.
 */
enum AdeStatus ade_cmd_eval(const struct AdeConfig *config,
                            const char *checkpoint,
                            const char *reference,
                            const char *out_dir);

/**
 * Runs the full reproduce grid. `passed` receives whether every check in
 * `acceptance.txt` passed.
 *
 * # Safety
 * `config` must come from this library, `out_dir` be NUL-terminated and
 * `passed` writable.
 */
enum AdeStatus ade_cmd_reproduce(const struct AdeConfig *config, const char *out_dir, bool *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADE_H */
