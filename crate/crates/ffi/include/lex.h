#ifndef LEX_H
#define LEX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum LexStatus {
  LEX_STATUS_OK = 0,
  LEX_STATUS_NULL_ARGUMENT = 1,
  LEX_STATUS_INVALID_ARGUMENT = 2,
  LEX_STATUS_CONFIG = 3,
  LEX_STATUS_DIMENSION = 4,
  LEX_STATUS_CONTRACT = 5,
  LEX_STATUS_PARSE = 6,
  LEX_STATUS_STATE = 7,
  LEX_STATUS_NUMERICAL = 8,
  LEX_STATUS_CAPABILITY = 9,
  LEX_STATUS_IO = 10,
  LEX_STATUS_JSON = 11,
  LEX_STATUS_PANIC = 12,
} LexStatus;

// A table of features, labels and ground-truth masks.
typedef struct LexDataset LexDataset;

// A fitted imputation scheme.
typedef struct LexImputer LexImputer;

// A trained selector/predictor pair with its imputer.
typedef struct LexModel LexModel;

// Selection quality over a test set.
typedef struct LexMetrics {
  double tpr;
  double fpr;
  double fdr;
  double accuracy;
  double accuracy_per_mask;
  double effective_rate;
  size_t n_mask_samples;
  size_t n_instances;
} LexMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *lex_version(void);

// Message of the last failing call on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *lex_last_error(void);

// Generates `n` rows of the synthetic dataset `name` ("S1", "S2", "S3").
enum LexStatus lex_dataset_generate(const char *name,
                                    size_t n,
                                    uint64_t seed,
                                    struct LexDataset **out);

enum LexStatus lex_dataset_load(const char *path, struct LexDataset **out);

enum LexStatus lex_dataset_save(const struct LexDataset *ds, const char *path);

// Number of rows, or 0 for NULL.
size_t lex_dataset_rows(const struct LexDataset *ds);

// Number of features, or 0 for NULL.
size_t lex_dataset_features(const struct LexDataset *ds);

void lex_dataset_free(struct LexDataset *ds);

// Fits the imputer described by a JSON spec, e.g. `{"kind": "gmm", "components": 10}`.
enum LexStatus lex_imputer_fit(const char *spec_json,
                               const struct LexDataset *train,
                               uint64_t seed,
                               struct LexImputer **out);

enum LexStatus lex_imputer_load(const char *path, struct LexImputer **out);

enum LexStatus lex_imputer_save(const struct LexImputer *imp, const char *path);

// Writes `x` with the coordinates where `z` is 0 replaced by an imputed draw.
// `x`, `z` and `out` each hold `d` values.
enum LexStatus lex_imputer_impute(const struct LexImputer *imp,
                                  const double *x,
                                  const uint8_t *z,
                                  size_t d,
                                  uint64_t seed,
                                  double *out);

void lex_imputer_free(struct LexImputer *imp);

// Trains a model from a JSON run config on `train` with a fitted imputer.
// When both `test` and `metrics` are non-NULL the model is evaluated on `test`.
enum LexStatus lex_model_train(const char *config_json,
                               const struct LexDataset *train,
                               const struct LexImputer *imputer,
                               const struct LexDataset *test,
                               struct LexModel **out,
                               struct LexMetrics *metrics);

// Loads a run directory written by `lex train`.
enum LexStatus lex_model_load(const char *run_dir, struct LexModel **out);

// Number of input features of the model, or 0 for NULL.
size_t lex_model_features(const struct LexModel *m);

// Selector logits for `rows` inputs of width `d`; `out` holds `rows * d` values.
enum LexStatus lex_model_selector_logits(const struct LexModel *m,
                                         const double *x,
                                         size_t rows,
                                         size_t d,
                                         double *out);

// Mask-sampled selection metrics of the model on `ds`.
enum LexStatus lex_model_evaluate(const struct LexModel *m,
                                  const struct LexDataset *ds,
                                  size_t n_masks,
                                  uint64_t seed,
                                  struct LexMetrics *out);

void lex_model_free(struct LexModel *m);

// TPR, FPR and FDR of one mask `z` against the truth `z_star`, both of length `d`.
enum LexStatus lex_mask_metrics(const uint8_t *z,
                                const uint8_t *z_star,
                                size_t d,
                                double *tpr,
                                double *fpr,
                                double *fdr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LEX_H */
