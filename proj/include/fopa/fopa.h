/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface to the placement library. Every object is an opaque handle;
 * every fallible call returns a status and leaves a message for
 * fopa_last_error() on the calling thread.
 */
#ifndef FOPA_FOPA_H
#define FOPA_FOPA_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FOPA_API __declspec(dllexport)
#else
#define FOPA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fopa_status {
  FOPA_OK = 0,
  FOPA_ERR_DIMENSION = 1,
  FOPA_ERR_CONTRACT = 2,
  FOPA_ERR_INPUT = 3,
  FOPA_ERR_PARSE = 4,
  FOPA_ERR_DATA = 5,
  FOPA_ERR_CONFIG = 6,
  FOPA_ERR_TRANSFER = 7,
  FOPA_ERR_TRAINING = 8,
  FOPA_ERR_NUMERIC = 9,
  FOPA_ERR_COUNTING = 10,
  FOPA_ERR_IO = 11,
  FOPA_ERR_ARGUMENT = 12, /* null handle, bad split name, short buffer */
  FOPA_ERR_INTERNAL = 13
} fopa_status;

FOPA_API const char *fopa_status_name(fopa_status status);
/* Message of the last failed call on this thread; "" after a success. */
FOPA_API const char *fopa_last_error(void);
FOPA_API const char *fopa_version(void);
/* Releases strings returned through char ** out-parameters. */
FOPA_API void fopa_string_free(char *text);

/* ---- corpus ------------------------------------------------------------ */

typedef struct fopa_corpus fopa_corpus;

typedef struct fopa_corpus_options {
  uint64_t seed;
  int n_backgrounds;
  int n_foregrounds;
  int scales_per_pair;
  int image_size;
} fopa_corpus_options;

typedef struct fopa_pair_info {
  int pair_id;
  int bg_id;
  int fg_id;
  double scale;
  size_t n_annotations;
  int is_test;
} fopa_pair_info;

FOPA_API void fopa_corpus_options_default(fopa_corpus_options *options);
FOPA_API fopa_status fopa_corpus_generate(const fopa_corpus_options *options,
                                          fopa_corpus **out);
FOPA_API fopa_status fopa_corpus_load(const char *dir, fopa_corpus **out);
FOPA_API fopa_status fopa_corpus_save(const fopa_corpus *corpus, const char *dir);
FOPA_API void fopa_corpus_free(fopa_corpus *corpus);
FOPA_API fopa_status fopa_corpus_pair_count(const fopa_corpus *corpus, const char *split,
                                            size_t *count);
FOPA_API fopa_status fopa_corpus_pair_at(const fopa_corpus *corpus, const char *split,
                                         size_t index, fopa_pair_info *out);
FOPA_API fopa_status fopa_corpus_find_pair(const fopa_corpus *corpus, int pair_id,
                                           fopa_pair_info *out);
FOPA_API int fopa_corpus_image_size(const fopa_corpus *corpus);

/* ---- models ------------------------------------------------------------ */

typedef struct fopa_model fopa_model;

typedef enum fopa_model_kind { FOPA_MODEL_SOPA = 1, FOPA_MODEL_FOPA = 2 } fopa_model_kind;
typedef enum fopa_fusion { FOPA_FUSION_DYNAMIC = 0, FOPA_FUSION_CONCAT = 1 } fopa_fusion;

typedef struct fopa_train_options {
  int epochs;
  double lr;
  int lr_halving_period;
  double lambda_mimic;
  int batch_size;
  uint64_t seed;
  int transfer_prior;
  int freeze_encoder;
  int mimic_enabled;
  /* architecture */
  int image_size;
  int stages;
  int base_channels;
  int feature_dim;
  int kernel_size;
  int n_scales;
  fopa_fusion fusion;
  int onehot_bins; /* 0 selects the centred-canvas input */
} fopa_train_options;

typedef struct fopa_epoch_stats {
  int epoch;
  double lr;
  double bce;
  double mimic;
  double total;
  double train_bacc;
  uint32_t bg_encoder_checksum;
} fopa_epoch_stats;

typedef void (*fopa_epoch_fn)(const fopa_epoch_stats *stats, void *user);

typedef struct fopa_model_info {
  fopa_model_kind kind;
  int image_size;
  int stages;
  int base_channels;
  int feature_dim;
  int kernel_size;
  int n_scales;
  fopa_fusion fusion;
  int onehot_bins;
  int bg_encoder_frozen;
  size_t parameter_count;
  uint32_t checksum;
} fopa_model_info;

/* Desk-scale defaults. */
FOPA_API void fopa_train_options_default(fopa_train_options *options);

FOPA_API fopa_status fopa_train_sopa(const fopa_corpus *corpus, const fopa_train_options *options,
                                     fopa_epoch_fn on_epoch, void *user, fopa_model **out);
/* `sopa` may be NULL only when neither transfer nor mimicking is requested. */
FOPA_API fopa_status fopa_train_fopa(const fopa_corpus *corpus, const fopa_model *sopa,
                                     const fopa_train_options *options, fopa_epoch_fn on_epoch,
                                     void *user, fopa_model **out);
/* Chooses the mimic weight among `candidates` on a held-out share of the
 * training pairs. `validation_bacc` receives one value per candidate and may
 * be NULL. */
FOPA_API fopa_status fopa_select_mimic_weight(const fopa_corpus *corpus,
                                              const fopa_train_options *options,
                                              const double *candidates, size_t n_candidates,
                                              int epochs, double validation_share,
                                              double *chosen, double *validation_bacc);

FOPA_API fopa_status fopa_model_load(const char *path, fopa_model **out);
FOPA_API fopa_status fopa_model_save(const fopa_model *model, const char *path);
FOPA_API void fopa_model_free(fopa_model *model);
FOPA_API fopa_status fopa_model_describe(const fopa_model *model, fopa_model_info *out);

/* ---- evaluation -------------------------------------------------------- */

typedef struct fopa_eval_result {
  uint64_t tp, fp, tn, fn;
  double f1;
  double bacc;
  size_t pairs;
} fopa_eval_result;

FOPA_API fopa_status fopa_evaluate(const fopa_model *model, const fopa_corpus *corpus,
                                   const char *split, double threshold, fopa_eval_result *out);

/* Score of every placement for a pair: one dense pass for the dense model,
 * one composite pass per location for the composite classifier. `scores`
 * holds `capacity` values, row-major. */
FOPA_API fopa_status fopa_score_map(const fopa_model *model, const fopa_corpus *corpus,
                                    int pair_id, double *scores, size_t capacity, int *width,
                                    int *height);
FOPA_API fopa_status fopa_write_heatmap(const double *scores, int width, int height,
                                        const char *path);

typedef struct fopa_selection {
  int best_x, best_y;
  double best_score;
  int worst_x, worst_y;
  double worst_score;
} fopa_selection;

FOPA_API fopa_status fopa_select(const double *scores, int width, int height,
                                 fopa_selection *out);
/* Writes the composite of the pair's object centred at (x, y) as PPM. */
FOPA_API fopa_status fopa_write_composite(const fopa_corpus *corpus, int pair_id, int x, int y,
                                          const char *path);

/* ---- efficiency -------------------------------------------------------- */

typedef struct fopa_bench_options {
  int repetitions; /* at least 10 */
  int warmup;
  int enumeration_repetitions;
  int measure_enumeration;
  int with_accuracy; /* evaluate both models on the test split */
} fopa_bench_options;

FOPA_API void fopa_bench_options_default(fopa_bench_options *options);
/* Times both models on one pair; `table` and `values` receive the
 * tab-separated comparison and key=value lines. */
FOPA_API fopa_status fopa_bench(const fopa_model *sopa, const fopa_model *fopa,
                                const fopa_corpus *corpus, int pair_id,
                                const fopa_bench_options *options, char **table,
                                char **values);

#ifdef __cplusplus
}
#endif

#endif /* FOPA_FOPA_H */
