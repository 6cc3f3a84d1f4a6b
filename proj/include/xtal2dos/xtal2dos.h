/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface of the xtal2dos library.
 *
 * Every function returning x2d_status leaves a message for the calling thread
 * in x2d_last_error() when it fails. Strings returned through char** out
 * parameters are owned by the caller and released with x2d_string_free().
 */
#ifndef XTAL2DOS_XTAL2DOS_H
#define XTAL2DOS_XTAL2DOS_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define X2D_API __declspec(dllexport)
#else
#define X2D_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum x2d_status {
  X2D_OK = 0,
  X2D_ERR_INVALID_ARGUMENT = 1,
  X2D_ERR_DIMENSION = 2,
  X2D_ERR_DOMAIN = 3,
  X2D_ERR_VALIDATION = 4,
  X2D_ERR_CONFIG = 5,
  X2D_ERR_IO = 6,
  X2D_ERR_FORMAT = 7,
  X2D_ERR_NUMERIC = 8,
  X2D_ERR_INTERNAL = 99
} x2d_status;

typedef enum x2d_split { X2D_SPLIT_TRAIN = 0, X2D_SPLIT_VAL = 1, X2D_SPLIT_TEST = 2, X2D_SPLIT_ALL = 3 } x2d_split;

typedef struct x2d_dataset x2d_dataset;
typedef struct x2d_trainer x2d_trainer;

X2D_API const char* x2d_version(void);
/* Message of the last failure on this thread; "" when none. */
X2D_API const char* x2d_last_error(void);
/* Short machine-readable name ("config", "io", ...). */
X2D_API const char* x2d_status_name(x2d_status status);
X2D_API void x2d_string_free(char* s);
/* Worker count for the dense kernels; *effective receives the count in use. */
X2D_API x2d_status x2d_set_threads(int threads, int* effective);

/* Parses an x2d_split name: train, val, test or all. */
X2D_API x2d_status x2d_split_parse(const char* name, x2d_split* out);

/* ---- configuration (JSON text) ---- */
X2D_API x2d_status x2d_config_default(char** json_out);
/* Applies the keys of override_json (may be NULL) on top of base_json (NULL
 * means defaults). Does not validate cross-field rules. */
X2D_API x2d_status x2d_config_merge(const char* base_json, const char* override_json, char** json_out);
/* X2D_ERR_CONFIG with every problem listed in x2d_last_error() when invalid. */
X2D_API x2d_status x2d_config_validate(const char* json);

/* ---- datasets ---- */
X2D_API x2d_status x2d_dataset_generate(size_t count, uint64_t seed, size_t l_y, x2d_dataset** out);
/* Loads a JSONL file using l_y, d_atom, n_max_nbr, grid, split ratios and seed
 * from the configuration; splits are assigned on load. */
X2D_API x2d_status x2d_dataset_load(const char* path, const char* config_json, x2d_dataset** out);
X2D_API x2d_status x2d_dataset_save(const x2d_dataset* dataset, const char* path);
X2D_API x2d_status x2d_dataset_size(const x2d_dataset* dataset, x2d_split split, size_t* out);
X2D_API void x2d_dataset_free(x2d_dataset* dataset);

/* ---- training ---- */
X2D_API x2d_status x2d_trainer_create(const char* config_json, x2d_trainer** out);
X2D_API x2d_status x2d_trainer_load(const char* path, x2d_trainer** out);
X2D_API x2d_status x2d_trainer_save(const x2d_trainer* trainer, const char* path);
X2D_API void x2d_trainer_free(x2d_trainer* trainer);
X2D_API x2d_status x2d_trainer_config(const x2d_trainer* trainer, char** json_out);
/* Completed epochs. */
X2D_API x2d_status x2d_trainer_epoch(const x2d_trainer* trainer, size_t* out);
/* Grid spacing used by the Wasserstein distance in later evaluations. */
X2D_API x2d_status x2d_trainer_set_bin_width(x2d_trainer* trainer, double bin_width);
/* Total epoch target stored in the trainer's config; used when resuming. */
X2D_API x2d_status x2d_trainer_set_epochs(x2d_trainer* trainer, size_t epochs);
X2D_API x2d_status x2d_trainer_parameter_count(const x2d_trainer* trainer, size_t* out);

X2D_API const char* x2d_train_log_header(void);
/* One training epoch followed by validation metrics. With validation NULL the
 * train and val splits of dataset are used; otherwise all of dataset trains
 * and all of validation is scored. An empty validation set leaves the metric
 * columns empty. *log_row (optional) receives the CSV log row. */
X2D_API x2d_status x2d_trainer_fit_epoch(x2d_trainer* trainer, const x2d_dataset* dataset,
                                         const x2d_dataset* validation, double* loss, char** log_row);
X2D_API x2d_status x2d_trainer_evaluate(x2d_trainer* trainer, const x2d_dataset* dataset, x2d_split split,
                                        char** report_json);
X2D_API x2d_status x2d_trainer_predict_csv(x2d_trainer* trainer, const x2d_dataset* dataset, x2d_split split,
                                           char** csv);

/* ---- benchmark ---- */
/* options_json keys: config (object), samples, warmup, repeats, decoders (array), threads. */
X2D_API x2d_status x2d_bench_run(const char* options_json, char** report_json);

#ifdef __cplusplus
}
#endif

#endif /* XTAL2DOS_XTAL2DOS_H */
