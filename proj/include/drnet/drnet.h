/*
 * drnet - instance-aware dynamic-routing network engine.
 *
 * C interface over the C++ core: opaque handles, integer status codes,
 * and a thread-local error message. All functions return DRN_OK (0) on
 * success; on failure the returned code doubles as a process exit code
 * (1 config error, 2 runtime error, 3 data error) and drn_last_error()
 * describes what went wrong.
 */
#ifndef DRNET_DRNET_H
#define DRNET_DRNET_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum drn_status {
    DRN_OK = 0,
    DRN_ERR_CONFIG = 1,
    DRN_ERR_RUNTIME = 2,
    DRN_ERR_DATA = 3
} drn_status;

const char* drn_version(void);

/* Message describing the most recent failure on this thread ("" if none). */
const char* drn_last_error(void);

/* ------------------------------------------------------------------ */
/* Configuration: flat key = value store with documented defaults.     */

typedef struct drn_config drn_config;

drn_config* drn_config_create(void);
void drn_config_destroy(drn_config* cfg);
drn_status drn_config_load_file(drn_config* cfg, const char* path);
drn_status drn_config_set(drn_config* cfg, const char* key, const char* value);
/* Copies the value into buf (NUL-terminated, truncated to cap). */
drn_status drn_config_get(const drn_config* cfg, const char* key, char* buf, size_t cap);

/* ------------------------------------------------------------------ */
/* Datasets.                                                            */

typedef struct drn_dataset drn_dataset;

/* split: "train" or "test"; sources and sizes come from the config. */
drn_status drn_dataset_open(const drn_config* cfg, const char* split, drn_dataset** out);
void drn_dataset_destroy(drn_dataset* ds);
int64_t drn_dataset_size(const drn_dataset* ds);
int drn_dataset_num_classes(const drn_dataset* ds);
int drn_dataset_label(const drn_dataset* ds, int64_t index);

/* ------------------------------------------------------------------ */
/* Models: a built network plus its precomputed cost table.             */

typedef struct drn_model drn_model;

/* Fresh, untrained network from the config's architecture keys. */
drn_status drn_model_build(const drn_config* cfg, drn_model** out);
/* Restore a checkpoint (architecture, weights, stage, temperature). */
drn_status drn_model_load(const char* checkpoint_path, drn_model** out);
drn_status drn_model_save(const drn_model* model, const char* checkpoint_path);
void drn_model_destroy(drn_model* model);

uint64_t drn_model_param_count(const drn_model* model);
/* Per-instance cost of full-branch inference, multiply-accumulate units. */
uint64_t drn_model_full_flops(const drn_model* model);
uint64_t drn_model_fixed_flops(const drn_model* model);
uint64_t drn_model_router_flops(const drn_model* model);
/* Exact count of routable subnetworks, as a decimal string. */
drn_status drn_model_candidate_count(const drn_model* model, char* buf, size_t cap);

/* Routed prediction for one dataset instance. threshold in (0,1];
 * pass 1.0 to execute every branch. The model's stored normalization
 * statistics are applied to the dataset handle. Outputs may be NULL. */
drn_status drn_model_predict(drn_model* model, drn_dataset* ds, int64_t index,
                             double threshold, int* prediction, double* confidence,
                             uint64_t* flops);

/* ------------------------------------------------------------------ */
/* Commands. Artifacts land under paths.out_dir; summary text (UTF-8)   */
/* is copied into text/cap when non-NULL.                               */

drn_status drn_cmd_train(const drn_config* cfg, char* text, size_t cap);
drn_status drn_cmd_eval(const drn_config* cfg, char* text, size_t cap);
drn_status drn_cmd_sweep(const drn_config* cfg, char* text, size_t cap);
drn_status drn_cmd_report(const drn_config* cfg, char* text, size_t cap);
drn_status drn_cmd_inspect(const drn_config* cfg, char* text, size_t cap);

#ifdef __cplusplus
}
#endif

#endif /* DRNET_DRNET_H */
