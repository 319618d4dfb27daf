#ifndef DDAE_DDAE_H
#define DDAE_DDAE_H

/* C interface of the DDAE library. Every call returns a status code; on
 * failure ddae_last_error() describes the problem (thread-local, valid until
 * the next call on the same thread). Strings returned through char** are
 * owned by the caller and released with ddae_string_free. Handles are
 * released with their matching _free function; passing NULL to a _free
 * function is a no-op. */

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define DDAE_API __declspec(dllexport)
#else
#define DDAE_API __attribute__((visibility("default")))
#endif

typedef enum ddae_status {
  DDAE_OK = 0,
  DDAE_ERR_PARAMETER = 1, /* invalid configuration or argument */
  DDAE_ERR_CONTRACT = 2,  /* shapes, ranges or handles misused */
  DDAE_ERR_NUMERICAL = 3, /* non-finite state or degenerate math */
  DDAE_ERR_DATA = 4,      /* malformed dataset or file contents */
  DDAE_ERR_IO = 5,        /* filesystem failure */
  DDAE_ERR_INTERNAL = 6
} ddae_status;

typedef struct ddae_config ddae_config;
typedef struct ddae_dataset ddae_dataset;
typedef struct ddae_network ddae_network;
typedef struct ddae_classifier ddae_classifier;

DDAE_API const char* ddae_version(void);
DDAE_API const char* ddae_last_error(void);
DDAE_API const char* ddae_status_name(ddae_status s);
DDAE_API void ddae_string_free(char* s);

/* ---- configuration ---- */
DDAE_API ddae_status ddae_config_default(ddae_config** out);
/* Comma-separated preset names, applied left to right over the defaults. */
DDAE_API ddae_status ddae_config_from_preset(const char* names, ddae_config** out);
DDAE_API ddae_status ddae_config_load(const char* path, ddae_config** out);
/* Merges a JSON object into the configuration and validates the result. */
DDAE_API ddae_status ddae_config_patch(ddae_config* cfg, const char* json);
DDAE_API ddae_status ddae_config_to_json(const ddae_config* cfg, char** out);
/* 16 hex digits plus terminator. */
DDAE_API ddae_status ddae_config_hash(const ddae_config* cfg, char out[17]);
DDAE_API void ddae_config_free(ddae_config* cfg);
/* [{"name":..., "description":..., "patch":{...}}, ...] */
DDAE_API ddae_status ddae_preset_list(char** out_json);

/* ---- data ---- */
DDAE_API ddae_status ddae_dataset_load(const ddae_config* cfg, ddae_dataset** out);
DDAE_API ddae_status ddae_dataset_size(const ddae_dataset* data, int* train, int* test);
DDAE_API void ddae_dataset_free(ddae_dataset* data);

/* ---- networks ---- */
DDAE_API ddae_status ddae_network_create(const ddae_config* cfg, ddae_network** out);
DDAE_API ddae_status ddae_network_load(const char* path, ddae_network** out);
DDAE_API ddae_status ddae_network_save(const ddae_network* net, const char* path);
/* {"parameters":N, "weight_hash":"...", "taps":[{"key":..., "ordinal":..., "channels":C}], "config":{...}} */
DDAE_API ddae_status ddae_network_info(const ddae_network* net, char** out_json);
DDAE_API void ddae_network_free(ddae_network* net);

/* ---- experiment steps ----
 * Each step appends records to <output_dir>/records.jsonl when the config
 * names an output directory, and returns a JSON summary. */

/* Trains `net` in place (or a fresh network when *net is NULL). Checkpoints
 * go to <output_dir>/checkpoints when train.checkpoint_every > 0. */
DDAE_API ddae_status ddae_pretrain(const ddae_config* cfg, const ddae_dataset* data, ddae_network** net,
                                   char** summary);
DDAE_API ddae_status ddae_gridsearch(const ddae_config* cfg, const ddae_network* net, const ddae_dataset* data,
                                     char** summary);
/* One probe at a tap key ("up.1.0@16") and level t; t = 0 probes clean images. */
DDAE_API ddae_status ddae_probe(const ddae_config* cfg, const ddae_network* net, const ddae_dataset* data,
                                const char* tap, int t, char** summary);
/* Fine-tunes a copy of `net` truncated at (tap, t); NULL tap / t = 0 fall back to the config. */
DDAE_API ddae_status ddae_finetune(const ddae_config* cfg, const ddae_network* net, const ddae_dataset* data,
                                   const char* tap, int t, char** summary);
/* Alignment and uniformity at (tap, t) for each checkpoint file, in order. */
DDAE_API ddae_status ddae_metrics(const ddae_config* cfg, const char* const* checkpoints, int count,
                                  const ddae_dataset* data, const char* tap, int t, char** summary);

DDAE_API ddae_status ddae_classifier_train(const ddae_config* cfg, const ddae_network* net,
                                           const ddae_dataset* data, const char* tap, ddae_classifier** out,
                                           char** summary);
DDAE_API ddae_status ddae_classifier_save(const ddae_classifier* clf, const char* path);
DDAE_API ddae_status ddae_classifier_load(const char* path, ddae_classifier** out);
DDAE_API void ddae_classifier_free(ddae_classifier* clf);

/* Ancestral sampling; `clf` may be NULL. Guidance scale, label and scaling
 * come from the config. Empty or NULL paths skip that output. */
DDAE_API ddae_status ddae_sample(const ddae_config* cfg, const ddae_network* net, const ddae_classifier* clf,
                                 int count, const char* png_path, const char* archive_path, char** summary);
/* Frechet distance between the held-out images of `data` (or the archive
 * `real_archive` when not NULL) and the "images" tensor of `generated_archive`.
 * embedder: "pixel", "pca", or "encoder" (needs net + tap + t). */
DDAE_API ddae_status ddae_fid(const ddae_config* cfg, const ddae_dataset* data, const char* real_archive,
                              const char* generated_archive, const char* embedder, const ddae_network* net,
                              const char* tap, int t, char** summary);

/* Full pretrain + grid + monitoring pipeline. */
DDAE_API ddae_status ddae_run_pipeline(const ddae_config* cfg, const ddae_dataset* data, char** summary);
/* variants_json: [{"name":..., "patch":{...}}, ...], or NULL for the standard
 * level-count and beta-range variants. */
DDAE_API ddae_status ddae_ablate(const ddae_config* cfg, const ddae_dataset* data, const char* variants_json,
                                 char** summary);

/* Filters a record file by phase ("" for all) and key prefix and writes CSV
 * and/or SVG. */
DDAE_API ddae_status ddae_plot(const char* records_path, const char* phase, const char* key_prefix,
                               const char* csv_path, const char* svg_path, char** summary);

#ifdef __cplusplus
}
#endif

#endif
