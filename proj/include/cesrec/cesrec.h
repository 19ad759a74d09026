/* C interface to libcesrec. Every function returns a status code; on failure
 * cesrec_last_error() describes the most recent error on the calling thread.
 * Strings returned through char** are heap-allocated and must be released
 * with cesrec_string_free. JSON arguments may be NULL for defaults. */
#ifndef CESREC_H
#define CESREC_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CESREC_API __declspec(dllexport)
#else
#define CESREC_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cesrec_status {
  CESREC_OK = 0,
  CESREC_INVALID_ARGUMENT = 1,
  CESREC_IO = 2,
  CESREC_FORMAT = 3,
  CESREC_NOT_FOUND = 4,
  CESREC_NUMERIC = 5,
  CESREC_BACKEND = 6,
  CESREC_CONFLICT = 7,
  CESREC_INTERNAL = 8
} cesrec_status;

typedef struct cesrec_dataset cesrec_dataset;
typedef struct cesrec_service cesrec_service;

CESREC_API const char* cesrec_version(void);
CESREC_API const char* cesrec_status_name(cesrec_status status);
/* Message of the last failure on this thread; "" after a success. */
CESREC_API const char* cesrec_last_error(void);
/* JSON array of structured error details (offending ids, ...). */
CESREC_API const char* cesrec_last_error_details(void);
CESREC_API void cesrec_string_free(char* s);
/* "trace", "debug", "info", "warn", "error", "off". */
CESREC_API cesrec_status cesrec_set_log_level(const char* level);

/* ---- catalog-and-data ---------------------------------------------------- */

CESREC_API cesrec_status cesrec_dataset_load_movielens(const char* ratings_path, const char* movies_path,
                                                       cesrec_dataset** out);
CESREC_API cesrec_status cesrec_dataset_load_amazon(const char* reviews_path, const char* metadata_path,
                                                    cesrec_dataset** out);
CESREC_API cesrec_status cesrec_dataset_load_store(const char* path, cesrec_dataset** out);
/* kind: "preference-shift", "cycle" or "case-study"; config_json holds the
 * generator fields. */
CESREC_API cesrec_status cesrec_dataset_synthetic(const char* kind, const char* config_json, cesrec_dataset** out);
CESREC_API cesrec_status cesrec_dataset_save_store(const cesrec_dataset* dataset, const char* path);
/* {"items", "users", "events", "schema", "report": {...}} */
CESREC_API cesrec_status cesrec_dataset_summary(const cesrec_dataset* dataset, char** json_out);
/* {"candidates": [...], "target_index", "seed"} for one user. */
CESREC_API cesrec_status cesrec_dataset_sample_candidates(const cesrec_dataset* dataset, const char* user_id,
                                                          size_t candidate_size, uint64_t seed,
                                                          char** json_out);
CESREC_API void cesrec_dataset_free(cesrec_dataset* dataset);

/* ---- semantic-extractor -------------------------------------------------- */

/* Writes one semantic vector per catalog item. cache_path may be NULL. */
CESREC_API cesrec_status cesrec_embed_catalog(const cesrec_dataset* dataset, const char* provider_json,
                                              const char* cache_path, const char* out_path, char** stats_json);

/* ---- srs-engine ---------------------------------------------------------- */

CESREC_API cesrec_status cesrec_train_srs(const cesrec_dataset* dataset, const char* config_json,
                                          const char* out_path, char** summary_json);
/* Ranks the given items (JSON array of ids, NULL = whole catalog minus the
 * sequence) after `sequence_json` with a trained checkpoint. */
CESREC_API cesrec_status cesrec_srs_rank(const char* checkpoint_path, const char* sequence_json,
                                         const char* candidates_json, size_t top_n, char** json_out);

/* ---- dual-alignment ------------------------------------------------------ */

CESREC_API cesrec_status cesrec_train_adapter(const char* semantic_path, const char* srs_checkpoint,
                                              const char* hyper_json, const char* out_path,
                                              char** summary_json);

/* ---- pseudo-constructor -------------------------------------------------- */

CESREC_API cesrec_status cesrec_generate_tuning(const cesrec_dataset* dataset, size_t per_user, uint64_t seed,
                                                const char* out_path, char** summary_json);

/* ---- eval-harness -------------------------------------------------------- */

/* variants_csv: comma-separated subset of baseline,full,no_dual_alignment,
 * no_constructor (NULL = all). Writes reports under out_dir when non-NULL;
 * run_sweeps != 0 also runs the rounds / k / length sweeps. */
CESREC_API cesrec_status cesrec_run_eval(const cesrec_dataset* dataset, const char* experiment_json,
                                         const char* variants_csv, const char* checkpoint_dir,
                                         const char* out_dir, int run_sweeps, char** report_json);

/* ---- session-service ----------------------------------------------------- */

/* Loads srs.ckpt, adapter.ckpt and semantic.emb from checkpoint_dir.
 * options_json: {"store_dir", "ttl_s", "top_k", "loop": {...},
 * "constructor": "rule-based"|"remote-chat", "chat": {...},
 * "title_provider": {...}}. */
CESREC_API cesrec_status cesrec_service_create(const cesrec_dataset* dataset, const char* checkpoint_dir,
                                               const char* options_json, cesrec_service** out);
/* In-process dispatch of one API request, e.g. ("POST", "/sessions", body). */
CESREC_API cesrec_status cesrec_service_handle(cesrec_service* service, const char* method, const char* path,
                                               const char* body, int* http_status, char** response_json);
/* Binds host:port (0 = any free port) and reports the bound port. */
CESREC_API cesrec_status cesrec_service_bind(cesrec_service* service, const char* host, int port,
                                             int* bound_port);
/* Blocks serving HTTP until cesrec_service_stop. */
CESREC_API cesrec_status cesrec_service_listen(cesrec_service* service);
CESREC_API cesrec_status cesrec_service_stop(cesrec_service* service);
CESREC_API void cesrec_service_free(cesrec_service* service);

#ifdef __cplusplus
}
#endif

#endif
