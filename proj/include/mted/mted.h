#ifndef MTED_H
#define MTED_H

/* C interface to the editing pipeline. Every call returns a status; on
   failure mted_last_error() holds the message for the calling thread.
   Strings handed out by the library are freed with mted_string_free. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define MTED_API __attribute__((visibility("default")))
#else
#define MTED_API
#endif

typedef enum {
  MTED_OK = 0,
  MTED_ERR_DIMENSION = 1,
  MTED_ERR_DOMAIN = 2,
  MTED_ERR_NUMERIC = 3,
  MTED_ERR_USAGE = 4,
  MTED_ERR_CONFIG = 5,
  MTED_ERR_IO = 6,
  MTED_ERR_FORMAT = 7,
  MTED_ERR_CORRUPTION = 8,
  MTED_ERR_SEQUENCING = 9,
  MTED_ERR_PLACEMENT = 10,
  MTED_ERR_INTERNAL = 11
} mted_status;

typedef struct mted_config mted_config;
typedef struct mted_models mted_models;

/* Receives progress lines; `user` is passed through untouched. */
typedef void (*mted_log_fn)(const char* line, void* user);

MTED_API const char* mted_last_error(void);
MTED_API const char* mted_status_name(mted_status s);
MTED_API void mted_string_free(char* s);

MTED_API const char* mted_version(void);
MTED_API const char* mted_build_hash(void);
MTED_API int mted_checkpoint_format_version(void);
MTED_API int mted_corpus_format_version(void);

/* path may be NULL for the defaults. Overrides are "dotted.key=value" and
   win over the file. */
MTED_API mted_status mted_config_create(const char* path, const char* const* overrides, size_t n_overrides,
                                        mted_config** out);
MTED_API void mted_config_destroy(mted_config* cfg);
MTED_API mted_status mted_config_json(const mted_config* cfg, char** out);
MTED_API uint64_t mted_config_hash(const mted_config* cfg);

/* shadows: 1 on, 0 off, -1 as configured. */
MTED_API mted_status mted_synth(const mted_config* cfg, uint64_t seed, int train_count, int test_count, int shadows,
                                const char* out_dir);

/* Newline-separated sample ids of one split ("" or NULL for all). */
MTED_API mted_status mted_corpus_ids(const char* dir, const char* split, char** out);

/* Trains one stage on the train split of data_dir into out_dir. stop_after
   > 0 stops after that many epochs in total, leaving a resumable
   checkpoint. */
MTED_API mted_status mted_train(const mted_config* cfg, int stage, const char* data_dir, const char* out_dir,
                                int stop_after, mted_log_fn log, void* user);

MTED_API mted_status mted_models_load(const mted_config* cfg, const char* ckpt_dir, mted_log_fn log, void* user,
                                      mted_models** out);
MTED_API void mted_models_destroy(mted_models* m);

typedef struct {
  const char* scene_id;
  const char* proto_id; /* NULL keeps the scene's own object */
  int has_pose;         /* 0 keeps the scene's own pose */
  double x, y, yaw;     /* metres, radians */
  const char* mode;     /* "mask-bounded" | "unconstrained"; NULL = mask-bounded */
  uint64_t seed;
  int steps; /* 0 = config default */
} mted_edit_spec;

/* Parses "x,y,yaw" into the spec's pose. */
MTED_API mted_status mted_parse_pose(const char* text, mted_edit_spec* spec);

/* exchange 0 runs both branches independently with the gates closed. */
MTED_API mted_status mted_edit(const mted_config* cfg, const mted_models* models, const char* data_dir,
                               const mted_edit_spec* specs, size_t n_specs, int exchange, const char* out_dir,
                               mted_log_fn log, void* user);

/* Writes the JSON report to report_path and a CSV next to it; `summary`
   (optional) receives the mean metrics as JSON. */
MTED_API mted_status mted_eval(const char* pred_dir, const char* ref_dir, const char* report_path, char** summary);

/* Runs the finite-difference suite (one op when op is non-NULL and
   non-empty); one log line per check. */
MTED_API mted_status mted_gradcheck(const char* op, mted_log_fn log, void* user, int* failures);

/* Converts a corpus tensor file (.f32) into an 8-bit PPM. */
MTED_API mted_status mted_export_ppm(const char* in_path, const char* out_path);

#ifdef __cplusplus
}
#endif

#endif
