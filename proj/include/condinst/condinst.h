#ifndef CONDINST_H
#define CONDINST_H
/* C interface to the segmentation toolkit. A context accumulates key/value
 * configuration (from files and explicit sets), then runs one pipeline
 * command against it. Every key is validated against the schema of the
 * command being run; unknown keys are rejected.
 *
 * Commands: "gen-data", "train", "infer", "eval", "bench", "render", "sweep".
 * Status values double as process exit codes for the bundled CLI. */

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ci_status {
    CI_OK = 0,
    CI_USAGE_ERROR = 1,  /* bad arguments or configuration */
    CI_DATA_ERROR = 2,   /* missing or malformed files */
    CI_NUMERIC_ERROR = 3 /* numerical abort (training divergence) */
} ci_status;

typedef struct ci_context ci_context;

/* Library version string, for reproducibility records. */
const char* ci_version(void);

ci_context* ci_context_new(void);
void ci_context_free(ci_context* ctx);

/* Sets one configuration key (dotted, e.g. "train.iterations"). Values are
 * plain strings; lists are comma-separated. Later sets win. */
ci_status ci_set(ci_context* ctx, const char* key, const char* value);

/* Loads a flat key = value file ('#' starts a comment). Keys set afterwards
 * override the file. */
ci_status ci_load_config_file(ci_context* ctx, const char* path);

/* Drops all configuration accumulated so far. */
void ci_reset(ci_context* ctx);

/* Runs one command with the accumulated configuration. The command validates
 * every key against its schema, resolves defaults, does the work, and writes
 * its outputs (plus a run_config.json echo) under the "out" directory. */
ci_status ci_run(ci_context* ctx, const char* command);

/* Description of the most recent failure on this context; "" when none.
 * Owned by the context, valid until the next call on it. */
const char* ci_last_error(const ci_context* ctx);

/* JSON description of one command's options (every key with type, default,
 * and help line), or of all commands when `command` is NULL. Owned by the
 * context, valid until the next call on it. */
const char* ci_schema_json(ci_context* ctx, const char* command);

#ifdef __cplusplus
}
#endif
#endif /* CONDINST_H */
