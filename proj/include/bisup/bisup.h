#ifndef BISUP_BISUP_H
#define BISUP_BISUP_H

#if defined(_WIN32)
#define BISUP_API __declspec(dllexport)
#else
#define BISUP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bisup_status {
  BISUP_OK = 0,
  BISUP_ERR_INTERNAL = 1,
  BISUP_ERR_CONFIG = 2,
  BISUP_ERR_NUMERIC = 3,
  BISUP_ERR_IO = 4
} bisup_status;

/* Opaque handle for one completed command run. */
typedef struct bisup_run bisup_run;

/*
 * Runs one toolkit command ("synth", "calibrate", "trace", "ablate", "sweep",
 * "gradcheck") with a JSON config string. On success *out_run owns the result
 * and must be released with bisup_run_free. On failure *out_run is NULL and
 * bisup_last_error() describes the problem.
 */
BISUP_API bisup_status bisup_run_command(const char* command, const char* config_json,
                                         bisup_run** out_run);

/* Full report document as pretty-printed JSON. Owned by the run handle. */
BISUP_API const char* bisup_run_report_json(const bisup_run* run);

/* One-line human-readable summary. Owned by the run handle. */
BISUP_API const char* bisup_run_summary(const bisup_run* run);

BISUP_API void bisup_run_free(bisup_run* run);

/* Message for the most recent failure on this thread. Never NULL. */
BISUP_API const char* bisup_last_error(void);

BISUP_API const char* bisup_version(void);

#ifdef __cplusplus
}
#endif

#endif
