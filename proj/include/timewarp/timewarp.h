#ifndef TIMEWARP_H
#define TIMEWARP_H

/* C interface to the timewarp library. Every call returns a status code;
 * on failure tw_last_error() describes the problem (per thread). Handles
 * are opaque and owned by the caller once created. */

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#define TW_OK 0
#define TW_USAGE_ERROR 1   /* bad arguments, config or missing keys */
#define TW_RUNTIME_ERROR 2 /* I/O, numerical or integrity failures */

typedef struct tw_run tw_run;
typedef struct tw_system tw_system;
typedef struct tw_flow tw_flow;

const char* tw_version(void);
/* Message of the last failed call on this thread ("" after success). */
const char* tw_last_error(void);
void tw_set_log_level(const char* level); /* trace, debug, info, warn, error, off */

/* Run configuration: a JSON document plus "key=value" overrides. */
int tw_run_open(const char* config_path, const char* const* overrides, size_t n_overrides, tw_run** out);
int tw_run_open_json(const char* config_json, const char* const* overrides, size_t n_overrides, tw_run** out);
void tw_run_free(tw_run* run);

/* JSON summary of the last successful command on this run. Copies at most
 * `capacity` bytes including the terminator; `needed` receives the full size. */
int tw_run_report(const tw_run* run, char* buffer, size_t capacity, size_t* needed);
int tw_run_config(const tw_run* run, char* buffer, size_t capacity, size_t* needed);

int tw_gen_data(tw_run* run);
/* stage: "likelihood" or "acceptance"; parameter_count may be NULL. */
int tw_train(tw_run* run, const char* stage, int resume, int dry_run, long long* parameter_count);
/* checkpoint/output may be NULL for the defaults; length may be NULL. */
int tw_sample(tw_run* run, const char* checkpoint, const char* output, long long* length);
int tw_explore(tw_run* run, const char* checkpoint, const char* output, int* n_chains);
/* speedup may be NULL; it is NaN when undefined. */
int tw_analyze(tw_run* run, const char* chain, const char* reference, double reference_seconds, double* speedup);
/* passed: 1 when the KS tests do not reject equality (p > 0.01);
 * bonds_ok: 1 when every bond-length KS distance is below the threshold. */
int tw_eval_conditional(tw_run* run, const char* checkpoint, int self_compare, int* passed, int* bonds_ok);

/* Systems and potential energies. */
int tw_system_load(const char* path, tw_system** out);
void tw_system_free(tw_system* system);
int tw_system_n_atoms(const tw_system* system);
int tw_system_dimension(const tw_system* system);
/* Bead-chain energy of n_atoms x dimension row-major positions. */
int tw_system_energy(const tw_system* system, const double* positions, double* energy);

/* Trained flows. */
int tw_flow_load(const char* checkpoint, tw_flow** out);
void tw_flow_free(tw_flow* flow);
long long tw_flow_parameter_count(const tw_flow* flow);
/* `count` proposals from x: positions and auxiliaries are count x n x d
 * row-major, log_prob has `count` entries (each output may be NULL). */
int tw_flow_sample(tw_flow* flow, const tw_system* system, const double* x, int count, unsigned long long seed,
                   double* positions, double* auxiliaries, double* log_prob);
int tw_flow_log_density(tw_flow* flow, const tw_system* system, const double* x, const double* y_positions,
                        const double* y_auxiliaries, double* log_prob);

#ifdef __cplusplus
}
#endif

#endif
