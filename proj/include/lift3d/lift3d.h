/* C interface to the reconstruction engine. All functionality is reachable
 * through an opaque session holding the active configuration; commands
 * return status codes and leave their outputs under the configured outdir.
 */
#ifndef LIFT3D_LIFT3D_H
#define LIFT3D_LIFT3D_H

#ifdef __cplusplus
extern "C" {
#endif

typedef enum l3d_status {
  L3D_OK = 0,
  L3D_ERR_INVALID = 1, /* bad usage, unknown key, invalid configuration */
  L3D_ERR_RUNTIME = 2  /* missing file, format error, numeric failure */
} l3d_status;

typedef struct l3d_session l3d_session;

typedef void (*l3d_log_fn)(const char* line, void* user);

l3d_session* l3d_session_new(void);
void l3d_session_free(l3d_session* session);

/* Message from the most recent failing call; empty string when none. */
const char* l3d_last_error(const l3d_session* session);

void l3d_set_logger(l3d_session* session, l3d_log_fn fn, void* user);

l3d_status l3d_config_load(l3d_session* session, const char* path);
/* "key=value"; later calls win. */
l3d_status l3d_config_set(l3d_session* session, const char* key_eq_value);
l3d_status l3d_config_validate(l3d_session* session);
/* Effective configuration text; release with l3d_string_free. */
char* l3d_config_render(const l3d_session* session);
void l3d_string_free(char* text);

/* Write the reference bundle (rgb/mask/depth) for the configured scene. */
l3d_status l3d_run_synth(l3d_session* session);
/* Stage-1 and stage-2 optimization. */
l3d_status l3d_run_coarse(l3d_session* session);
l3d_status l3d_run_fine(l3d_session* session);
/* 36-frame turntable from the configured source (coarse / fine / mesh). */
l3d_status l3d_run_render(l3d_session* session);
/* Recompute metrics.json from checkpoints. */
l3d_status l3d_run_eval(l3d_session* session);
/* Finite-difference gradient suite; *n_failed receives the number of
 * failing checks (the call itself succeeds unless setup fails). */
l3d_status l3d_run_gradcheck(l3d_session* session, int* n_failed);

#ifdef __cplusplus
}
#endif

#endif /* LIFT3D_LIFT3D_H */
