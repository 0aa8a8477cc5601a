#ifndef HYBRIDLM_CAPI_H
#define HYBRIDLM_CAPI_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Error codes returned by every function. On failure, hlm_last_error()
 * returns a human-readable message for the current thread. */
enum {
    HLM_OK = 0,
    HLM_ERR_INVALID_ARG = 1,  /* null handle / bad pointer */
    HLM_ERR_CONFIG = 2,       /* malformed or inconsistent configuration */
    HLM_ERR_PRECONDITION = 3, /* missing prerequisite (file, checkpoint, stage) */
    HLM_ERR_RUNTIME = 4       /* everything else */
};

const char* hlm_last_error(void);

/* ---- model handle ---- */

typedef struct hlm_model hlm_model;

/* config_kv_text: "key=value" lines; missing keys fall back to defaults */
int hlm_model_build(const char* config_kv_text, uint64_t seed, hlm_model** out);
int hlm_model_load(const char* path, hlm_model** out);
int hlm_model_save(const hlm_model* m, const char* path);
void hlm_model_free(hlm_model* m);

int hlm_model_param_counts(const hlm_model* m, uint64_t* total, uint64_t* active);
/* collapse every MoE layer to expert 0; *changed = 0 when already dense */
int hlm_model_prune_expert0(const hlm_model* m, hlm_model** out, int* changed);
/* int8 per-channel weight quantization; result holds dequantized weights */
int hlm_model_quantize_int8(const hlm_model* m, hlm_model** out);

/* ---- decode session handle ---- */

typedef struct hlm_session hlm_session;

int hlm_session_create(const hlm_model* m, hlm_session** out);
void hlm_session_free(hlm_session* s);
/* feeds tokens, advances caches; writes argmax of the last position */
int hlm_session_prefill(hlm_session* s, const int32_t* tokens, size_t n, int32_t* argmax_out);
int hlm_session_decode(hlm_session* s, int32_t token, int32_t* argmax_out);
int hlm_session_bytes(const hlm_session* s, uint64_t* bytes_out);

/* greedy decoding from a token prompt; writes up to max_new tokens and the
 * produced count */
int hlm_generate(const hlm_model* m, const int32_t* prompt, size_t n, size_t max_new,
                 int32_t* out_tokens, size_t* out_n);

/* ---- workflow entry points (one per CLI subcommand) ----
 * Each takes a resolved flat key=value config and an output directory, writes
 * its result files plus a manifest there, and returns an error code. */

int hlm_run_train(const char* config_kv_text, const char* out_dir);
int hlm_run_generate(const char* config_kv_text, const char* out_dir);
int hlm_run_bench(const char* config_kv_text, const char* out_dir);
int hlm_run_costmodel(const char* config_kv_text, const char* out_dir);
int hlm_run_eval(const char* config_kv_text, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif /* HYBRIDLM_CAPI_H */
