#ifndef DUOATTN_H
#define DUOATTN_H

/* C interface to the duoattn library.
 *
 * Objects are opaque handles created by duo_*_create/load/... functions and
 * released with the matching duo_*_free. Every fallible call returns a
 * duo_status; on failure duo_last_error() describes the problem for the
 * calling thread until its next failing call. Output handles are written only
 * on success. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(DUOATTN_BUILDING)
#    define DUO_API __declspec(dllexport)
#  else
#    define DUO_API __declspec(dllimport)
#  endif
#else
#  define DUO_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum duo_status {
    DUO_OK = 0,
    DUO_ERR_CONFIG = 1,
    DUO_ERR_SHAPE = 2,
    DUO_ERR_LENGTH = 3,
    DUO_ERR_CONTRACT = 4,
    DUO_ERR_NUMERIC = 5,
    DUO_ERR_TRAINING = 6,
    DUO_ERR_PARSE = 7,
    DUO_ERR_INVARIANT = 8,
    DUO_ERR_IO = 9,
    DUO_ERR_NULL_ARGUMENT = 10,
    DUO_ERR_INTERNAL = 11
} duo_status;

typedef struct duo_model duo_model;
typedef struct duo_gates duo_gates;
typedef struct duo_policy duo_policy;
typedef struct duo_dataset duo_dataset;

/* Progress lines from long-running calls (training logs). May be NULL. */
typedef void (*duo_progress_fn)(const char* line, void* user);

DUO_API const char* duo_version(void);
DUO_API const char* duo_status_name(duo_status status);
/* Message of the calling thread's most recent failure ("" if none). */
DUO_API const char* duo_last_error(void);

/* ---- configuration structs; call the *_defaults function first ---- */

typedef struct duo_model_spec {
    size_t n_layers, n_query_heads, n_kv_heads, head_dim, hidden_dim, ffn_dim, vocab_size;
    double rope_theta;
    size_t max_seq_len;
} duo_model_spec;

typedef struct duo_streaming {
    size_t sink_size;   /* default 128 */
    size_t recent_size; /* default 256 */
} duo_streaming;

typedef struct duo_prefill {
    size_t chunk_size; /* default 256 */
    int strict;        /* nonzero: chunk_size must be >= recent_size when streaming heads exist */
} duo_prefill;

/* Recall task vocabulary: 0 = BOS, [1, 1+filler) filler, the rest symbols. */
typedef struct duo_task {
    size_t vocab_size;    /* default 64 */
    size_t filler_tokens; /* default 16 */
    size_t passkey_len;   /* default 4 */
} duo_task;

typedef struct duo_train_config {
    double lambda;        /* default 0.05 */
    size_t steps;         /* default 2000 */
    size_t batch_size;    /* default 1 */
    double peak_lr;       /* default 0.02 */
    double floor_lr;      /* default 0.002 */
    size_t warmup_steps;  /* default 400 */
    size_t decay_steps;   /* default 400 */
    duo_streaming streaming;
    int clamp;            /* default 1 */
    int block_sparse;     /* default 0 */
    size_t block_size;    /* default 64 */
    uint64_t seed;
} duo_train_config;

typedef struct duo_pretrain_config {
    duo_task task;
    size_t n_needles;
    const size_t* train_lengths; /* NULL keeps the library default */
    size_t n_train_lengths;
    size_t batch_size, max_steps, warmup_steps;
    double lr, grad_clip, unlock_loss, target_accuracy;
    size_t eval_every, eval_samples;
    const size_t* eval_lengths; /* NULL keeps the library default */
    size_t n_eval_lengths;
} duo_pretrain_config;

typedef struct duo_niah_config {
    const size_t* context_lengths; /* NULL keeps {128, 256, 512, 1024} */
    size_t n_context_lengths;
    const double* depths; /* NULL keeps {0, 0.25, 0.5, 0.75, 1} */
    size_t n_depths;
    size_t trials; /* default 8 */
    duo_task task;
    duo_streaming streaming;
    duo_prefill prefill;
    uint64_t seed;
} duo_niah_config;

typedef struct duo_latency_config {
    const size_t* context_lengths; /* NULL keeps {256, 512, 1024, 2048} */
    size_t n_context_lengths;
    size_t decode_steps; /* default 32 */
    size_t warmup_steps; /* default 4 */
    duo_streaming streaming;
    duo_prefill prefill;
    uint64_t seed;
} duo_latency_config;

typedef struct duo_pretrain_result {
    size_t steps;
    double heldout_accuracy;
    int reached_target; /* 0 means the step cap was hit first (a warning) */
} duo_pretrain_result;

typedef struct duo_memory_summary {
    uint64_t retrieval_bytes, streaming_bytes, total_bytes, baseline_bytes;
    double reduction;
} duo_memory_summary;

DUO_API void duo_model_spec_defaults(duo_model_spec* spec);
DUO_API void duo_streaming_defaults(duo_streaming* s);
DUO_API void duo_prefill_defaults(duo_prefill* p);
DUO_API void duo_task_defaults(duo_task* t);
DUO_API void duo_train_config_defaults(duo_train_config* c);
DUO_API void duo_pretrain_config_defaults(duo_pretrain_config* c);
DUO_API void duo_niah_config_defaults(duo_niah_config* c);
DUO_API void duo_latency_config_defaults(duo_latency_config* c);

/* ---- models ---- */

DUO_API duo_status duo_model_init(const duo_model_spec* spec, uint64_t seed, duo_model** out);
DUO_API duo_status duo_model_induction(size_t vocab, size_t max_seq_len, duo_model** out);
DUO_API duo_status duo_model_load(const char* path, duo_model** out);
DUO_API duo_status duo_model_save(const duo_model* model, const char* path);
DUO_API duo_status duo_model_get_spec(const duo_model* model, duo_model_spec* out);
DUO_API duo_status duo_model_checksum(const duo_model* model, uint64_t* out);
DUO_API void duo_model_free(duo_model* model);

/* Trains a recall model; `log_csv` (may be NULL) receives the training log. */
DUO_API duo_status duo_pretrain(const duo_model_spec* spec, const duo_pretrain_config* cfg, uint64_t seed,
                                const char* log_csv, duo_progress_fn progress, void* user, duo_model** out,
                                duo_pretrain_result* result);

/* ---- synthetic passkey data ---- */

DUO_API duo_status duo_dataset_generate(const duo_task* task, const size_t* context_lengths, size_t n_lengths,
                                        size_t n_passkeys, size_t samples_per_length, uint64_t seed,
                                        duo_dataset** out);
DUO_API duo_status duo_dataset_load(const char* path, duo_dataset** out);
DUO_API duo_status duo_dataset_save(const duo_dataset* data, const char* path);
DUO_API size_t duo_dataset_size(const duo_dataset* data);
DUO_API void duo_dataset_free(duo_dataset* data);

/* ---- gates and identification ---- */

DUO_API duo_status duo_gates_create(size_t n_layers, size_t n_kv_heads, const double* values, duo_gates** out);
DUO_API duo_status duo_gates_load(const char* path, duo_gates** out);
DUO_API duo_status duo_gates_save(const duo_gates* gates, const char* path);
DUO_API duo_status duo_gates_shape(const duo_gates* gates, size_t* n_layers, size_t* n_kv_heads);
/* Copies layer-major values into `out`, which holds n_layers * n_kv_heads doubles. */
DUO_API duo_status duo_gates_values(const duo_gates* gates, double* out);
DUO_API void duo_gates_free(duo_gates* gates);

/* Optimizes gates; `log_csv` (may be NULL) receives the per-step loss log. */
DUO_API duo_status duo_identify(const duo_model* model, const duo_dataset* data, const duo_train_config* cfg,
                                const char* log_csv, duo_progress_fn progress, void* user, duo_gates** out);

/* ---- head policies ---- */

DUO_API duo_status duo_binarize(const duo_gates* gates, double ratio, duo_policy** out);
DUO_API duo_status duo_policy_uniform(const duo_model* model, int all_retrieval, duo_policy** out);
DUO_API duo_status duo_policy_load(const char* path, duo_policy** out);
DUO_API duo_status duo_policy_save(const duo_policy* policy, const char* path);
DUO_API duo_status duo_policy_shape(const duo_policy* policy, size_t* n_layers, size_t* n_kv_heads);
DUO_API duo_status duo_policy_is_retrieval(const duo_policy* policy, size_t layer, size_t kv_head, int* out);
DUO_API size_t duo_policy_retrieval_count(const duo_policy* policy);
DUO_API void duo_policy_free(duo_policy* policy);

/* Permutes heads so retrieval heads come first in every layer. */
DUO_API duo_status duo_reorder(const duo_model* model, const duo_policy* policy, duo_model** out_model,
                               duo_policy** out_policy);

/* ---- inference and evaluation ---- */

/* Greedy decoding of n_new tokens into `out` (room for n_new tokens). A NULL
 * policy runs the full-attention reference decoder. */
DUO_API duo_status duo_generate(const duo_model* model, const duo_policy* policy, const duo_streaming* streaming,
                                const duo_prefill* prefill, const int32_t* prompt, size_t n_prompt, size_t n_new,
                                int32_t* out);

/* NIAH grid written as CSV to `csv_path` (may be NULL); a NULL policy
 * evaluates the full-attention reference decoder. */
DUO_API duo_status duo_eval_niah(const duo_model* model, const duo_policy* policy, const duo_niah_config* cfg,
                                 const char* csv_path, double* out_mean);

/* KV cache accounting for `spec` under `policy`. */
DUO_API duo_status duo_memory_report(const duo_model_spec* spec, const duo_policy* policy, size_t context_len,
                                     const duo_streaming* streaming, size_t dtype_bytes, const char* csv_path,
                                     duo_memory_summary* out);

/* Decode/prefill timings for `policy` and the all-retrieval baseline; the
 * environment and configuration echo go to `progress`. */
DUO_API duo_status duo_bench_latency(const duo_model* model, const duo_policy* policy, const duo_latency_config* cfg,
                                     const char* csv_path, duo_progress_fn progress, void* user,
                                     double* out_speedup);

DUO_API duo_status duo_export_gate_heatmap(const duo_gates* gates, const char* path);

#ifdef __cplusplus
}
#endif

#endif /* DUOATTN_H */
