#include "duoattn/duoattn.h"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <memory>
#include <new>
#include <string>

#include "duoattn/deployment.hpp"
#include "duoattn/errors.hpp"
#include "duoattn/eval_bench.hpp"
#include "duoattn/identification.hpp"

struct duo_model {
    duoattn::ModelWeights w;
};
struct duo_gates {
    duoattn::GateMatrix g;
};
struct duo_policy {
    duoattn::HeadPolicy p;
};
struct duo_dataset {
    std::vector<duoattn::SyntheticSample> samples;
};

namespace {

using namespace duoattn;

thread_local std::string g_last_error;

duo_status kind_status(ErrorKind k) {
    switch (k) {
        case ErrorKind::Config: return DUO_ERR_CONFIG;
        case ErrorKind::Shape: return DUO_ERR_SHAPE;
        case ErrorKind::Length: return DUO_ERR_LENGTH;
        case ErrorKind::Contract: return DUO_ERR_CONTRACT;
        case ErrorKind::Numeric: return DUO_ERR_NUMERIC;
        case ErrorKind::Training: return DUO_ERR_TRAINING;
        case ErrorKind::Parse: return DUO_ERR_PARSE;
        case ErrorKind::Invariant: return DUO_ERR_INVARIANT;
        case ErrorKind::Io: return DUO_ERR_IO;
    }
    return DUO_ERR_INTERNAL;
}

duo_status fail(duo_status s, std::string msg) {
    g_last_error = std::move(msg);
    return s;
}

template <class F>
duo_status guard(F&& f) {
    try {
        f();
        return DUO_OK;
    } catch (const Error& e) {
        return fail(kind_status(e.kind()), e.what());
    } catch (const std::bad_alloc&) {
        return fail(DUO_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(DUO_ERR_INTERNAL, std::string("internal error: ") + e.what());
    } catch (...) {
        return fail(DUO_ERR_INTERNAL, "internal error: unknown exception");
    }
}

template <class... P>
bool any_null(const P*... p) {
    return ((p == nullptr) || ...);
}

#define DUO_REQUIRE(...) \
    if (any_null(__VA_ARGS__)) return fail(DUO_ERR_NULL_ARGUMENT, "required argument is NULL")

ModelSpec to_spec(const duo_model_spec& s) {
    ModelSpec m;
    m.n_layers = s.n_layers;
    m.n_query_heads = s.n_query_heads;
    m.n_kv_heads = s.n_kv_heads;
    m.head_dim = s.head_dim;
    m.hidden_dim = s.hidden_dim;
    m.ffn_dim = s.ffn_dim;
    m.vocab_size = s.vocab_size;
    m.rope_theta = s.rope_theta;
    m.max_seq_len = s.max_seq_len;
    return m;
}

duo_model_spec from_spec(const ModelSpec& m) {
    return duo_model_spec{m.n_layers, m.n_query_heads, m.n_kv_heads, m.head_dim, m.hidden_dim,
                          m.ffn_dim,  m.vocab_size,    m.rope_theta, m.max_seq_len};
}

StreamingConfig to_streaming(const duo_streaming& s) { return {s.sink_size, s.recent_size}; }
PrefillConfig to_prefill(const duo_prefill& p) { return {p.chunk_size, p.strict != 0}; }

NiahTask to_task(const duo_task& t) {
    NiahTask n;
    n.vocab_size = t.vocab_size;
    n.filler_tokens = t.filler_tokens;
    n.passkey_len = t.passkey_len;
    return n;
}

template <class T>
std::vector<T> to_vec(const T* p, std::size_t n, std::vector<T> fallback) {
    return p == nullptr ? fallback : std::vector<T>(p, p + n);
}

void emit(duo_progress_fn fn, void* user, const std::string& line) {
    if (fn != nullptr) fn(line.c_str(), user);
}

}  // namespace

extern "C" {

const char* duo_version(void) { return "duoattn 0.1.0"; }

const char* duo_status_name(duo_status s) {
    switch (s) {
        case DUO_OK: return "ok";
        case DUO_ERR_CONFIG: return "config";
        case DUO_ERR_SHAPE: return "shape";
        case DUO_ERR_LENGTH: return "length";
        case DUO_ERR_CONTRACT: return "contract";
        case DUO_ERR_NUMERIC: return "numeric";
        case DUO_ERR_TRAINING: return "training";
        case DUO_ERR_PARSE: return "parse";
        case DUO_ERR_INVARIANT: return "invariant";
        case DUO_ERR_IO: return "io";
        case DUO_ERR_NULL_ARGUMENT: return "null-argument";
        case DUO_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* duo_last_error(void) { return g_last_error.c_str(); }

void duo_model_spec_defaults(duo_model_spec* s) {
    if (s != nullptr) *s = from_spec(ModelSpec{});
}

void duo_streaming_defaults(duo_streaming* s) {
    if (s != nullptr) *s = duo_streaming{StreamingConfig{}.sink_size, StreamingConfig{}.recent_size};
}

void duo_prefill_defaults(duo_prefill* p) {
    if (p != nullptr) *p = duo_prefill{PrefillConfig{}.chunk_size, PrefillConfig{}.strict ? 1 : 0};
}

void duo_task_defaults(duo_task* t) {
    if (t == nullptr) return;
    const NiahTask n;
    *t = duo_task{n.vocab_size, n.filler_tokens, n.passkey_len};
}

void duo_train_config_defaults(duo_train_config* c) {
    if (c == nullptr) return;
    const TrainConfig t;
    *c = duo_train_config{t.lambda,       t.steps,       t.batch_size, t.peak_lr,
                          t.floor_lr,     t.warmup_steps, t.decay_steps, {t.streaming.sink_size, t.streaming.recent_size},
                          t.clamp ? 1 : 0, t.block_sparse ? 1 : 0, t.block_size, t.seed};
}

void duo_pretrain_config_defaults(duo_pretrain_config* c) {
    if (c == nullptr) return;
    const PretrainConfig p;
    *c = duo_pretrain_config{};
    duo_task_defaults(&c->task);
    c->n_needles = p.n_needles;
    c->batch_size = p.batch_size;
    c->max_steps = p.max_steps;
    c->warmup_steps = p.warmup_steps;
    c->lr = p.lr;
    c->grad_clip = p.grad_clip;
    c->unlock_loss = p.unlock_loss;
    c->target_accuracy = p.target_accuracy;
    c->eval_every = p.eval_every;
    c->eval_samples = p.eval_samples;
}

void duo_niah_config_defaults(duo_niah_config* c) {
    if (c == nullptr) return;
    *c = duo_niah_config{};
    c->trials = NiahAxes{}.trials;
    duo_task_defaults(&c->task);
    duo_streaming_defaults(&c->streaming);
    duo_prefill_defaults(&c->prefill);
}

void duo_latency_config_defaults(duo_latency_config* c) {
    if (c == nullptr) return;
    const LatencyConfig l;
    *c = duo_latency_config{};
    c->decode_steps = l.decode_steps;
    c->warmup_steps = l.warmup_steps;
    duo_streaming_defaults(&c->streaming);
    duo_prefill_defaults(&c->prefill);
}

duo_status duo_model_init(const duo_model_spec* spec, uint64_t seed, duo_model** out) {
    DUO_REQUIRE(spec, out);
    return guard([&] { *out = new duo_model{init_model(to_spec(*spec), seed)}; });
}

duo_status duo_model_induction(size_t vocab, size_t max_seq_len, duo_model** out) {
    DUO_REQUIRE(out);
    return guard([&] { *out = new duo_model{build_induction_model(vocab, max_seq_len).weights}; });
}

duo_status duo_model_load(const char* path, duo_model** out) {
    DUO_REQUIRE(path, out);
    return guard([&] { *out = new duo_model{load_checkpoint(path)}; });
}

duo_status duo_model_save(const duo_model* model, const char* path) {
    DUO_REQUIRE(model, path);
    return guard([&] { save_checkpoint(model->w, path); });
}

duo_status duo_model_get_spec(const duo_model* model, duo_model_spec* out) {
    DUO_REQUIRE(model, out);
    *out = from_spec(model->w.spec);
    return DUO_OK;
}

duo_status duo_model_checksum(const duo_model* model, uint64_t* out) {
    DUO_REQUIRE(model, out);
    *out = checksum(model->w);
    return DUO_OK;
}

void duo_model_free(duo_model* model) { delete model; }

duo_status duo_pretrain(const duo_model_spec* spec, const duo_pretrain_config* cfg, uint64_t seed,
                        const char* log_csv, duo_progress_fn progress, void* user, duo_model** out,
                        duo_pretrain_result* result) {
    DUO_REQUIRE(spec, cfg, out);
    return guard([&] {
        PretrainConfig p;
        p.task = to_task(cfg->task);
        p.n_needles = cfg->n_needles;
        p.train_lengths = to_vec(cfg->train_lengths, cfg->n_train_lengths, p.train_lengths);
        p.batch_size = cfg->batch_size;
        p.max_steps = cfg->max_steps;
        p.warmup_steps = cfg->warmup_steps;
        p.lr = cfg->lr;
        p.grad_clip = cfg->grad_clip;
        p.unlock_loss = cfg->unlock_loss;
        p.target_accuracy = cfg->target_accuracy;
        p.eval_every = cfg->eval_every;
        p.eval_samples = cfg->eval_samples;
        p.eval_lengths = to_vec(cfg->eval_lengths, cfg->n_eval_lengths, p.eval_lengths);
        auto r = pretrain_toy_model(to_spec(*spec), p, seed, [&](const PretrainLogRow& row) {
            if (row.heldout_accuracy < 0.0) return;
            char buf[128];
            std::snprintf(buf, sizeof buf, "step %zu  loss %.4f  heldout_accuracy %.3f", row.step, row.loss,
                          row.heldout_accuracy);
            emit(progress, user, buf);
        });
        if (log_csv != nullptr) write_pretrain_log(r.log, log_csv);
        if (result != nullptr) *result = duo_pretrain_result{r.steps, r.heldout_accuracy, r.reached_target ? 1 : 0};
        *out = new duo_model{std::move(r.weights)};
    });
}

duo_status duo_dataset_generate(const duo_task* task, const size_t* context_lengths, size_t n_lengths,
                                size_t n_passkeys, size_t samples_per_length, uint64_t seed, duo_dataset** out) {
    DUO_REQUIRE(task, context_lengths, out);
    return guard([&] {
        const auto cfg = identification_data(to_task(*task), std::vector<std::size_t>(context_lengths, context_lengths + n_lengths),
                                             n_passkeys, samples_per_length, seed);
        *out = new duo_dataset{gen_passkey_dataset(cfg)};
    });
}

duo_status duo_dataset_load(const char* path, duo_dataset** out) {
    DUO_REQUIRE(path, out);
    return guard([&] { *out = new duo_dataset{load_dataset(path)}; });
}

duo_status duo_dataset_save(const duo_dataset* data, const char* path) {
    DUO_REQUIRE(data, path);
    return guard([&] { save_dataset(data->samples, path); });
}

size_t duo_dataset_size(const duo_dataset* data) { return data == nullptr ? 0 : data->samples.size(); }

void duo_dataset_free(duo_dataset* data) { delete data; }

duo_status duo_gates_create(size_t n_layers, size_t n_kv_heads, const double* values, duo_gates** out) {
    DUO_REQUIRE(out);
    return guard([&] {
        GateMatrix g(n_layers, n_kv_heads, 1.0);
        if (values != nullptr) g.values().assign(values, values + g.size());
        g.validate();
        *out = new duo_gates{std::move(g)};
    });
}

duo_status duo_gates_load(const char* path, duo_gates** out) {
    DUO_REQUIRE(path, out);
    return guard([&] { *out = new duo_gates{load_gates(path)}; });
}

duo_status duo_gates_save(const duo_gates* gates, const char* path) {
    DUO_REQUIRE(gates, path);
    return guard([&] { save_gates(gates->g, path); });
}

duo_status duo_gates_shape(const duo_gates* gates, size_t* n_layers, size_t* n_kv_heads) {
    DUO_REQUIRE(gates, n_layers, n_kv_heads);
    *n_layers = gates->g.n_layers();
    *n_kv_heads = gates->g.n_kv_heads();
    return DUO_OK;
}

duo_status duo_gates_values(const duo_gates* gates, double* out) {
    DUO_REQUIRE(gates, out);
    std::copy(gates->g.values().begin(), gates->g.values().end(), out);
    return DUO_OK;
}

void duo_gates_free(duo_gates* gates) { delete gates; }

duo_status duo_identify(const duo_model* model, const duo_dataset* data, const duo_train_config* cfg,
                        const char* log_csv, duo_progress_fn progress, void* user, duo_gates** out) {
    DUO_REQUIRE(model, data, cfg, out);
    return guard([&] {
        TrainConfig t;
        t.lambda = cfg->lambda;
        t.steps = cfg->steps;
        t.batch_size = cfg->batch_size;
        t.peak_lr = cfg->peak_lr;
        t.floor_lr = cfg->floor_lr;
        t.warmup_steps = cfg->warmup_steps;
        t.decay_steps = cfg->decay_steps;
        t.streaming = to_streaming(cfg->streaming);
        t.clamp = cfg->clamp != 0;
        t.block_sparse = cfg->block_sparse != 0;
        t.block_size = cfg->block_size;
        t.seed = cfg->seed;
        const std::size_t every = std::max<std::size_t>(1, t.steps / 20);
        auto r = train_gates(model->w, data->samples, t, [&](const TrainLogRow& row, const GateMatrix& g) {
            if (row.step % every != 0 && row.step + 1 != t.steps) return;
            char buf[160];
            std::snprintf(buf, sizeof buf, "step %zu  lr %.5f  distill %.6g  reg %.4f  gate_sum %.4f", row.step,
                          row.lr, row.distill, row.reg, g.sum());
            emit(progress, user, buf);
        });
        if (log_csv != nullptr) write_train_log(r.log, log_csv);
        *out = new duo_gates{std::move(r.gates)};
    });
}

duo_status duo_binarize(const duo_gates* gates, double ratio, duo_policy** out) {
    DUO_REQUIRE(gates, out);
    return guard([&] { *out = new duo_policy{binarize(gates->g, ratio)}; });
}

duo_status duo_policy_uniform(const duo_model* model, int all_retrieval, duo_policy** out) {
    DUO_REQUIRE(model, out);
    return guard([&] { *out = new duo_policy{HeadPolicy::uniform(model->w.spec, all_retrieval != 0)}; });
}

duo_status duo_policy_load(const char* path, duo_policy** out) {
    DUO_REQUIRE(path, out);
    return guard([&] { *out = new duo_policy{load_policy(path)}; });
}

duo_status duo_policy_save(const duo_policy* policy, const char* path) {
    DUO_REQUIRE(policy, path);
    return guard([&] { save_policy(policy->p, path); });
}

duo_status duo_policy_shape(const duo_policy* policy, size_t* n_layers, size_t* n_kv_heads) {
    DUO_REQUIRE(policy, n_layers, n_kv_heads);
    *n_layers = policy->p.n_layers;
    *n_kv_heads = policy->p.n_kv_heads;
    return DUO_OK;
}

duo_status duo_policy_is_retrieval(const duo_policy* policy, size_t layer, size_t kv_head, int* out) {
    DUO_REQUIRE(policy, out);
    if (layer >= policy->p.n_layers || kv_head >= policy->p.n_kv_heads)
        return fail(DUO_ERR_CONTRACT, "contract violation: head index outside the policy");
    *out = policy->p.is_retrieval(layer, kv_head) ? 1 : 0;
    return DUO_OK;
}

size_t duo_policy_retrieval_count(const duo_policy* policy) {
    return policy == nullptr ? 0 : policy->p.retrieval_count();
}

void duo_policy_free(duo_policy* policy) { delete policy; }

duo_status duo_reorder(const duo_model* model, const duo_policy* policy, duo_model** out_model,
                       duo_policy** out_policy) {
    DUO_REQUIRE(model, policy, out_model);
    return guard([&] {
        auto r = reorder_heads(model->w, policy->p);
        auto m = std::make_unique<duo_model>(duo_model{std::move(r.weights)});
        if (out_policy != nullptr) *out_policy = new duo_policy{std::move(r.policy)};
        *out_model = m.release();
    });
}

duo_status duo_generate(const duo_model* model, const duo_policy* policy, const duo_streaming* streaming,
                        const duo_prefill* prefill, const int32_t* prompt, size_t n_prompt, size_t n_new,
                        int32_t* out) {
    DUO_REQUIRE(model, prompt);
    if (n_new > 0 && out == nullptr) return fail(DUO_ERR_NULL_ARGUMENT, "required argument is NULL");
    return guard([&] {
        const std::span<const Token> p(prompt, n_prompt);
        std::vector<Token> toks;
        if (policy == nullptr) {
            ReferenceDecoder ref(model->w);
            toks = ref.greedy_generate(p, n_new);
        } else {
            const StreamingConfig s = streaming != nullptr ? to_streaming(*streaming) : StreamingConfig{};
            const PrefillConfig pf = prefill != nullptr ? to_prefill(*prefill) : PrefillConfig{};
            const DuoEngine engine(model->w, policy->p, s);
            toks = engine.greedy_generate(p, n_new, pf);
        }
        std::copy(toks.begin(), toks.end(), out);
    });
}

duo_status duo_eval_niah(const duo_model* model, const duo_policy* policy, const duo_niah_config* cfg,
                         const char* csv_path, double* out_mean) {
    DUO_REQUIRE(model, cfg);
    return guard([&] {
        NiahAxes axes;
        axes.context_lengths = to_vec(cfg->context_lengths, cfg->n_context_lengths, axes.context_lengths);
        axes.depths = to_vec(cfg->depths, cfg->n_depths, axes.depths);
        axes.trials = cfg->trials;
        const NiahTask task = to_task(cfg->task);
        const NIAHGrid g = policy == nullptr ? niah_eval_full(model->w, axes, task, cfg->seed)
                                             : niah_eval(model->w, policy->p, to_streaming(cfg->streaming), axes,
                                                         task, cfg->seed, to_prefill(cfg->prefill));
        if (csv_path != nullptr) write_niah_csv(g, csv_path);
        if (out_mean != nullptr) *out_mean = g.mean();
    });
}

duo_status duo_memory_report(const duo_model_spec* spec, const duo_policy* policy, size_t context_len,
                             const duo_streaming* streaming, size_t dtype_bytes, const char* csv_path,
                             duo_memory_summary* out) {
    DUO_REQUIRE(spec, policy, streaming);
    return guard([&] {
        const auto r = kv_memory_report(to_spec(*spec), policy->p, context_len, to_streaming(*streaming), dtype_bytes);
        if (csv_path != nullptr) write_memory_csv(r, csv_path);
        if (out != nullptr)
            *out = duo_memory_summary{r.retrieval_total, r.streaming_total, r.total, r.baseline_total, r.reduction};
    });
}

duo_status duo_bench_latency(const duo_model* model, const duo_policy* policy, const duo_latency_config* cfg,
                             const char* csv_path, duo_progress_fn progress, void* user, double* out_speedup) {
    DUO_REQUIRE(model, policy, cfg);
    return guard([&] {
        LatencyConfig l;
        l.context_lengths = to_vec(cfg->context_lengths, cfg->n_context_lengths, l.context_lengths);
        l.decode_steps = cfg->decode_steps;
        l.warmup_steps = cfg->warmup_steps;
        l.prefill = to_prefill(cfg->prefill);
        const auto r = latency_bench(model->w, policy->p, to_streaming(cfg->streaming), l, cfg->seed);
        emit(progress, user, "environment: " + r.environment);
        emit(progress, user, "config: " + r.config_echo);
        for (const auto& row : r.rows) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%-16s ctx %6zu  median %10.2f us  p90 %10.2f us  n=%zu", row.phase.c_str(),
                          row.context_len, row.median_us, row.p90_us, row.samples);
            emit(progress, user, buf);
        }
        if (csv_path != nullptr) write_latency_csv(r, csv_path);
        if (out_speedup != nullptr) *out_speedup = r.decode_speedup(l.context_lengths.back());
    });
}

duo_status duo_export_gate_heatmap(const duo_gates* gates, const char* path) {
    DUO_REQUIRE(gates, path);
    return guard([&] { export_gate_heatmap(gates->g, path); });
}

}  // extern "C"
