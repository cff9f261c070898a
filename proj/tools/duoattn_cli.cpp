// duoattn command-line driver: a thin sequential wrapper over the C API.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "CLI11.hpp"
#include "duoattn/duoattn.h"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct RuntimeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Target =
    std::variant<std::size_t*, double*, bool*, std::string*, std::vector<std::size_t>*, std::vector<double>*>;

// One configurable knob: a CLI flag and the JSON key with the same name.
struct Knob {
    std::string name;  // kebab-case, without dashes
    Target target;
    CLI::Option* opt = nullptr;
};

// Knobs of one subcommand, with its handler.
struct Command {
    CLI::App* app = nullptr;
    std::vector<Knob> knobs;
    std::function<void()> run;

    template <class T>
    void add(const std::string& name, T& value, const std::string& help) {
        auto* o = app->add_option("--" + name, value, help)->capture_default_str();
        if constexpr (std::is_same_v<T, std::vector<std::size_t>> || std::is_same_v<T, std::vector<double>>)
            o->delimiter(',')->expected(1, -1);
        knobs.push_back({name, &value, o});
    }
    void flag(const std::string& name, bool& value, const std::string& help) {
        auto* o = app->add_flag("--" + name + ",!--no-" + name, value,
                                help + (value ? " [on]" : " [off]"));
        knobs.push_back({name, &value, o});
    }
};

// Negatable flags would otherwise print as `--x,--no-x{false}`.
class Formatter : public CLI::Formatter {
public:
    std::string make_option_name(const CLI::Option* opt, bool positional) const override {
        std::string name = CLI::Formatter::make_option_name(opt, positional);
        if (const auto brace = name.find('{'); brace != std::string::npos) name.erase(brace);
        return name;
    }
};

std::string normalize_key(std::string k) {
    std::replace(k.begin(), k.end(), '_', '-');
    return k;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

std::optional<std::string> closest(const std::string& word, const std::vector<std::string>& candidates) {
    std::optional<std::string> best;
    std::size_t best_d = std::max<std::size_t>(2, word.size() / 3) + 1;
    for (const auto& c : candidates) {
        const std::size_t d = edit_distance(word, c);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

void assign(const Knob& k, const json& v) {
    try {
        std::visit(
            [&](auto* p) {
                using T = std::remove_pointer_t<decltype(p)>;
                if constexpr (std::is_same_v<T, std::vector<std::size_t>> || std::is_same_v<T, std::vector<double>>) {
                    *p = v.is_array() ? v.get<T>() : T{v.get<typename T::value_type>()};
                } else if constexpr (std::is_same_v<T, std::size_t>) {
                    if (!v.is_number_unsigned()) throw UsageError("config key '" + k.name + "' must be a non-negative integer");
                    *p = v.get<T>();
                } else {
                    *p = v.get<T>();
                }
            },
            k.target);
    } catch (const json::exception&) {
        throw UsageError("config key '" + k.name + "' has the wrong type");
    }
}

json current_value(const Knob& k) {
    return std::visit([](auto* p) { return json(*p); }, k.target);
}

void check(duo_status s) {
    if (s != DUO_OK) throw RuntimeError(duo_last_error());
}

void require_input(const std::string& what, const std::string& path) {
    if (path.empty()) throw UsageError("--" + what + " is required");
    if (!fs::exists(path)) throw UsageError("--" + what + " '" + path + "' does not exist");
}

void print_line(const char* line, void*) {
    std::cout << "  " << line << '\n' << std::flush;
}

template <class T, void (*Free)(T*)>
struct Handle {
    T* p = nullptr;
    Handle() = default;
    Handle(const Handle&) = delete;
    Handle& operator=(const Handle&) = delete;
    ~Handle() { Free(p); }
    T** out() { return &p; }
    T* get() const { return p; }
};
using Model = Handle<duo_model, duo_model_free>;
using Gates = Handle<duo_gates, duo_gates_free>;
using Policy = Handle<duo_policy, duo_policy_free>;
using Dataset = Handle<duo_dataset, duo_dataset_free>;

std::vector<int32_t> parse_prompt(const std::string& s) {
    std::vector<int32_t> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const std::size_t j = std::min(s.find(',', i), s.size());
        const std::string tok = s.substr(i, j - i);
        try {
            std::size_t used = 0;
            const long v = std::stol(tok, &used);
            if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
            out.push_back(static_cast<int32_t>(v));
        } catch (const std::exception&) {
            throw UsageError("--prompt expects comma-separated token ids, got '" + tok + "'");
        }
        i = j + 1;
    }
    if (out.empty()) throw UsageError("--prompt is empty");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"duoattn: retrieval/streaming head identification and dual-cache decoding at desk scale", "duoattn"};
    app.formatter(std::make_shared<Formatter>());
    app.set_version_flag("--version", std::string(duo_version()));
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    app.add_option("--config", config_path, "JSON file of flag values (keys as flag names); flags override it");
    app.add_option("--seed", seed, "Run seed; every random stream derives from it")->capture_default_str();
    app.add_option("--out-dir", out_dir, "Directory for artifacts (created if absent)")->capture_default_str();

    // Knob storage, shared by subcommands so one config file can drive them all.
    duo_model_spec spec;
    duo_model_spec_defaults(&spec);
    spec.n_kv_heads = 4;
    duo_task task;
    duo_task_defaults(&task);
    duo_train_config tc;
    duo_train_config_defaults(&tc);
    duo_pretrain_config pc;
    duo_pretrain_config_defaults(&pc);
    duo_prefill pf;
    duo_prefill_defaults(&pf);

    std::size_t sink = tc.streaming.sink_size, recent = tc.streaming.recent_size;
    std::size_t vocab = task.vocab_size, filler = task.filler_tokens, passkey_len = task.passkey_len;
    std::size_t n_passkeys = 10, samples_per_length = 1;
    std::vector<std::size_t> data_lengths{256, 512};
    std::size_t layers = spec.n_layers, q_heads = spec.n_query_heads, kv_heads = spec.n_kv_heads,
                head_dim = spec.head_dim, hidden = spec.hidden_dim, ffn = spec.ffn_dim, max_seq = spec.max_seq_len;
    double rope_theta = spec.rope_theta;
    bool induction = false;
    std::size_t n_needles = pc.n_needles, pre_batch = pc.batch_size, max_steps = pc.max_steps,
                pre_warmup = pc.warmup_steps, eval_every = pc.eval_every, eval_samples = pc.eval_samples;
    double lr = pc.lr, grad_clip = pc.grad_clip, unlock_loss = pc.unlock_loss, target_acc = pc.target_accuracy;
    std::vector<std::size_t> train_lengths{24, 48, 96, 160}, eval_lengths{96, 160};
    double lambda = tc.lambda, peak_lr = tc.peak_lr, floor_lr = tc.floor_lr;
    std::size_t steps = tc.steps, batch = tc.batch_size, warmup = tc.warmup_steps, decay = tc.decay_steps,
                block_size = tc.block_size;
    bool clamp = tc.clamp != 0, block_sparse = tc.block_sparse != 0;
    double ratio = 0.25;
    std::size_t chunk = pf.chunk_size;
    bool strict = pf.strict != 0;
    std::string model_path, data_path, gates_path, policy_path, prompt;
    std::size_t max_new = 32;
    std::vector<std::size_t> niah_lengths{128, 256, 512, 1024};
    std::vector<double> depths{0.0, 0.25, 0.5, 0.75, 1.0};
    std::size_t trials = 8;
    std::size_t mem_layers = 32, mem_kv_heads = 8, mem_head_dim = 128, context_len = 1048576, dtype_bytes = 2;
    double mem_ratio = 1.0;
    std::vector<std::size_t> latency_contexts{256, 512, 1024, 2048};
    std::size_t decode_steps = 32, latency_warmup = 4;

    std::map<std::string, Command> commands;
    auto sub = [&](const std::string& name, const std::string& help) -> Command& {
        Command& c = commands[name];
        c.app = app.add_subcommand(name, help);
        return c;
    };
    auto task_knobs = [&](Command& c) {
        c.add("vocab-size", vocab, "Vocabulary size (token 0 = BOS)");
        c.add("filler-tokens", filler, "Filler token ids [1, 1+n)");
        c.add("passkey-len", passkey_len, "Tokens per passkey");
    };
    auto window_knobs = [&](Command& c) {
        c.add("sink", sink, "Attention-sink tokens kept by streaming heads");
        c.add("recent", recent, "Recent-window tokens kept by streaming heads");
    };
    auto prefill_knobs = [&](Command& c) {
        c.add("chunk-size", chunk, "Prefill chunk size");
        c.flag("strict", strict, "Require chunk-size >= recent when streaming heads exist");
    };

    {
        Command& c = sub("gen-data", "Generate the synthetic passkey dataset for identification");
        task_knobs(c);
        c.add("n-passkeys", n_passkeys, "Passkeys planted per sample");
        c.add("context-lengths", data_lengths, "Sample lengths");
        c.add("samples-per-length", samples_per_length, "Samples per length");
        c.run = [&] {
            duo_task t{vocab, filler, passkey_len};
            Dataset d;
            check(duo_dataset_generate(&t, data_lengths.data(), data_lengths.size(), n_passkeys, samples_per_length,
                                       seed, d.out()));
            const auto path = (fs::path(out_dir) / "data.txt").string();
            check(duo_dataset_save(d.get(), path.c_str()));
            std::cout << "wrote " << duo_dataset_size(d.get()) << " samples to " << path << '\n';
        };
    }
    {
        Command& c = sub("pretrain", "Train the toy recall model (or build the hand-made induction model)");
        task_knobs(c);
        c.add("layers", layers, "Decoder layers (at most 4)");
        c.add("query-heads", q_heads, "Query heads per layer");
        c.add("kv-heads", kv_heads, "Key/value heads per layer");
        c.add("head-dim", head_dim, "Head dimension");
        c.add("hidden-dim", hidden, "Residual width");
        c.add("ffn-dim", ffn, "Feed-forward width");
        c.add("max-seq-len", max_seq, "Maximum sequence length");
        c.add("rope-theta", rope_theta, "Rotary base");
        c.flag("induction", induction, "Write the hand-constructed induction model instead of training");
        c.add("n-needles", n_needles, "Key/passkey pairs per training sample");
        c.add("train-lengths", train_lengths, "Training sample lengths (shortest first in the curriculum)");
        c.add("batch-size", pre_batch, "Samples per step");
        c.add("max-steps", max_steps, "Step cap");
        c.add("lr", lr, "Adam learning rate");
        c.add("warmup-steps", pre_warmup, "Linear warmup steps");
        c.add("grad-clip", grad_clip, "Global gradient-norm clip");
        c.add("unlock-loss", unlock_loss, "Smoothed loss that unlocks the next training length");
        c.add("target-accuracy", target_acc, "Stop once held-out recall reaches this");
        c.add("eval-every", eval_every, "Steps between held-out evaluations");
        c.add("eval-samples", eval_samples, "Held-out prompts per evaluation");
        c.add("eval-lengths", eval_lengths, "Held-out prompt lengths");
        c.run = [&] {
            const auto path = (fs::path(out_dir) / "model.bin").string();
            Model m;
            if (induction) {
                check(duo_model_induction(vocab, max_seq, m.out()));
            } else {
                duo_model_spec s{layers, q_heads, kv_heads, head_dim, hidden, ffn, vocab, rope_theta, max_seq};
                duo_pretrain_config p = pc;
                p.task = duo_task{vocab, filler, passkey_len};
                p.n_needles = n_needles;
                p.train_lengths = train_lengths.data();
                p.n_train_lengths = train_lengths.size();
                p.batch_size = pre_batch;
                p.max_steps = max_steps;
                p.warmup_steps = pre_warmup;
                p.lr = lr;
                p.grad_clip = grad_clip;
                p.unlock_loss = unlock_loss;
                p.target_accuracy = target_acc;
                p.eval_every = eval_every;
                p.eval_samples = eval_samples;
                p.eval_lengths = eval_lengths.data();
                p.n_eval_lengths = eval_lengths.size();
                duo_pretrain_result r{};
                const auto log = (fs::path(out_dir) / "pretrain_log.csv").string();
                check(duo_pretrain(&s, &p, seed, log.c_str(), print_line, nullptr, m.out(), &r));
                std::cout << "steps " << r.steps << ", held-out recall " << r.heldout_accuracy << '\n';
                if (!r.reached_target)
                    std::cerr << "warning: step cap reached before target accuracy " << target_acc << '\n';
            }
            check(duo_model_save(m.get(), path.c_str()));
            std::uint64_t sum = 0;
            check(duo_model_checksum(m.get(), &sum));
            std::cout << "wrote " << path << " (checksum " << std::hex << sum << std::dec << ")\n";
        };
    }
    {
        Command& c = sub("identify", "Optimize gate values on the passkey dataset");
        c.add("model", model_path, "Model checkpoint");
        c.add("data", data_path, "Dataset from gen-data");
        c.add("lambda", lambda, "L1 weight on the gates");
        c.add("steps", steps, "Optimization steps");
        c.add("batch-size", batch, "Samples per step");
        c.add("peak-lr", peak_lr, "Peak learning rate");
        c.add("floor-lr", floor_lr, "Learning rate at both ends of the schedule");
        c.add("warmup-steps", warmup, "Warmup steps");
        c.add("decay-steps", decay, "Final decay steps");
        window_knobs(c);
        c.flag("clamp", clamp, "Clamp gates to [0, 1] after each step");
        c.flag("block-sparse", block_sparse, "Use the block-sparse approximation of the streaming mask");
        c.add("block-size", block_size, "Block size for --block-sparse");
        c.run = [&] {
            require_input("model", model_path);
            require_input("data", data_path);
            Model m;
            Dataset d;
            check(duo_model_load(model_path.c_str(), m.out()));
            check(duo_dataset_load(data_path.c_str(), d.out()));
            duo_train_config t{lambda, steps,  batch,        peak_lr,          floor_lr,   warmup, decay,
                               {sink, recent}, clamp ? 1 : 0, block_sparse ? 1 : 0, block_size, seed};
            Gates g;
            const auto log = (fs::path(out_dir) / "train_log.csv").string();
            check(duo_identify(m.get(), d.get(), &t, log.c_str(), print_line, nullptr, g.out()));
            const auto path = (fs::path(out_dir) / "gates.txt").string();
            check(duo_gates_save(g.get(), path.c_str()));
            std::cout << "wrote " << path << '\n';
        };
    }
    {
        Command& c = sub("binarize", "Turn gate values into a retrieval/streaming head policy");
        c.add("gates", gates_path, "Gate file from identify");
        c.add("ratio", ratio, "Fraction of heads kept as retrieval heads");
        c.run = [&] {
            require_input("gates", gates_path);
            Gates g;
            Policy p;
            check(duo_gates_load(gates_path.c_str(), g.out()));
            check(duo_binarize(g.get(), ratio, p.out()));
            const auto path = (fs::path(out_dir) / "policy.txt").string();
            check(duo_policy_save(p.get(), path.c_str()));
            std::cout << "wrote " << path << " (" << duo_policy_retrieval_count(p.get()) << " retrieval heads)\n";
        };
    }
    {
        Command& c = sub("reorder", "Permute heads so retrieval heads come first in each layer");
        c.add("model", model_path, "Model checkpoint");
        c.add("policy", policy_path, "Policy file");
        c.run = [&] {
            require_input("model", model_path);
            require_input("policy", policy_path);
            Model m, rm;
            Policy p, rp;
            check(duo_model_load(model_path.c_str(), m.out()));
            check(duo_policy_load(policy_path.c_str(), p.out()));
            check(duo_reorder(m.get(), p.get(), rm.out(), rp.out()));
            const auto mp = (fs::path(out_dir) / "model_reordered.bin").string();
            const auto pp = (fs::path(out_dir) / "policy_reordered.txt").string();
            check(duo_model_save(rm.get(), mp.c_str()));
            check(duo_policy_save(rp.get(), pp.c_str()));
            std::cout << "wrote " << mp << " and " << pp << '\n';
        };
    }
    {
        Command& c = sub("generate", "Greedy decoding with the dual-cache engine");
        c.add("model", model_path, "Model checkpoint");
        c.add("policy", policy_path, "Policy file (omit for full attention)");
        c.add("prompt", prompt, "Comma-separated token ids");
        c.add("max-new-tokens", max_new, "Tokens to generate");
        window_knobs(c);
        prefill_knobs(c);
        c.run = [&] {
            require_input("model", model_path);
            if (!policy_path.empty()) require_input("policy", policy_path);
            const auto toks = parse_prompt(prompt);
            Model m;
            Policy p;
            check(duo_model_load(model_path.c_str(), m.out()));
            if (!policy_path.empty()) check(duo_policy_load(policy_path.c_str(), p.out()));
            duo_streaming s{sink, recent};
            duo_prefill f{chunk, strict ? 1 : 0};
            std::vector<int32_t> out(max_new);
            check(duo_generate(m.get(), p.get(), &s, &f, toks.data(), toks.size(), max_new, out.data()));
            for (std::size_t i = 0; i < out.size(); ++i) std::cout << (i ? "," : "") << out[i];
            std::cout << '\n';
        };
    }
    {
        Command& c = sub("eval-niah", "Needle-in-a-haystack grid over lengths and depths");
        c.add("model", model_path, "Model checkpoint");
        c.add("policy", policy_path, "Policy file (omit for full attention)");
        c.add("lengths", niah_lengths, "Context lengths");
        c.add("depths", depths, "Needle depths in [0, 1]");
        c.add("trials", trials, "Prompts per cell");
        task_knobs(c);
        window_knobs(c);
        prefill_knobs(c);
        c.run = [&] {
            require_input("model", model_path);
            if (!policy_path.empty()) require_input("policy", policy_path);
            Model m;
            Policy p;
            check(duo_model_load(model_path.c_str(), m.out()));
            if (!policy_path.empty()) check(duo_policy_load(policy_path.c_str(), p.out()));
            duo_niah_config n;
            duo_niah_config_defaults(&n);
            n.context_lengths = niah_lengths.data();
            n.n_context_lengths = niah_lengths.size();
            n.depths = depths.data();
            n.n_depths = depths.size();
            n.trials = trials;
            n.task = duo_task{vocab, filler, passkey_len};
            n.streaming = duo_streaming{sink, recent};
            n.prefill = duo_prefill{chunk, strict ? 1 : 0};
            n.seed = seed;
            double mean = 0.0;
            const auto path = (fs::path(out_dir) / "niah.csv").string();
            check(duo_eval_niah(m.get(), p.get(), &n, path.c_str(), &mean));
            std::cout << "mean accuracy " << mean << "; wrote " << path << '\n';
        };
    }
    {
        Command& c = sub("bench-mem", "KV cache memory report");
        c.add("model", model_path, "Model checkpoint (omit to use the shape flags)");
        c.add("policy", policy_path, "Policy file (omit to use --retrieval-ratio)");
        c.add("mem-layers", mem_layers, "Layers when no model is given");
        c.add("mem-kv-heads", mem_kv_heads, "KV heads per layer when no model is given");
        c.add("mem-head-dim", mem_head_dim, "Head dimension when no model is given");
        c.add("retrieval-ratio", mem_ratio, "Retrieval fraction when no policy is given");
        c.add("context-len", context_len, "Context length in tokens");
        c.add("dtype-bytes", dtype_bytes, "Bytes per cached element");
        window_knobs(c);
        c.run = [&] {
            duo_model_spec s;
            duo_model_spec_defaults(&s);
            if (!model_path.empty()) {
                require_input("model", model_path);
                Model m;
                check(duo_model_load(model_path.c_str(), m.out()));
                check(duo_model_get_spec(m.get(), &s));
            } else {
                s.n_layers = mem_layers;
                s.n_kv_heads = mem_kv_heads;
                s.n_query_heads = mem_kv_heads;
                s.head_dim = mem_head_dim;
            }
            Policy p;
            if (!policy_path.empty()) {
                require_input("policy", policy_path);
                check(duo_policy_load(policy_path.c_str(), p.out()));
            } else {
                Gates g;
                check(duo_gates_create(s.n_layers, s.n_kv_heads, nullptr, g.out()));
                check(duo_binarize(g.get(), mem_ratio, p.out()));
            }
            duo_streaming w{sink, recent};
            duo_memory_summary r{};
            const auto path = (fs::path(out_dir) / "memory.csv").string();
            check(duo_memory_report(&s, p.get(), context_len, &w, dtype_bytes, path.c_str(), &r));
            std::printf("total %.2f GB (retrieval %.2f GB, streaming %.4f GB); full cache %.2f GB; reduction %.3fx\n",
                        static_cast<double>(r.total_bytes) / 1e9, static_cast<double>(r.retrieval_bytes) / 1e9,
                        static_cast<double>(r.streaming_bytes) / 1e9, static_cast<double>(r.baseline_bytes) / 1e9,
                        r.reduction);
            std::cout << "wrote " << path << '\n';
        };
    }
    {
        Command& c = sub("bench-latency", "Decode and prefill timings against the full-cache baseline");
        c.add("model", model_path, "Model checkpoint");
        c.add("policy", policy_path, "Policy file");
        c.add("contexts", latency_contexts, "Context lengths");
        c.add("decode-steps", decode_steps, "Timed decode steps per context");
        c.add("latency-warmup", latency_warmup, "Untimed decode steps before timing");
        window_knobs(c);
        prefill_knobs(c);
        c.run = [&] {
            require_input("model", model_path);
            require_input("policy", policy_path);
            Model m;
            Policy p;
            check(duo_model_load(model_path.c_str(), m.out()));
            check(duo_policy_load(policy_path.c_str(), p.out()));
            duo_latency_config l;
            duo_latency_config_defaults(&l);
            l.context_lengths = latency_contexts.data();
            l.n_context_lengths = latency_contexts.size();
            l.decode_steps = decode_steps;
            l.warmup_steps = latency_warmup;
            l.streaming = duo_streaming{sink, recent};
            l.prefill = duo_prefill{chunk, strict ? 1 : 0};
            l.seed = seed;
            double speedup = 0.0;
            const auto path = (fs::path(out_dir) / "latency.csv").string();
            check(duo_bench_latency(m.get(), p.get(), &l, path.c_str(), print_line, nullptr, &speedup));
            std::cout << "decode speedup at " << latency_contexts.back() << " tokens: " << speedup << "x; wrote "
                      << path << '\n';
        };
    }
    {
        Command& c = sub("export", "Export the gate heatmap CSV for plotting");
        c.add("gates", gates_path, "Gate file from identify");
        c.run = [&] {
            require_input("gates", gates_path);
            Gates g;
            check(duo_gates_load(gates_path.c_str(), g.out()));
            const auto path = (fs::path(out_dir) / "gate_heatmap.csv").string();
            check(duo_export_gate_heatmap(g.get(), path.c_str()));
            std::cout << "wrote " << path << '\n';
        };
    }

    std::vector<std::string> sub_names;
    for (const auto& [name, c] : commands) sub_names.push_back(name);
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--config" || a == "--seed" || a == "--out-dir") {
            ++i;
            continue;
        }
        if (a.rfind("-", 0) == 0) continue;
        if (!commands.count(a)) {
            std::cerr << "error: unknown subcommand '" << a << "'";
            if (auto s = closest(a, sub_names)) std::cerr << "; did you mean '" << *s << "'?";
            std::cerr << "\nRun with --help for the list of subcommands.\n";
            return kExitUsage;
        }
        break;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ExtrasError& e) {
        std::cerr << "error: " << e.what() << '\n';
        const auto chosen = app.get_subcommands();
        if (!chosen.empty()) {
            std::vector<std::string> flags;
            for (const auto& k : commands.at(chosen.front()->get_name()).knobs) flags.push_back("--" + k.name);
            for (const char* g : {"--config", "--seed", "--out-dir"}) flags.push_back(g);
            for (int i = 1; i < argc; ++i) {
                const std::string a = argv[i];
                if (a.rfind("--", 0) != 0) continue;
                const std::string bare = a.substr(0, a.find('='));
                if (std::find(flags.begin(), flags.end(), bare) != flags.end()) continue;
                if (auto s = closest(bare, flags)) std::cerr << "did you mean '" << *s << "' instead of '" << bare << "'?\n";
            }
        }
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    Command& cmd = commands.at(name);
    try {
        if (!config_path.empty()) {
            if (!fs::exists(config_path)) throw UsageError("--config '" + config_path + "' does not exist");
            json cfg;
            try {
                std::ifstream in(config_path);
                cfg = json::parse(in);
            } catch (const json::exception& e) {
                throw UsageError("cannot parse " + config_path + ": " + e.what());
            }
            if (!cfg.is_object()) throw UsageError(config_path + " must hold a JSON object");
            std::vector<std::string> known{"seed", "out-dir"};
            for (const auto& [n, c] : commands)
                for (const auto& k : c.knobs) known.push_back(k.name);
            for (auto it = cfg.begin(); it != cfg.end(); ++it) {
                const std::string key = normalize_key(it.key());
                if (std::find(known.begin(), known.end(), key) == known.end()) {
                    std::string msg = "unknown config key '" + it.key() + "'";
                    if (auto s = closest(key, known)) msg += "; did you mean '" + *s + "'?";
                    throw UsageError(msg);
                }
                if (key == "seed" && app.get_option("--seed")->count() == 0) {
                    if (!it.value().is_number_unsigned()) throw UsageError("config key 'seed' must be a non-negative integer");
                    seed = it.value().get<std::uint64_t>();
                }
                if (key == "out-dir" && app.get_option("--out-dir")->count() == 0) out_dir = it.value().get<std::string>();
                for (const auto& k : cmd.knobs)
                    if (k.name == key && k.opt->count() == 0) assign(k, it.value());
            }
        }

        json resolved;
        resolved["subcommand"] = name;
        resolved["seed"] = seed;
        resolved["out-dir"] = out_dir;
        for (const auto& k : cmd.knobs) resolved[k.name] = current_value(k);
        std::cout << "resolved configuration: " << resolved.dump() << '\n' << std::flush;

        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) throw RuntimeError("cannot create output directory " + out_dir + ": " + ec.message());
        cmd.run();
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const RuntimeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return 0;
}
