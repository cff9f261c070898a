#include "duoattn/identification.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "duoattn/rng.hpp"
#include "duoattn/textio.hpp"

namespace duoattn {

namespace {

Token draw(Rng& rng, TokenRange r) {
    return static_cast<Token>(uniform_int(rng, static_cast<std::uint64_t>(r.lo), static_cast<std::uint64_t>(r.hi - 1)));
}

bool range_within(TokenRange r, std::size_t vocab) {
    return r.lo >= 0 && r.hi > r.lo && static_cast<std::size_t>(r.hi) <= vocab;
}

// Whether size^len >= n without overflowing.
bool enough_sequences(std::size_t size, std::size_t len, std::size_t n) {
    std::size_t count = 1;
    for (std::size_t i = 0; i < len && count < n; ++i) count *= size;
    return count >= n;
}

std::string format_spans(std::span<const TokenSpan> spans) {
    std::string out;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        if (i != 0) out += ',';
        out += std::to_string(spans[i].start) + ":" + std::to_string(spans[i].len);
    }
    return out;
}

std::vector<TokenSpan> parse_spans(std::string_view field, const std::string& src, std::size_t line) {
    std::vector<TokenSpan> out;
    if (field.empty()) return out;
    for (const auto& part : split(field, ',')) {
        const auto se = split(part, ':');
        if (se.size() != 2) throw ParseError(src, line, "malformed span '" + part + "'");
        out.push_back({parse_count(se[0], src, line), parse_count(se[1], src, line)});
    }
    return out;
}

}  // namespace

TokenRange SyntheticDataConfig::filler_range() const noexcept {
    return filler_tokens.size() == 0 ? TokenRange{0, static_cast<Token>(vocab_size)} : filler_tokens;
}

TokenRange SyntheticDataConfig::passkey_range() const noexcept {
    return passkey_tokens.size() == 0 ? TokenRange{0, static_cast<Token>(vocab_size)} : passkey_tokens;
}

void SyntheticDataConfig::validate() const {
    if (n_passkeys == 0) throw ConfigError("n_passkeys must be >= 1");
    if (passkey_len == 0) throw ConfigError("passkey_len must be >= 1");
    if (vocab_size == 0) throw ConfigError("vocab_size must be >= 1");
    if (n_insertion_points == 0) throw ConfigError("n_insertion_points must be >= 1");
    if (samples_per_length == 0) throw ConfigError("samples_per_length must be >= 1");
    if (context_lengths.empty()) throw ConfigError("at least one context length is required");
    if (!range_within(filler_range(), vocab_size)) throw ConfigError("filler token range outside vocabulary");
    if (!range_within(passkey_range(), vocab_size)) throw ConfigError("passkey token range outside vocabulary");
    if (separator < 0 || static_cast<std::size_t>(separator) >= vocab_size) {
        throw ConfigError("separator token outside vocabulary");
    }
    if (!enough_sequences(passkey_range().size(), passkey_len, n_passkeys)) {
        throw ConfigError("passkey alphabet too small for " + std::to_string(n_passkeys) + " distinct passkeys");
    }
    const std::size_t need = n_passkeys * passkey_len + recall_len();
    for (std::size_t L : context_lengths) {
        if (L < need) {
            throw ConfigError("context length " + std::to_string(L) + " cannot fit " + std::to_string(n_passkeys) +
                              " passkeys plus a recall section (needs >= " + std::to_string(need) + ")");
        }
    }
}

std::size_t SyntheticSample::supervised_len() const noexcept {
    std::size_t n = 0;
    for (const auto& s : supervised_spans) n += s.len;
    return n;
}

std::vector<SyntheticSample> gen_passkey_dataset(const SyntheticDataConfig& cfg) {
    cfg.validate();
    Rng rng = make_rng(cfg.seed, "passkey_dataset");
    const TokenRange filler = cfg.filler_range();
    const TokenRange keys = cfg.passkey_range();
    const std::size_t n = cfg.n_passkeys;
    const std::size_t s = cfg.passkey_len;

    std::vector<SyntheticSample> out;
    for (std::size_t L : cfg.context_lengths) {
        for (std::size_t rep = 0; rep < cfg.samples_per_length; ++rep) {
            const std::size_t n_filler = L - cfg.recall_len() - n * s;

            std::set<std::vector<Token>> seen;
            std::vector<std::vector<Token>> passkeys;
            while (passkeys.size() < n) {
                std::vector<Token> p(s);
                for (auto& t : p) t = draw(rng, keys);
                if (seen.insert(p).second) passkeys.push_back(std::move(p));
            }

            // Insertion offsets are measured in filler tokens preceding each
            // passkey, drawn from evenly spaced candidate points.
            const std::size_t P = cfg.n_insertion_points;
            std::vector<std::size_t> picks;
            if (P >= n) {
                std::set<std::size_t> chosen;
                while (chosen.size() < n) chosen.insert(uniform_int(rng, 0, P - 1));
                picks.assign(chosen.begin(), chosen.end());
            } else {
                for (std::size_t i = 0; i < n; ++i) picks.push_back(uniform_int(rng, 0, P - 1));
                std::sort(picks.begin(), picks.end());
            }
            std::vector<std::size_t> offsets;
            for (std::size_t k : picks) offsets.push_back(P == 1 ? 0 : k * n_filler / (P - 1));

            SyntheticSample sample;
            sample.tokens.reserve(L);
            std::size_t filler_used = 0;
            for (std::size_t i = 0; i < n; ++i) {
                for (; filler_used < offsets[i]; ++filler_used) sample.tokens.push_back(draw(rng, filler));
                sample.passkey_spans.push_back({sample.tokens.size(), s});
                sample.tokens.insert(sample.tokens.end(), passkeys[i].begin(), passkeys[i].end());
            }
            for (; filler_used < n_filler; ++filler_used) sample.tokens.push_back(draw(rng, filler));

            sample.recall_span = {sample.tokens.size(), cfg.recall_len()};
            for (std::size_t i = 0; i < n; ++i) {
                if (i != 0) sample.tokens.push_back(cfg.separator);
                sample.supervised_spans.push_back({sample.tokens.size(), s});
                sample.tokens.insert(sample.tokens.end(), passkeys[i].begin(), passkeys[i].end());
            }
            out.push_back(std::move(sample));
        }
    }
    return out;
}

double distill_loss(const MatrixD& h_full, const MatrixD& h_mixed, std::span<const TokenSpan> supervised) {
    require_shape(h_mixed.rows(), h_mixed.cols(), h_full.rows(), h_full.cols(), "mixed hidden states");
    double loss = 0.0;
    for (const auto& span : supervised) {
        if (span.end() > h_full.rows()) throw ShapeError("supervised span exceeds sequence length");
        for (std::size_t t = span.start; t < span.end(); ++t)
            for (std::size_t c = 0; c < h_full.cols(); ++c) {
                const double d = h_full(t, c) - h_mixed(t, c);
                loss += d * d;
            }
    }
    return loss;
}

double distill_loss(std::span<const MatrixD> h_full, std::span<const MatrixD> h_mixed,
                    std::span<const std::vector<TokenSpan>> supervised) {
    if (h_full.size() != h_mixed.size() || h_full.size() != supervised.size()) {
        throw ShapeError("batch sizes of hidden states and spans differ");
    }
    if (h_full.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < h_full.size(); ++i) total += distill_loss(h_full[i], h_mixed[i], supervised[i]);
    return total / static_cast<double>(h_full.size());
}

double reg_loss(const GateMatrix& gates) {
    double r = 0.0;
    for (double a : gates.values()) r += std::abs(a);
    return r;
}

double total_loss(double distill, double reg, double lambda) { return distill + lambda * reg; }

namespace {

// Gradient of the batch loss with optional cached full-attention hidden states.
LossAndGrad loss_grad_impl(const ModelWeights& w, const GateMatrix& gates, std::span<const SyntheticSample> batch,
                           std::span<const MatrixD* const> cached_full, const LossConfig& cfg) {
    if (batch.empty()) throw ConfigError("empty batch");
    gates.require_matches(w.spec);
    LossAndGrad out;
    out.grad = GateMatrix::for_model(w.spec, 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    double distill = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& sample = batch[i];
        MatrixD full_local;
        const MatrixD* full = cached_full.empty() ? nullptr : cached_full[i];
        if (full == nullptr) {
            full_local = forward_hidden(w, sample.tokens, nullptr, cfg.mix).values;
            full = &full_local;
        }
        ForwardTape tape;
        const HiddenStates mixed = forward_hidden(w, sample.tokens, &gates, cfg.mix, &tape);
        distill += distill_loss(*full, mixed.values, sample.supervised_spans) * inv_n;

        MatrixD d_hidden(mixed.values.rows(), mixed.values.cols(), 0.0);
        for (const auto& span : sample.supervised_spans)
            for (std::size_t t = span.start; t < span.end(); ++t)
                for (std::size_t c = 0; c < d_hidden.cols(); ++c)
                    d_hidden(t, c) = -2.0 * inv_n * ((*full)(t, c) - mixed.values(t, c));
        backward(w, &gates, tape, d_hidden, nullptr, {}, nullptr, GradientSink{&out.grad, nullptr});
    }
    out.distill = distill;
    out.reg = reg_loss(gates);
    out.total = total_loss(out.distill, out.reg, cfg.lambda);
    for (std::size_t i = 0; i < gates.size(); ++i) {
        const double a = gates.values()[i];
        out.grad.values()[i] += cfg.lambda * (a < 0.0 ? -1.0 : 1.0);
    }
    if (!std::isfinite(out.total)) throw NumericError("non-finite loss");
    return out;
}

}  // namespace

LossAndGrad loss_grad_gates(const ModelWeights& w, const GateMatrix& gates, std::span<const SyntheticSample> batch,
                            const LossConfig& cfg) {
    return loss_grad_impl(w, gates, batch, {}, cfg);
}

double evaluate_total_loss(const ModelWeights& w, const GateMatrix& gates, std::span<const SyntheticSample> batch,
                           const LossConfig& cfg) {
    if (batch.empty()) throw ConfigError("empty batch");
    double distill = 0.0;
    for (const auto& sample : batch) {
        const auto full = forward_hidden(w, sample.tokens, nullptr, cfg.mix);
        const auto mixed = forward_hidden(w, sample.tokens, &gates, cfg.mix);
        distill += distill_loss(full.values, mixed.values, sample.supervised_spans);
    }
    distill /= static_cast<double>(batch.size());
    return total_loss(distill, reg_loss(gates), cfg.lambda);
}

void TrainConfig::validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (steps == 0) throw ConfigError("steps must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(peak_lr > 0.0) || !(floor_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (steps < warmup_steps + decay_steps) {
        throw ConfigError("steps (" + std::to_string(steps) + ") < warmup_steps + decay_steps (" +
                          std::to_string(warmup_steps + decay_steps) + ")");
    }
    streaming.validate();
    if (block_sparse && block_size == 0) throw ConfigError("block_size must be >= 1");
}

double TrainConfig::lr_at(std::size_t step) const {
    if (step < warmup_steps) {
        return floor_lr + (peak_lr - floor_lr) * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    const std::size_t decay_start = steps - decay_steps;
    if (decay_steps > 0 && step >= decay_start) {
        const double frac = static_cast<double>(step - decay_start + 1) / static_cast<double>(decay_steps);
        return peak_lr - (peak_lr - floor_lr) * std::min(frac, 1.0);
    }
    return peak_lr;
}

TrainResult train_gates(const ModelWeights& w, std::span<const SyntheticSample> dataset, const TrainConfig& cfg,
                        const TrainObserver& observer) {
    cfg.validate();
    w.validate();
    if (dataset.empty()) throw ConfigError("empty training dataset");

    LossConfig loss_cfg;
    loss_cfg.lambda = cfg.lambda;
    loss_cfg.mix.streaming = cfg.streaming;
    loss_cfg.mix.block_sparse = cfg.block_sparse;
    loss_cfg.mix.block_size = cfg.block_size;

    // The model is frozen, so full-attention targets are computed once.
    std::vector<MatrixD> full_hidden(dataset.size());
    std::vector<bool> have_full(dataset.size(), false);

    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    TrainResult result;
    result.gates = GateMatrix::for_model(w.spec, 1.0);
    std::vector<double> m(result.gates.size(), 0.0), v(result.gates.size(), 0.0);
    Rng rng = make_rng(cfg.seed, "train_gates");

    std::vector<SyntheticSample> batch;
    std::vector<const MatrixD*> batch_full;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        batch.clear();
        batch_full.clear();
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t idx = dataset.size() == 1 ? 0 : uniform_int(rng, 0, dataset.size() - 1);
            if (!have_full[idx]) {
                full_hidden[idx] = forward_hidden(w, dataset[idx].tokens, nullptr, loss_cfg.mix).values;
                have_full[idx] = true;
            }
            batch.push_back(dataset[idx]);
            batch_full.push_back(&full_hidden[idx]);
        }

        LossAndGrad lg;
        try {
            lg = loss_grad_impl(w, result.gates, batch, batch_full, loss_cfg);
        } catch (const NumericError& e) {
            throw TrainingError("diverged at step " + std::to_string(step) + ": " + e.what());
        }
        const double lr = cfg.lr_at(step);
        TrainLogRow row{step, lr, lg.distill, lg.reg, lg.total};
        result.log.push_back(row);

        const double t = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        auto& a = result.gates.values();
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double g = lg.grad.values()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            a[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
            if (cfg.clamp) a[i] = std::clamp(a[i], 0.0, 1.0);
        }
        if (observer) observer(row, result.gates);
    }
    return result;
}

void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
    std::ostringstream os;
    os << "step,lr,distill_loss,reg_loss,total_loss\n";
    for (const auto& r : log) {
        os << r.step << ',' << format_real(r.lr) << ',' << format_real(r.distill) << ',' << format_real(r.reg) << ','
           << format_real(r.total) << '\n';
    }
    write_text_file(path, os.str());
}

void save_dataset(std::span<const SyntheticSample> samples, const std::filesystem::path& path) {
    std::ostringstream os;
    os << "duoattn-dataset v1 samples=" << samples.size() << "\n";
    for (const auto& smp : samples) {
        for (std::size_t i = 0; i < smp.tokens.size(); ++i) os << (i ? " " : "") << smp.tokens[i];
        os << '\t' << format_spans(smp.passkey_spans) << '\t'
           << format_spans(std::span<const TokenSpan>(&smp.recall_span, 1)) << '\t'
           << format_spans(smp.supervised_spans) << "\n";
    }
    write_text_file(path, os.str());
}

std::vector<SyntheticSample> load_dataset(const std::filesystem::path& path) {
    const auto lines = read_text_lines(path);
    const std::string src = path.string();
    if (lines.empty()) throw ParseError(src, 1, "empty dataset file");
    const auto header = parse_header(lines[0], "duoattn-dataset", src);
    const std::size_t n = header_count(header, "samples", src);
    std::size_t body = lines.size() - 1;
    while (body > 0 && lines[body].empty()) --body;
    if (body != n) {
        throw ParseError(src, lines.size(),
                         "header declares " + std::to_string(n) + " samples, found " + std::to_string(body));
    }
    std::vector<SyntheticSample> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t line = i + 2;
        const auto fields = split(lines[i + 1], '\t');
        if (fields.size() != 4) throw ParseError(src, line, "expected 4 tab-separated fields");
        auto& smp = out[i];
        for (const auto& t : split(fields[0], ' ')) smp.tokens.push_back(static_cast<Token>(parse_count(t, src, line)));
        smp.passkey_spans = parse_spans(fields[1], src, line);
        const auto recall = parse_spans(fields[2], src, line);
        if (recall.size() != 1) throw ParseError(src, line, "expected exactly one recall span");
        smp.recall_span = recall[0];
        smp.supervised_spans = parse_spans(fields[3], src, line);
        auto check = [&](const TokenSpan& sp) {
            if (sp.end() > smp.tokens.size()) throw ParseError(src, line, "span runs past the sample");
        };
        for (const auto& sp : smp.passkey_spans) check(sp);
        for (const auto& sp : smp.supervised_spans) check(sp);
        check(smp.recall_span);
    }
    return out;
}

}  // namespace duoattn
