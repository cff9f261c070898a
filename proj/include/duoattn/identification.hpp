#pragma once

// Retrieval-head identification: synthetic passkey data, the distillation and
// L1 losses, exact gate gradients, and the gate optimization loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "duoattn/forward.hpp"
#include "duoattn/gates.hpp"

namespace duoattn {

struct TokenSpan {
    std::size_t start = 0;
    std::size_t len = 0;
    std::size_t end() const noexcept { return start + len; }
    bool operator==(const TokenSpan&) const = default;
};

// Half-open token-id range [lo, hi).
struct TokenRange {
    Token lo = 0;
    Token hi = 0;
    std::size_t size() const noexcept { return hi > lo ? static_cast<std::size_t>(hi - lo) : 0; }
    bool operator==(const TokenRange&) const = default;
};

struct SyntheticDataConfig {
    std::size_t n_passkeys = 10;
    std::size_t passkey_len = 32;
    std::vector<std::size_t> context_lengths;
    std::size_t samples_per_length = 1;
    std::size_t n_insertion_points = 1000;
    std::size_t vocab_size = 0;
    std::uint64_t seed = 0;
    // Empty ranges mean "whole vocabulary".
    TokenRange filler_tokens;
    TokenRange passkey_tokens;
    Token separator = 0;

    TokenRange filler_range() const noexcept;
    TokenRange passkey_range() const noexcept;
    // Tokens in the trailing recall section: every passkey plus one separator
    // between consecutive passkeys.
    std::size_t recall_len() const noexcept { return n_passkeys * passkey_len + (n_passkeys - 1); }
    void validate() const;
};

struct SyntheticSample {
    std::vector<Token> tokens;
    std::vector<TokenSpan> passkey_spans;      // insertions inside the context, in order
    TokenSpan recall_span;                     // the whole trailing recall section
    std::vector<TokenSpan> supervised_spans;   // recalled passkey tokens only

    std::size_t supervised_len() const noexcept;
};

std::vector<SyntheticSample> gen_passkey_dataset(const SyntheticDataConfig& cfg);

// Text file: header `duoattn-dataset v1 samples=N`, then one line per sample
// with tab-separated fields: tokens (space-separated), passkey spans,
// recall span, supervised spans. Spans are `start:len`, comma-separated.
void save_dataset(std::span<const SyntheticSample> samples, const std::filesystem::path& path);
std::vector<SyntheticSample> load_dataset(const std::filesystem::path& path);

// Summed squared difference of hidden rows inside `supervised` for one sample.
double distill_loss(const MatrixD& h_full, const MatrixD& h_mixed, std::span<const TokenSpan> supervised);
// Mean over the batch of the per-sample distillation loss.
double distill_loss(std::span<const MatrixD> h_full, std::span<const MatrixD> h_mixed,
                    std::span<const std::vector<TokenSpan>> supervised);

double reg_loss(const GateMatrix& gates);
double total_loss(double distill, double reg, double lambda);

struct LossConfig {
    double lambda = 0.05;
    MixOptions mix;
};

struct LossAndGrad {
    double distill = 0.0;
    double reg = 0.0;
    double total = 0.0;
    GateMatrix grad;
};

// Reverse-mode gradient of distill + lambda * reg with respect to every gate.
// The L1 subgradient at alpha = 0 is +1.
LossAndGrad loss_grad_gates(const ModelWeights& w, const GateMatrix& gates, std::span<const SyntheticSample> batch,
                            const LossConfig& cfg);

// Loss only (no tape); used by finite-difference checks.
double evaluate_total_loss(const ModelWeights& w, const GateMatrix& gates, std::span<const SyntheticSample> batch,
                           const LossConfig& cfg);

struct TrainConfig {
    double lambda = 0.05;
    std::size_t steps = 2000;
    std::size_t batch_size = 1;
    double peak_lr = 0.02;
    double floor_lr = 0.002;
    std::size_t warmup_steps = 400;
    std::size_t decay_steps = 400;
    StreamingConfig streaming{128, 256};
    bool clamp = true;
    bool block_sparse = false;
    std::size_t block_size = 64;
    std::uint64_t seed = 0;

    void validate() const;
    // Linear floor->peak warmup, constant plateau, linear peak->floor decay
    // ending exactly at floor on the last step.
    double lr_at(std::size_t step) const;
};

struct TrainLogRow {
    std::size_t step = 0;
    double lr = 0.0;
    double distill = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

struct TrainResult {
    GateMatrix gates;
    std::vector<TrainLogRow> log;
};

// Optional per-step observer (step, current gates, log row).
using TrainObserver = std::function<void(const TrainLogRow&, const GateMatrix&)>;

// Gates start at 1, AdamW (0.9/0.999/1e-8, no weight decay) on the gates only,
// clamp to [0,1] after each step. Model weights are never modified.
TrainResult train_gates(const ModelWeights& w, std::span<const SyntheticSample> dataset, const TrainConfig& cfg,
                        const TrainObserver& observer = {});

void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

}  // namespace duoattn
