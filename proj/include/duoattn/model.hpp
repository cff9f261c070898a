#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "duoattn/tensor.hpp"

namespace duoattn {

using Token = std::int32_t;

inline constexpr double kNormEps = 1e-6;

// Shape of the toy decoder: pre-norm blocks, RMSNorm, rotary positions,
// grouped-query attention and a SiLU-gated feed-forward.
struct ModelSpec {
    std::size_t n_layers = 2;
    std::size_t n_query_heads = 4;
    std::size_t n_kv_heads = 2;
    std::size_t head_dim = 16;
    std::size_t hidden_dim = 64;
    std::size_t ffn_dim = 128;
    std::size_t vocab_size = 32;
    double rope_theta = 10000.0;
    std::size_t max_seq_len = 512;

    std::size_t group_size() const noexcept { return n_query_heads / n_kv_heads; }
    std::size_t q_width() const noexcept { return n_query_heads * head_dim; }
    std::size_t kv_width() const noexcept { return n_kv_heads * head_dim; }

    // Throws ConfigError on any violated invariant.
    void validate() const;

    bool operator==(const ModelSpec&) const = default;
};

// Projections are stored [in x out] so that y = x * W.
struct LayerWeights {
    MatrixD wq;  // hidden x q_width
    MatrixD wk;  // hidden x kv_width
    MatrixD wv;  // hidden x kv_width
    MatrixD wo;  // q_width x hidden
    std::vector<double> attn_norm;
    std::vector<double> ffn_norm;
    MatrixD w_gate;  // hidden x ffn
    MatrixD w_up;    // hidden x ffn
    MatrixD w_down;  // ffn x hidden

    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    ModelSpec spec;
    MatrixD embedding;  // vocab x hidden
    std::vector<LayerWeights> layers;
    std::vector<double> final_norm;
    MatrixD unembedding;  // hidden x vocab

    // Allocates zero-valued tensors (unit norm gains) shaped for `spec`.
    static ModelWeights zeros(const ModelSpec& spec);
    // Every tensor zero, norm gains included; used as a gradient accumulator.
    static ModelWeights gradient_buffer(const ModelSpec& spec);

    void validate() const;

    // Visits every tensor in checkpoint declaration order.
    template <class F>
    void for_each_tensor(F&& f) {
        f(embedding.storage());
        for (auto& l : layers) {
            f(l.wq.storage());
            f(l.wk.storage());
            f(l.wv.storage());
            f(l.wo.storage());
            f(l.attn_norm);
            f(l.ffn_norm);
            f(l.w_gate.storage());
            f(l.w_up.storage());
            f(l.w_down.storage());
        }
        f(final_norm);
        f(unembedding.storage());
    }
    template <class F>
    void for_each_tensor(F&& f) const {
        const_cast<ModelWeights*>(this)->for_each_tensor([&](const std::vector<double>& t) { f(t); });
    }

    std::size_t parameter_count() const;

    bool operator==(const ModelWeights&) const = default;
};

// Deterministic small-variance initialization; same (spec, seed) gives
// bit-identical weights.
ModelWeights init_model(const ModelSpec& spec, std::uint64_t seed);

// FNV-1a over the raw little-endian bytes of every tensor.
std::uint64_t checksum(const ModelWeights& w);

// Binary checkpoint: "DUOW", u32 version, serialized spec, then f64 tensors in
// declaration order, all little-endian.
void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path);
ModelWeights load_checkpoint(const std::filesystem::path& path);

// Final-layer activations before the final norm, one row per token.
struct HiddenStates {
    MatrixD values;
    std::vector<std::size_t> position_ids;

    std::size_t tokens() const noexcept { return values.rows(); }
};

}  // namespace duoattn
