#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "duoattn/gates.hpp"
#include "duoattn/masks.hpp"
#include "duoattn/model.hpp"

namespace duoattn {

// Binary retrieval/streaming assignment per (layer, kv head).
struct HeadPolicy {
    std::size_t n_layers = 0;
    std::size_t n_kv_heads = 0;
    std::vector<std::uint8_t> retrieval;  // row-major [n_layers x n_kv_heads]
    double tau = 0.0;
    double retrieval_ratio = 0.0;

    HeadPolicy() = default;
    HeadPolicy(std::size_t layers, std::size_t kv_heads, bool all_retrieval);

    static HeadPolicy uniform(const ModelSpec& spec, bool all_retrieval) {
        return HeadPolicy(spec.n_layers, spec.n_kv_heads, all_retrieval);
    }

    bool is_retrieval(std::size_t layer, std::size_t head) const { return retrieval[layer * n_kv_heads + head] != 0; }
    void set(std::size_t layer, std::size_t head, bool r) { retrieval[layer * n_kv_heads + head] = r ? 1 : 0; }
    std::size_t size() const noexcept { return retrieval.size(); }
    std::size_t retrieval_count() const;
    std::size_t retrieval_count(std::size_t layer) const;
    void require_matches(const ModelSpec& spec) const;

    bool operator==(const HeadPolicy&) const = default;
};

// Heads strictly above the (1 - ratio) quantile become retrieval heads. Exactly
// ceil(ratio * L * H) heads are selected; heads tied at tau drop to streaming in
// ascending (layer, head) order until the count is met.
HeadPolicy binarize(const GateMatrix& gates, double retrieval_ratio);

void save_policy(const HeadPolicy& policy, const std::filesystem::path& path);
HeadPolicy load_policy(const std::filesystem::path& path);

struct ReorderResult {
    ModelWeights weights;
    HeadPolicy policy;
    std::vector<std::vector<std::size_t>> kv_order;  // kv_order[l][new] = old kv head index
};

// Permutes KV heads (and their query groups) so retrieval heads form a leading
// block per layer. The output projection rows follow, so the model function is
// unchanged.
ReorderResult reorder_heads(const ModelWeights& w, const HeadPolicy& policy);

struct PrefillConfig {
    std::size_t chunk_size = 256;
    bool strict = true;  // require chunk_size >= recent_size when streaming heads exist

    void validate(const StreamingConfig& streaming, bool has_streaming_heads) const;
};

// Contiguous K/V rows with their absolute positions. Grows geometrically.
template <class T>
struct KVBlock {
    std::size_t width = 0;
    std::vector<T> keys, values;
    std::vector<std::size_t> positions;

    std::size_t size() const noexcept { return positions.size(); }
    const T* key(std::size_t i) const { return keys.data() + i * width; }
    const T* value(std::size_t i) const { return values.data() + i * width; }

    void append(const T* k, const T* v, std::size_t pos) {
        keys.insert(keys.end(), k, k + width);
        values.insert(values.end(), v, v + width);
        positions.push_back(pos);
    }
};

// Sink rows plus a ring of the most recent rows. Appending to a full ring
// overwrites the oldest non-sink entry.
template <class T>
class StreamingKV {
public:
    StreamingKV() = default;
    StreamingKV(std::size_t width, const StreamingConfig& cfg)
        : width_(width), cfg_(cfg), sink_k_(width * cfg.sink_size), sink_v_(width * cfg.sink_size),
          ring_k_(width * cfg.recent_size), ring_v_(width * cfg.recent_size), ring_pos_(cfg.recent_size) {}

    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return n_sink_ + ring_count_; }
    std::size_t capacity() const noexcept { return cfg_.sink_size + cfg_.recent_size; }

    void append(const T* k, const T* v, std::size_t pos) {
        if (pos < cfg_.sink_size) {
            std::copy(k, k + width_, sink_k_.begin() + static_cast<std::ptrdiff_t>(n_sink_ * width_));
            std::copy(v, v + width_, sink_v_.begin() + static_cast<std::ptrdiff_t>(n_sink_ * width_));
            ++n_sink_;
            return;
        }
        std::copy(k, k + width_, ring_k_.begin() + static_cast<std::ptrdiff_t>(head_ * width_));
        std::copy(v, v + width_, ring_v_.begin() + static_cast<std::ptrdiff_t>(head_ * width_));
        ring_pos_[head_] = pos;
        head_ = (head_ + 1) % cfg_.recent_size;
        if (ring_count_ < cfg_.recent_size) ++ring_count_;
    }

    // Visits rows in ascending position order: f(pos, key, value).
    template <class F>
    void for_each(F&& f) const {
        for (std::size_t i = 0; i < n_sink_; ++i) f(i, sink_k_.data() + i * width_, sink_v_.data() + i * width_);
        const std::size_t oldest = ring_count_ < cfg_.recent_size ? 0 : head_;
        for (std::size_t i = 0; i < ring_count_; ++i) {
            const std::size_t s = (oldest + i) % cfg_.recent_size;
            f(ring_pos_[s], ring_k_.data() + s * width_, ring_v_.data() + s * width_);
        }
    }

    std::vector<std::size_t> positions() const {
        std::vector<std::size_t> out;
        out.reserve(size());
        for_each([&](std::size_t p, const T*, const T*) { out.push_back(p); });
        return out;
    }

private:
    std::size_t width_ = 0;
    StreamingConfig cfg_{};
    std::vector<T> sink_k_, sink_v_;
    std::vector<T> ring_k_, ring_v_;
    std::vector<std::size_t> ring_pos_;
    std::size_t n_sink_ = 0;
    std::size_t ring_count_ = 0;
    std::size_t head_ = 0;
};

struct CacheLayerStats {
    std::size_t retrieval_len = 0;
    std::size_t streaming_len = 0;
    std::size_t retrieval_bytes = 0;
    std::size_t streaming_bytes = 0;
};

struct CacheStats {
    std::size_t tokens = 0;
    std::size_t peak_streaming_scores = 0;  // largest score row materialized for a streaming query
    std::vector<CacheLayerStats> layers;

    std::size_t total_bytes() const;
};

// One sequence's cache. Owned by a single writer; movable between threads.
template <class T>
struct BasicDualKVCache {
    struct Layer {
        std::size_t n_retrieval = 0;  // leading kv heads (engine order)
        std::size_t n_streaming = 0;
        KVBlock<T> retrieval;
        StreamingKV<T> streaming;
    };
    std::vector<Layer> layers;
    StreamingConfig streaming_cfg{};
    std::size_t head_dim = 0;
    std::size_t tokens = 0;
    std::size_t peak_streaming_scores = 0;

    CacheStats stats() const;
};

// Keys and values cached for one kv head, in position order.
template <class T>
struct HeadCacheView {
    bool retrieval = false;
    std::vector<std::size_t> positions;
    Matrix<T> keys, values;
};

// Decoding and chunked prefill with a retrieval cache for retrieval heads and a
// sink+recent cache for streaming heads. Heads are reordered on construction so
// the split is a contiguous slice; head_cache() takes original head indices.
template <class T>
class BasicDuoEngine {
public:
    using Cache = BasicDualKVCache<T>;

    BasicDuoEngine(const ModelWeights& w, const HeadPolicy& policy, const StreamingConfig& streaming);

    const ModelSpec& spec() const noexcept { return spec_; }
    const HeadPolicy& policy() const noexcept { return policy_; }
    const StreamingConfig& streaming() const noexcept { return streaming_; }
    bool has_streaming_heads() const noexcept;

    Cache new_cache() const;

    // Appends one token at position cache.tokens and returns its logits.
    std::vector<T> decode_step(Cache& cache, Token token) const;

    // Appends `tokens` in chunks and returns the logits of the last one.
    std::vector<T> prefill(Cache& cache, std::span<const Token> tokens, const PrefillConfig& cfg) const;

    Cache chunked_prefill(std::span<const Token> tokens, const PrefillConfig& cfg) const;

    std::vector<Token> greedy_generate(std::span<const Token> prompt, std::size_t n_new,
                                       const PrefillConfig& cfg) const;

    HeadCacheView<T> head_cache(const Cache& cache, std::size_t layer, std::size_t kv_head) const;

private:
    struct Layer {
        Matrix<T> wq, wk, wv, wo, w_gate, w_up, w_down;
        std::vector<T> attn_norm, ffn_norm;
    };

    void check_cache(const Cache& cache) const;
    void check_token(Token t, std::size_t pos) const;
    void run_chunk(Cache& cache, std::span<const Token> chunk, bool want_logits, std::vector<T>& logits) const;

    ModelSpec spec_;
    HeadPolicy policy_;           // original head order
    HeadPolicy ordered_policy_;   // engine head order
    std::vector<std::vector<std::size_t>> kv_order_;
    StreamingConfig streaming_;
    Matrix<T> embedding_, unembedding_;
    std::vector<T> final_norm_;
    std::vector<Layer> layers_;
    std::vector<double> inv_freq_;
};

// Conventional decoder with a single full cache per layer.
template <class T>
class BasicReferenceDecoder {
public:
    explicit BasicReferenceDecoder(const ModelWeights& w);

    void reset();
    std::vector<T> step(Token token);
    std::vector<Token> greedy_generate(std::span<const Token> prompt, std::size_t n_new);
    std::size_t tokens() const noexcept { return pos_; }
    // keys/values of one kv head at layer l, rows = positions
    Matrix<T> keys(std::size_t layer, std::size_t kv_head) const;
    Matrix<T> values(std::size_t layer, std::size_t kv_head) const;

private:
    struct Layer {
        Matrix<T> wq, wk, wv, wo, w_gate, w_up, w_down;
        std::vector<T> attn_norm, ffn_norm;
    };

    ModelSpec spec_;
    Matrix<T> embedding_, unembedding_;
    std::vector<T> final_norm_;
    std::vector<Layer> layers_;
    std::vector<std::vector<T>> k_, v_;  // per layer, rows of kv_width
    std::vector<double> inv_freq_;
    std::size_t pos_ = 0;
};

using DualKVCache = BasicDualKVCache<float>;
using DuoEngine = BasicDuoEngine<float>;
using ReferenceDecoder = BasicReferenceDecoder<float>;

// Lowest index wins ties.
template <class T>
Token argmax_token(std::span<const T> logits);

}  // namespace duoattn
