#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "duoattn/model.hpp"

namespace testutil {

inline duoattn::ModelSpec small_spec(std::size_t layers = 2, std::size_t q_heads = 4, std::size_t kv_heads = 2,
                                     std::size_t head_dim = 8) {
    duoattn::ModelSpec s;
    s.n_layers = layers;
    s.n_query_heads = q_heads;
    s.n_kv_heads = kv_heads;
    s.head_dim = head_dim;
    s.hidden_dim = q_heads * head_dim;
    s.ffn_dim = 2 * s.hidden_dim;
    s.vocab_size = 24;
    s.rope_theta = 10000.0;
    s.max_seq_len = 256;
    return s;
}

inline std::vector<duoattn::Token> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<duoattn::Token> t(n);
    for (auto& x : t) x = static_cast<duoattn::Token>(rng() % vocab);
    return t;
}

inline std::filesystem::path temp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "duoattn-tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace testutil
