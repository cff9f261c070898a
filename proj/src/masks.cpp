#include "duoattn/masks.hpp"

#include <algorithm>
#include <numeric>

#include "duoattn/errors.hpp"

namespace duoattn {

namespace {

std::vector<std::size_t> iota_positions(std::size_t T) {
    std::vector<std::size_t> p(T);
    std::iota(p.begin(), p.end(), std::size_t{0});
    return p;
}

void require_length(std::size_t T) {
    if (T == 0) throw LengthError("mask length must be >= 1");
}

}  // namespace

void StreamingConfig::validate() const {
    if (recent_size == 0) throw ConfigError("recent_size must be >= 1 so every query sees itself");
}

AttentionMask::AttentionMask(std::vector<std::size_t> query_pos, std::vector<std::size_t> key_pos)
    : query_pos_(std::move(query_pos)), key_pos_(std::move(key_pos)), cells_(query_pos_.size() * key_pos_.size(), 0) {}

std::size_t AttentionMask::row_count(std::size_t i) const noexcept {
    const auto* r = cells_.data() + i * keys();
    return static_cast<std::size_t>(std::count(r, r + keys(), std::uint8_t{1}));
}

void AttentionMask::validate() const {
    for (std::size_t i = 0; i < queries(); ++i) {
        if (row_count(i) == 0) throw ContractError("mask row " + std::to_string(i) + " has no unmasked keys");
        for (std::size_t j = 0; j < keys(); ++j) {
            if ((*this)(i, j) && key_pos_[j] > query_pos_[i]) {
                throw ContractError("mask row " + std::to_string(i) + " attends a future key");
            }
        }
    }
}

AttentionMask causal_mask(std::size_t T) {
    require_length(T);
    AttentionMask m(iota_positions(T), iota_positions(T));
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
    return m;
}

AttentionMask streaming_mask(std::size_t T, const StreamingConfig& cfg) {
    cfg.validate();
    require_length(T);
    AttentionMask m(iota_positions(T), iota_positions(T));
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j <= i; ++j) m.set(i, j, cfg.allows(i, j));
    return m;
}

AttentionMask block_sparse_streaming_mask(std::size_t T, const StreamingConfig& cfg, std::size_t block) {
    cfg.validate();
    require_length(T);
    if (block == 0) throw ConfigError("block size must be >= 1");
    const std::size_t nb = (T + block - 1) / block;
    std::vector<std::uint8_t> tiles(nb * nb, 0);
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            if (cfg.allows(i, j)) tiles[(i / block) * nb + j / block] = 1;

    AttentionMask m(iota_positions(T), iota_positions(T));
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j <= i; ++j) m.set(i, j, tiles[(i / block) * nb + j / block] != 0);
    return m;
}

}  // namespace duoattn
