#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace duoattn {

// Streaming (Lambda-shaped) window: the first `sink_size` absolute positions
// plus the `recent_size` most recent positions including the query itself.
struct StreamingConfig {
    std::size_t sink_size = 128;
    std::size_t recent_size = 256;

    void validate() const;
    std::size_t capacity() const noexcept { return sink_size + recent_size; }

    // Whether a query at absolute position q may attend key position k.
    bool allows(std::size_t q, std::size_t k) const noexcept {
        return k <= q && (k < sink_size || q - k < recent_size);
    }

    bool operator==(const StreamingConfig&) const = default;
};

// Boolean attention table, true = attend. Row i belongs to query position
// query_pos[i], column j to key position key_pos[j].
class AttentionMask {
public:
    AttentionMask() = default;
    AttentionMask(std::vector<std::size_t> query_pos, std::vector<std::size_t> key_pos);

    std::size_t queries() const noexcept { return query_pos_.size(); }
    std::size_t keys() const noexcept { return key_pos_.size(); }

    bool operator()(std::size_t i, std::size_t j) const noexcept { return cells_[i * keys() + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v) noexcept { cells_[i * keys() + j] = v ? 1 : 0; }

    std::size_t row_count(std::size_t i) const noexcept;
    const std::vector<std::size_t>& query_positions() const noexcept { return query_pos_; }
    const std::vector<std::size_t>& key_positions() const noexcept { return key_pos_; }

    // Throws ContractError if any row is empty or a key lies after its query.
    void validate() const;

    bool operator==(const AttentionMask&) const = default;

private:
    std::vector<std::size_t> query_pos_;
    std::vector<std::size_t> key_pos_;
    std::vector<std::uint8_t> cells_;
};

AttentionMask causal_mask(std::size_t T);
AttentionMask streaming_mask(std::size_t T, const StreamingConfig& cfg);

// Block-granular superset of streaming_mask: key block b is enabled for query
// block a iff streaming_mask enables some cell inside the (a, b) tile. Cells
// after the query stay masked so the result is still causal.
AttentionMask block_sparse_streaming_mask(std::size_t T, const StreamingConfig& cfg, std::size_t block);

}  // namespace duoattn
