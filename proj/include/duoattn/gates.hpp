#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "duoattn/model.hpp"

namespace duoattn {

// One mixing weight per (layer, KV head). All query heads of a GQA group share
// their KV head's gate.
class GateMatrix {
public:
    GateMatrix() = default;
    GateMatrix(std::size_t n_layers, std::size_t n_kv_heads, double fill = 1.0)
        : n_layers_(n_layers), n_kv_heads_(n_kv_heads), values_(n_layers * n_kv_heads, fill) {}

    static GateMatrix for_model(const ModelSpec& spec, double fill = 1.0) {
        return GateMatrix(spec.n_layers, spec.n_kv_heads, fill);
    }

    std::size_t n_layers() const noexcept { return n_layers_; }
    std::size_t n_kv_heads() const noexcept { return n_kv_heads_; }
    std::size_t size() const noexcept { return values_.size(); }

    double& operator()(std::size_t layer, std::size_t head) noexcept { return values_[layer * n_kv_heads_ + head]; }
    double operator()(std::size_t layer, std::size_t head) const noexcept {
        return values_[layer * n_kv_heads_ + head];
    }

    std::vector<double>& values() noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    double sum() const noexcept;

    // Throws InvariantError if any gate is outside [0, 1] or non-finite.
    void validate() const;
    // Throws ShapeError unless shaped [n_layers x n_kv_heads] of `spec`.
    void require_matches(const ModelSpec& spec) const;

    bool operator==(const GateMatrix&) const = default;

private:
    std::size_t n_layers_ = 0;
    std::size_t n_kv_heads_ = 0;
    std::vector<double> values_;
};

// Text format: `duoattn-gates v1 L=<n> H=<n>` then one tab-separated row of
// decimals per layer. Values are written in shortest round-trip form.
void save_gates(const GateMatrix& gates, const std::filesystem::path& path);
GateMatrix load_gates(const std::filesystem::path& path);

}  // namespace duoattn
