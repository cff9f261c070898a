#pragma once

#include <span>
#include <vector>

#include "duoattn/masks.hpp"
#include "duoattn/tensor.hpp"

namespace duoattn {

// output_i = gain_i * x_i / sqrt(mean(x^2) + eps)
std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> gain, double eps);

// Rotates each row (one head vector per position) by its absolute position.
// `inverse` applies the negated angle, undoing a forward rotation.
MatrixD rope_apply(const MatrixD& vectors, std::span<const std::size_t> positions, double theta, bool inverse = false);

// Row-wise softmax over unmasked scaled scores; masked entries get exactly zero
// weight. Throws ContractError for a query row with no unmasked key.
MatrixD attention_probs(const MatrixD& q, const MatrixD& k, const AttentionMask& mask, double scale);

MatrixD attention_head_forward(const MatrixD& q, const MatrixD& k, const MatrixD& v, const AttentionMask& mask,
                               double scale);

}  // namespace duoattn
