#include "duoattn/ops.hpp"

#include <cmath>
#include <limits>

#include "duoattn/kernels.hpp"

namespace duoattn {

std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> gain, double eps) {
    if (x.size() != gain.size()) {
        throw ShapeError("rmsnorm input length " + std::to_string(x.size()) + " != gain length " +
                         std::to_string(gain.size()));
    }
    if (!(eps > 0.0)) throw ConfigError("rmsnorm eps must be positive");
    std::vector<double> y(x.size());
    if (!x.empty()) kernels::rmsnorm_row(x.data(), gain.data(), x.size(), eps, y.data());
    return y;
}

MatrixD rope_apply(const MatrixD& vectors, std::span<const std::size_t> positions, double theta, bool inverse) {
    const std::size_t hd = vectors.cols();
    if (hd % 2 != 0) throw ConfigError("rotary embedding needs an even head_dim, got " + std::to_string(hd));
    if (positions.size() != vectors.rows()) throw ShapeError("rope positions do not match row count");
    const auto freq = kernels::rope_inv_freq(hd, theta);
    std::vector<double> c(hd / 2), s(hd / 2);
    MatrixD out = vectors;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        kernels::rope_angles(static_cast<double>(positions[r]), freq, c.data(), s.data());
        kernels::rope_rotate(out.row(r).data(), c.data(), s.data(), hd / 2, inverse);
    }
    return out;
}

MatrixD attention_probs(const MatrixD& q, const MatrixD& k, const AttentionMask& mask, double scale) {
    if (q.cols() != k.cols()) throw ShapeError("query and key widths differ");
    require_shape(mask.queries(), mask.keys(), q.rows(), k.rows(), "attention mask");
    MatrixD p(q.rows(), k.rows(), 0.0);
    std::vector<double> buf(k.rows());
    std::vector<std::size_t> idx(k.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
        std::size_t n = 0;
        for (std::size_t j = 0; j < k.rows(); ++j) {
            if (!mask(i, j)) continue;
            buf[n] = kernels::dot(q.row(i).data(), k.row(j).data(), q.cols()) * scale;
            idx[n++] = j;
        }
        if (!kernels::softmax_inplace(buf.data(), n)) {
            throw ContractError("attention query row " + std::to_string(i) + " has zero unmasked keys");
        }
        for (std::size_t t = 0; t < n; ++t) p(i, idx[t]) = buf[t];
    }
    return p;
}

MatrixD attention_head_forward(const MatrixD& q, const MatrixD& k, const MatrixD& v, const AttentionMask& mask,
                               double scale) {
    if (k.rows() != v.rows()) throw ShapeError("key and value row counts differ");
    const MatrixD p = attention_probs(q, k, mask, scale);
    MatrixD out(q.rows(), v.cols(), 0.0);
    for (std::size_t i = 0; i < q.rows(); ++i)
        for (std::size_t j = 0; j < k.rows(); ++j)
            if (p(i, j) != 0.0) kernels::axpy(out.row(i).data(), p(i, j), v.row(j).data(), v.cols());
    return out;
}

}  // namespace duoattn
