#pragma once

// Scalar CPU kernels shared by the 64-bit identification path and the 32-bit
// deployment engine. Reduction order is fixed, so a row computed inside a
// chunk is bit-identical to the same row computed alone.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace duoattn::kernels {

template <class T>
inline T dot(const T* a, const T* b, std::size_t n) noexcept {
    T s0{}, s1{}, s2{}, s3{};
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// y += a * x
template <class T>
inline void axpy(T* y, T a, const T* x, std::size_t n) noexcept {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// y = x * W where W is [in x out] row-major.
template <class T>
inline void vec_mat(const T* x, const T* w, std::size_t in, std::size_t out, T* y) noexcept {
    std::fill(y, y + out, T{});
    for (std::size_t k = 0; k < in; ++k) {
        const T xk = x[k];
        if (xk != T{}) axpy(y, xk, w + k * out, out);
    }
}

// y = x * W^T where W is [out x in] row-major (i.e. y_o = <x, W_o>).
template <class T>
inline void vec_mat_t(const T* x, const T* w, std::size_t in, std::size_t out, T* y) noexcept {
    for (std::size_t o = 0; o < out; ++o) y[o] = dot(x, w + o * in, in);
}

template <class T>
inline T rms_factor(const T* x, std::size_t n, T eps) noexcept {
    T ss = dot(x, x, n);
    return T{1} / std::sqrt(ss / static_cast<T>(n) + eps);
}

template <class T>
inline void rmsnorm_row(const T* x, const T* gain, std::size_t n, T eps, T* y) noexcept {
    const T r = rms_factor(x, n, eps);
    for (std::size_t i = 0; i < n; ++i) y[i] = gain[i] * x[i] * r;
}

// In-place softmax of the first n entries; returns false when n == 0.
template <class T>
inline bool softmax_inplace(T* s, std::size_t n) noexcept {
    if (n == 0) return false;
    T m = s[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, s[i]);
    T z{};
    for (std::size_t i = 0; i < n; ++i) {
        s[i] = std::exp(s[i] - m);
        z += s[i];
    }
    const T inv = T{1} / z;
    for (std::size_t i = 0; i < n; ++i) s[i] *= inv;
    return true;
}

template <class T>
inline T silu(T x) noexcept {
    return x / (T{1} + std::exp(-x));
}

template <class T>
inline T silu_grad(T x) noexcept {
    const T sg = T{1} / (T{1} + std::exp(-x));
    return sg * (T{1} + x * (T{1} - sg));
}

// Rotary embedding. Channel pair (2k, 2k+1) of a head vector is rotated by
// pos * theta^(-2k/head_dim). Angles are evaluated once per position and then
// applied to every head at that position.
inline std::vector<double> rope_inv_freq(std::size_t head_dim, double theta) {
    std::vector<double> f(head_dim / 2);
    for (std::size_t k = 0; k < f.size(); ++k) {
        f[k] = std::pow(theta, -2.0 * static_cast<double>(k) / static_cast<double>(head_dim));
    }
    return f;
}

template <class T>
inline void rope_angles(double pos, std::span<const double> inv_freq, T* cos_out, T* sin_out) noexcept {
    for (std::size_t k = 0; k < inv_freq.size(); ++k) {
        const double ang = pos * inv_freq[k];
        cos_out[k] = static_cast<T>(std::cos(ang));
        sin_out[k] = static_cast<T>(std::sin(ang));
    }
}

// `inverse` rotates by the negated angle.
template <class T>
inline void rope_rotate(T* v, const T* c, const T* s, std::size_t n_pairs, bool inverse = false) noexcept {
    for (std::size_t k = 0; k < n_pairs; ++k) {
        const T a = v[2 * k];
        const T b = v[2 * k + 1];
        const T sk = inverse ? -s[k] : s[k];
        v[2 * k] = a * c[k] - b * sk;
        v[2 * k + 1] = a * sk + b * c[k];
    }
}

}  // namespace duoattn::kernels
