#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "duoattn/errors.hpp"

namespace duoattn {

// Dense row-major matrix. Rows are contiguous so every kernel below works on
// one row at a time; results for a row never depend on how many other rows
// are processed alongside it.
template <class T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{}) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using MatrixD = Matrix<double>;
using MatrixF = Matrix<float>;

template <class To, class From>
Matrix<To> cast_matrix(const Matrix<From>& m) {
    Matrix<To> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = static_cast<To>(m.data()[i]);
    return out;
}

template <class T>
bool all_finite(std::span<const T> xs) {
    return std::all_of(xs.begin(), xs.end(), [](T x) { return std::isfinite(x); });
}

inline void require_shape(std::size_t got_rows, std::size_t got_cols, std::size_t rows, std::size_t cols,
                          const char* what) {
    if (got_rows != rows || got_cols != cols) {
        throw ShapeError(std::string(what) + " is " + std::to_string(got_rows) + "x" + std::to_string(got_cols) +
                         ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

}  // namespace duoattn
