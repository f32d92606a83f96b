#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace recipecrit {

// Dense row-major matrix of doubles. Vectors are 1 x n matrices.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    [[nodiscard]] std::size_t size() const { return data.size(); }
    [[nodiscard]] bool empty() const { return data.empty(); }

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    std::span<double> row(int r) {
        return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }
    [[nodiscard]] std::span<const double> row(int r) const {
        return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }

    [[nodiscard]] bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    void set_zero() { std::fill(data.begin(), data.end(), 0.0); }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

}  // namespace recipecrit
