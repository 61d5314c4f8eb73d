#pragma once

// Dense row-major matrix of doubles. Deliberately small: storage, element
// access, and the handful of whole-matrix operations the pipelines need.
// Heavy kernels (products, factorizations) run through Eigen maps over the
// same storage, so there is no copy at the boundary.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dcbm/errors.hpp"

namespace dcbm {

using EigenRowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<EigenRowMajor>;
using EigenConstMap = Eigen::Map<const EigenRowMajor>;

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data; // row-major, rows * cols entries

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows = init.size();
        cols = rows == 0 ? 0 : init.begin()->size();
        data.reserve(rows * cols);
        for (const auto& row : init) {
            if (row.size() != cols)
                throw ShapeError("Matrix initializer rows have unequal lengths");
            data.insert(data.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    EigenMap map() { return EigenMap(data.data(), static_cast<Eigen::Index>(rows),
                                     static_cast<Eigen::Index>(cols)); }
    EigenConstMap map() const {
        return EigenConstMap(data.data(), static_cast<Eigen::Index>(rows),
                             static_cast<Eigen::Index>(cols));
    }

    static Matrix from_eigen(const Eigen::Ref<const EigenRowMajor>& e) {
        Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
        m.map() = e;
        return m;
    }

    std::vector<double> row(std::size_t r) const {
        return std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                   data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
    }

    std::vector<double> col(std::size_t c) const {
        std::vector<double> out(rows);
        for (std::size_t r = 0; r < rows; ++r) out[r] = (*this)(r, c);
        return out;
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_finite(const Matrix& m, const std::string& what) {
    if (!m.all_finite()) throw NumericError(what + ": non-finite entries");
}

inline Matrix mat_mul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw ShapeError("mat_mul: inner dimensions disagree (" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + ")");
    Matrix out(a.rows, b.cols);
    out.map().noalias() = a.map() * b.map();
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    out.map() = a.map().transpose();
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("add: shapes disagree");
    Matrix out(a.rows, a.cols);
    out.map() = a.map() + b.map();
    return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("sub: shapes disagree");
    Matrix out(a.rows, a.cols);
    out.map() = a.map() - b.map();
    return out;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix out(a.rows, a.cols);
    out.map() = a.map() * s;
    return out;
}

/// Column means as a length-cols vector.
inline std::vector<double> col_means(const Matrix& a) {
    if (a.rows == 0) throw ShapeError("col_means: empty matrix");
    std::vector<double> mu(a.cols, 0.0);
    for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) mu[c] += a(r, c);
    for (double& v : mu) v /= static_cast<double>(a.rows);
    return mu;
}

inline double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::abs(v));
    return m;
}

/// Rows of `a` selected by `idx`, in order.
inline Matrix take_rows(const Matrix& a, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), a.cols);
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < a.cols; ++c) out(i, c) = a(idx[i], c);
    return out;
}

} // namespace dcbm
