#pragma once

// Ridge / least-squares fitting and orthonormal sampling. The solver runs on
// an orthogonal decomposition of the (optionally ridge-augmented) system, not
// on explicit normal equations: the regular pipeline regresses on confounded
// feature matrices with no conditioning guarantee, and squaring them there
// would cost half the precision.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "dcbm/errors.hpp"
#include "dcbm/matrix.hpp"
#include "dcbm/rng.hpp"

namespace dcbm {

/// Affine map y = W x + b fitted by (ridge) least squares.
struct LinearModel {
    Matrix weights;                // out_dim x in_dim
    std::vector<double> intercept; // out_dim
    double ridge_lambda = 0.0;
    bool degenerate = false; // rank-deficient design with lambda == 0

    std::size_t in_dim() const { return weights.cols; }
    std::size_t out_dim() const { return weights.rows; }

    Matrix predict(const Matrix& X) const {
        if (X.cols != weights.cols)
            throw ShapeError("LinearModel::predict: feature width mismatch");
        Matrix out(X.rows, weights.rows);
        out.map().noalias() = X.map() * weights.map().transpose();
        for (std::size_t r = 0; r < out.rows; ++r)
            for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += intercept[c];
        return out;
    }
};

/// argmin_{W,b} ||Y - X W^T - 1 b^T||^2 + lambda ||W||^2, intercept unpenalized.
/// Rank-deficient X with lambda == 0 yields the minimum-norm W and sets the
/// degenerate flag.
inline LinearModel solve_least_squares(const Matrix& X, const Matrix& Y, double lambda,
                                       bool fit_intercept = true) {
    if (X.rows != Y.rows)
        throw ShapeError("solve_least_squares: X and Y row counts disagree");
    if (X.rows < 1) throw ShapeError("solve_least_squares: need at least one row");
    if (lambda < 0.0) throw ConfigError("solve_least_squares: lambda must be >= 0");

    const auto n = static_cast<Eigen::Index>(X.rows);
    const auto p = static_cast<Eigen::Index>(X.cols);
    const auto q = static_cast<Eigen::Index>(Y.cols);

    Eigen::MatrixXd Xc = X.map();
    Eigen::MatrixXd Yc = Y.map();
    Eigen::VectorXd x_mean = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd y_mean = Eigen::VectorXd::Zero(q);
    if (fit_intercept) {
        x_mean = Xc.colwise().mean();
        y_mean = Yc.colwise().mean();
        Xc.rowwise() -= x_mean.transpose();
        Yc.rowwise() -= y_mean.transpose();
    }

    Eigen::Index aug_rows = n + (lambda > 0.0 ? p : 0);
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(aug_rows, p);
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(aug_rows, q);
    A.topRows(n) = Xc;
    B.topRows(n) = Yc;
    if (lambda > 0.0)
        A.bottomRows(p) = std::sqrt(lambda) * Eigen::MatrixXd::Identity(p, p);

    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
    Eigen::MatrixXd Wt = cod.solve(B); // p x q

    LinearModel model;
    model.ridge_lambda = lambda;
    model.degenerate = (lambda == 0.0 && cod.rank() < p);
    model.weights = Matrix(static_cast<std::size_t>(q), static_cast<std::size_t>(p));
    model.weights.map() = Wt.transpose();
    model.intercept.assign(static_cast<std::size_t>(q), 0.0);
    if (fit_intercept) {
        Eigen::VectorXd b = y_mean - Wt.transpose() * x_mean;
        for (Eigen::Index j = 0; j < q; ++j)
            model.intercept[static_cast<std::size_t>(j)] = b(j);
    }
    require_finite(model.weights, "solve_least_squares");
    return model;
}

/// Haar-distributed orthonormal matrix: QR of a Gaussian matrix with the
/// column signs fixed by the diagonal of R.
inline Matrix random_orthonormal(RngStream& rng, std::size_t dim) {
    if (dim < 1) throw ConfigError("random_orthonormal: dim must be >= 1");
    Matrix g = random_gaussian(rng, dim, dim, 1.0);
    Eigen::MatrixXd G = g.map();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
    Eigen::MatrixXd Q = qr.householderQ();
    Eigen::MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < Q.cols(); ++j)
        if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);
    Matrix out(dim, dim);
    out.map() = Q;
    return out;
}

} // namespace dcbm
