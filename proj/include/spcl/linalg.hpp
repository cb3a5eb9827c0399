#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "spcl/tensor.hpp"

namespace spcl::linalg {

// Dense real matrix, row-major, 64-bit floats. Entries are validated finite
// on construction; everything downstream may assume it.
class Matrix {
  public:
    Matrix() : rows_(0), cols_(0) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows_ < 1 || cols_ < 1)
            throw std::invalid_argument("Matrix: dimensions must be >= 1");
        if (data_.size() != rows_ * cols_)
            throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                        " does not equal rows*cols");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (!std::isfinite(data_[i]))
                throw std::invalid_argument("Matrix: non-finite entry at flat index " +
                                            std::to_string(i) + " (row " + std::to_string(i / cols_) +
                                            ", col " + std::to_string(i % cols_) + ")");
        }
    }

    static Matrix zeros(std::size_t rows, std::size_t cols) {
        return Matrix(rows, cols, std::vector<double>(rows * cols, 0.0));
    }
    static Matrix identity(std::size_t n) {
        Matrix m = zeros(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    Matrix transposed() const {
        Matrix t = zeros(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

  private:
    std::size_t rows_, cols_;
    std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
    Matrix out = Matrix::zeros(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return std::sqrt(s);
}

// U is M x r with orthonormal columns, sigma nonincreasing and nonnegative,
// Vt is r x N with orthonormal rows, r = min(M, N).
struct SvdFactorization {
    Matrix u;
    std::vector<double> sigma;
    Matrix vt;
};

namespace detail {

// Fill column `col` of u with a unit vector orthogonal to columns [0, col).
// Candidate directions are the standard basis vectors; the one with the
// largest residual after projection wins, ties broken by lowest index.
inline void complete_orthonormal_column(Matrix& u, std::size_t col) {
    const std::size_t m = u.rows();
    double best_norm2 = -1.0;
    std::vector<double> best_resid(m), resid(m);
    for (std::size_t cand = 0; cand < m; ++cand) {
        for (std::size_t i = 0; i < m; ++i) resid[i] = (i == cand) ? 1.0 : 0.0;
        for (std::size_t j = 0; j < col; ++j) {
            double dot = u(cand, j);
            for (std::size_t i = 0; i < m; ++i) resid[i] -= dot * u(i, j);
        }
        double n2 = std::inner_product(resid.begin(), resid.end(), resid.begin(), 0.0);
        if (n2 > best_norm2 + 1e-12) {
            best_norm2 = n2;
            best_resid = resid;
        }
    }
    // second orthogonalization pass cleans up rounding from the first
    for (std::size_t j = 0; j < col; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < m; ++i) dot += best_resid[i] * u(i, j);
        for (std::size_t i = 0; i < m; ++i) best_resid[i] -= dot * u(i, j);
    }
    double nrm = std::sqrt(std::inner_product(best_resid.begin(), best_resid.end(),
                                              best_resid.begin(), 0.0));
    for (std::size_t i = 0; i < m; ++i) u(i, col) = best_resid[i] / nrm;
}

// One-sided Jacobi on a tall matrix (rows >= cols). Returns U (m x n),
// sigma (n) and V (n x n) with A = U diag(sigma) V^T.
inline void jacobi_svd_tall(const Matrix& a, Matrix& u, std::vector<double>& sigma,
                            Matrix& v) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    constexpr double kTol = 1e-13;
    constexpr int kMaxSweeps = 60;

    Matrix w = a;
    v = Matrix::identity(n);

    // Columns whose norm collapses to rounding noise of the whole matrix are
    // numerically zero; without an absolute floor the relative rotation test
    // below never settles for rank-deficient inputs.
    double fro2 = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) fro2 += a(i, j) * a(i, j);
    const double floor2 = fro2 * 1e-30;

    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    double wp = w(i, p), wq = w(i, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if (app <= floor2 || aqq <= floor2) continue;
                if (std::abs(apq) <= kTol * std::sqrt(app * aqq)) continue;
                converged = false;
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = t * c;
                for (std::size_t i = 0; i < m; ++i) {
                    double wp = w(i, p), wq = w(i, q);
                    w(i, p) = c * wp - s * wq;
                    w(i, q) = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
    }
    if (!converged)
        throw std::runtime_error("svd: Jacobi sweeps did not converge within 60 iterations");

    sigma.assign(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double s2 = 0.0;
        for (std::size_t i = 0; i < m; ++i) s2 += w(i, j) * w(i, j);
        sigma[j] = std::sqrt(s2);
    }

    // sort singular values descending, keeping columns paired
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    Matrix ws = Matrix::zeros(m, n), vs = Matrix::zeros(n, n);
    std::vector<double> ss(n);
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t src = order[j];
        ss[j] = sigma[src];
        for (std::size_t i = 0; i < m; ++i) ws(i, j) = w(i, src);
        for (std::size_t i = 0; i < n; ++i) vs(i, j) = v(i, src);
    }
    sigma = std::move(ss);
    v = std::move(vs);

    u = Matrix::zeros(m, n);
    for (std::size_t j = 0; j < n; ++j) {
        if (sigma[j] * sigma[j] > floor2) {
            for (std::size_t i = 0; i < m; ++i) u(i, j) = ws(i, j) / sigma[j];
        } else {
            // numerically zero: normalizing rounding noise would not give an
            // orthonormal column, so build one explicitly
            sigma[j] = 0.0;
            complete_orthonormal_column(u, j);
        }
    }
}

} // namespace detail

// One-sided Jacobi SVD (threshold 1e-13 on the relative off-diagonal mass,
// at most 60 sweeps). Sign convention: in each column of U the entry of
// largest magnitude is nonnegative, ties broken by lowest row index.
inline SvdFactorization svd(const Matrix& a) {
    const bool tall = a.rows() >= a.cols();
    Matrix u_b, v_b;
    std::vector<double> sigma;
    if (tall) {
        detail::jacobi_svd_tall(a, u_b, sigma, v_b);
    } else {
        detail::jacobi_svd_tall(a.transposed(), u_b, sigma, v_b);
        std::swap(u_b, v_b); // A = (A^T)^T = V_b sigma U_b^T
    }
    const std::size_t r = sigma.size();

    for (std::size_t j = 0; j < r; ++j) {
        std::size_t imax = 0;
        double amax = -1.0;
        for (std::size_t i = 0; i < u_b.rows(); ++i) {
            double av = std::abs(u_b(i, j));
            if (av > amax) {
                amax = av;
                imax = i;
            }
        }
        if (u_b(imax, j) < 0.0) {
            for (std::size_t i = 0; i < u_b.rows(); ++i) u_b(i, j) = -u_b(i, j);
            for (std::size_t i = 0; i < v_b.rows(); ++i) v_b(i, j) = -v_b(i, j);
        }
    }

    return SvdFactorization{std::move(u_b), std::move(sigma), v_b.transposed()};
}

// u . diag(sigma) . vt
inline Matrix reconstruct(const SvdFactorization& f) {
    const std::size_t m = f.u.rows();
    const std::size_t r = f.sigma.size();
    const std::size_t n = f.vt.cols();
    if (f.u.cols() != r || f.vt.rows() != r)
        throw std::invalid_argument("reconstruct: factor shapes inconsistent with sigma length");
    Matrix out = Matrix::zeros(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < r; ++k) {
            double us = f.u(i, k) * f.sigma[k];
            if (us == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += us * f.vt(k, j);
        }
    return out;
}

// Reshape a >=2-D tensor to M x N: 2-D passes through, higher ranks fold
// dimensions 2..d into the column axis. Row-major, so the fold is a no-op on
// the flat data and the round trip is bit-exact.
inline Matrix matricize(const Tensor<double>& t) {
    if (t.ndim() < 2)
        throw std::invalid_argument("matricize: tensor must have >= 2 dimensions");
    std::size_t m = t.shape[0];
    std::size_t n = 1;
    for (std::size_t d = 1; d < t.shape.size(); ++d) n *= t.shape[d];
    return Matrix(m, n, t.data);
}

inline Tensor<double> dematricize(const Matrix& m, const std::vector<std::size_t>& shape) {
    if (m.rows() * m.cols() != Tensor<double>::numel_of(shape))
        throw std::invalid_argument("dematricize: shape does not match matrix size");
    return Tensor<double>(shape, m.data());
}

} // namespace spcl::linalg
