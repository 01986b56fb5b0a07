#pragma once

// Small dense linear algebra used throughout: symmetric inverses with a
// Moore-Penrose fallback, PSD clipping and index-set gather/scatter.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "mvperm/errors.hpp"

namespace mvperm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;
using IndexList = std::vector<Index>;

/// Pseudoinverse is used when lambda_min < kSingularRatio * lambda_max.
inline constexpr double kSingularRatio = 1e-10;
/// Eigenvalues down to -kPsdTolerance * max(1, lambda_max) count as zero.
inline constexpr double kPsdTolerance = 1e-10;

struct SymmetricInverse {
  Matrix value;
  /// log determinant; the log pseudo-determinant when `pseudo` is set.
  double log_det = 0.0;
  bool pseudo = false;
};

namespace detail {

inline SymmetricInverse inverse_from_eigen(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  const Vector& lambda = es.eigenvalues();
  const double lmax = lambda.cwiseAbs().maxCoeff();
  if (lambda.minCoeff() < -kPsdTolerance * std::max(1.0, lmax)) {
    throw DataError("matrix is not positive semidefinite");
  }
  const double cutoff = kSingularRatio * lmax;
  SymmetricInverse out;
  out.pseudo = !(lmax > 0.0) || lambda.minCoeff() < cutoff;
  Vector inv_lambda = Vector::Zero(lambda.size());
  for (Index j = 0; j < lambda.size(); ++j) {
    if (lambda(j) > cutoff && lambda(j) > 0.0) {
      inv_lambda(j) = 1.0 / lambda(j);
      out.log_det += std::log(lambda(j));
    }
  }
  out.value = es.eigenvectors() * inv_lambda.asDiagonal() * es.eigenvectors().transpose();
  return out;
}

}  // namespace detail

/// Inverse of a symmetric PSD matrix. Falls back to the Moore-Penrose
/// pseudoinverse when the eigenvalue ratio drops below kSingularRatio.
inline SymmetricInverse symmetric_inverse(const Matrix& a) {
  const Index n = a.rows();
  if (n == 1) {
    const double v = a(0, 0);
    if (v < -kPsdTolerance * std::max(1.0, std::abs(v))) {
      throw DataError("matrix is not positive semidefinite");
    }
    SymmetricInverse out;
    if (v > 0.0) {
      out.value = Matrix::Constant(1, 1, 1.0 / v);
      out.log_det = std::log(v);
    } else {
      out.value = Matrix::Zero(1, 1);
      out.pseudo = true;
    }
    return out;
  }
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() == Eigen::Success) {
    Matrix inv = llt.solve(Matrix::Identity(n, n));
    // 1 / (|A|_F |A^-1|_F) is a lower bound on lambda_min / lambda_max.
    const double ratio_bound = 1.0 / (a.norm() * inv.norm());
    if (std::isfinite(ratio_bound) && ratio_bound >= kSingularRatio) {
      SymmetricInverse out;
      out.value = std::move(inv);
      const auto& lower = llt.matrixLLT();
      for (Index j = 0; j < n; ++j) out.log_det += 2.0 * std::log(lower(j, j));
      return out;
    }
  }
  return detail::inverse_from_eigen(a);
}

/// Clips negative eigenvalues of a symmetric matrix to zero. Returns the
/// input unchanged (bitwise) when it is already PSD.
inline std::pair<Matrix, bool> clip_psd(const Matrix& a) {
  if (a.rows() == 0) return {a, false};
  if (a.rows() == 1) {
    if (a(0, 0) < 0.0) return {Matrix::Zero(1, 1), true};
    return {a, false};
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  if (es.eigenvalues().minCoeff() >= 0.0) return {a, false};
  const Vector clipped = es.eigenvalues().cwiseMax(0.0);
  Matrix out = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
  out = 0.5 * (out + out.transpose()).eval();
  return {std::move(out), true};
}

inline bool is_psd(const Matrix& a, double tol = kPsdTolerance) {
  if (a.rows() == 0) return true;
  Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
  const double lmax = es.eigenvalues().cwiseAbs().maxCoeff();
  return es.eigenvalues().minCoeff() >= -tol * std::max(1.0, lmax);
}

inline Vector gather(const Vector& full, const IndexList& idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (std::size_t a = 0; a < idx.size(); ++a) out(static_cast<Index>(a)) = full(idx[a]);
  return out;
}

inline Matrix gather(const Matrix& full, const IndexList& idx) {
  const auto n = static_cast<Index>(idx.size());
  Matrix out(n, n);
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < n; ++b) out(a, b) = full(idx[a], idx[b]);
  return out;
}

inline void scatter_add(Vector& full, const Vector& block, const IndexList& idx) {
  for (std::size_t a = 0; a < idx.size(); ++a) full(idx[a]) += block(static_cast<Index>(a));
}

inline void scatter_add(Matrix& full, const Matrix& block, const IndexList& idx) {
  const auto n = static_cast<Index>(idx.size());
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < n; ++b) full(idx[a], idx[b]) += block(a, b);
}

}  // namespace mvperm
