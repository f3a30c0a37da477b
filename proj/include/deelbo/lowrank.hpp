#pragma once

#include <algorithm>
#include <cmath>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "deelbo/errors.hpp"
#include "deelbo/types.hpp"

namespace deelbo {

/// Low-rank-plus-diagonal covariance
///
///   Sigma = 1/2 * diag + 1/(2K-2) * dev * dev^T,   dev in R^{DxK}, K >= 2,
///
/// with inverse-metric quantities evaluated through the Woodbury identity.
/// Writing Adiag = 1/2 * diag and B = dev / sqrt(2K-2), the capacitance
/// matrix is M = I_K + B^T Adiag^{-1} B and
///
///   Sigma^{-1}      = Adiag^{-1} - Adiag^{-1} B M^{-1} B^T Adiag^{-1}
///   tr(Sigma^{-1})  = sum(1/a_i) - tr(M^{-1} B^T Adiag^{-2} B)
///   logdet(Sigma)   = logdet(M) + sum(log a_i),
///
/// so nothing DxD is ever formed. The trace of the inverse and the log
/// determinant are cached at construction; quadratic forms are evaluated
/// per call with matrix-vector products only.
template <typename Scalar>
class LowRankCov {
 public:
  using Vector = VectorX<Scalar>;
  using Matrix = MatrixX<Scalar>;

  /// `diag` holds the raw diagonal second moments (before the 1/2 factor);
  /// `deviations` holds the K deviation columns.
  LowRankCov(Vector diag, Matrix deviations)
      : diag_(std::move(diag)), deviations_(std::move(deviations)) {
    const Eigen::Index dim = diag_.size();
    const Eigen::Index rank = deviations_.cols();
    if (deviations_.rows() != dim)
      throw ShapeError("LowRankCov: deviation rows must match diag length");
    if (rank < 2)
      throw InvalidCovariance("LowRankCov: rank must be >= 2");
    if (!diag_.allFinite() || (diag_.array() <= Scalar(0)).any())
      throw InvalidCovariance("LowRankCov: diag entries must be finite and > 0");
    if (!deviations_.allFinite())
      throw InvalidCovariance("LowRankCov: deviations must be finite");

    a_inv_ = (Scalar(2) / diag_.array()).matrix();
    scaled_dev_ = deviations_ / std::sqrt(Scalar(2) * Scalar(rank) - Scalar(2));

    Matrix cap = Matrix::Identity(rank, rank);
    cap.noalias() += scaled_dev_.transpose() * a_inv_.asDiagonal() * scaled_dev_;
    cap_llt_.compute(cap);
    if (cap_llt_.info() != Eigen::Success)
      throw NumericalError("LowRankCov: capacitance factorization failed");

    trace_inv_ = compute_trace_inverse();
    logdet_ = compute_logdet();
  }

  Eigen::Index dim() const { return diag_.size(); }
  Eigen::Index rank() const { return deviations_.cols(); }
  const Vector& diag() const { return diag_; }
  const Matrix& deviations() const { return deviations_; }

  Scalar trace_inverse() const { return trace_inv_; }
  Scalar logdet() const { return logdet_; }

  /// delta^T Sigma^{-1} delta, evaluated right-to-left.
  template <typename Derived>
  Scalar mahalanobis_sq(const Eigen::MatrixBase<Derived>& delta) const {
    if (delta.size() != dim() || delta.cols() != 1)
      throw ShapeError("LowRankCov::mahalanobis_sq: delta has wrong shape");
    const Vector t = a_inv_.cwiseProduct(delta.derived());
    const Vector y = scaled_dev_.transpose() * t;
    const Scalar m = delta.derived().dot(t) - y.dot(cap_llt_.solve(y));
    return std::max(m, Scalar(0));
  }

  /// Sigma^{-1} * rhs.
  template <typename Derived>
  Vector solve(const Eigen::MatrixBase<Derived>& rhs) const {
    if (rhs.size() != dim() || rhs.cols() != 1)
      throw ShapeError("LowRankCov::solve: rhs has wrong shape");
    const Vector t = a_inv_.cwiseProduct(rhs.derived());
    const Vector y = scaled_dev_.transpose() * t;
    return t - a_inv_.cwiseProduct(scaled_dev_ * cap_llt_.solve(y));
  }

  /// Fresh recomputations; the cached values equal these bit-for-bit.
  Scalar compute_trace_inverse() const {
    const Eigen::Index rank = deviations_.cols();
    const Matrix w = a_inv_.asDiagonal() * scaled_dev_;  // Adiag^{-1} B
    Matrix gram(rank, rank);
    gram.noalias() = w.transpose() * w;  // B^T Adiag^{-2} B
    return a_inv_.sum() - cap_llt_.solve(gram).trace();
  }

  Scalar compute_logdet() const {
    const Scalar cap_logdet =
        Scalar(2) * cap_llt_.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return cap_logdet + (Scalar(0.5) * diag_.array()).log().sum();
  }

 private:
  Vector diag_;
  Matrix deviations_;
  Vector a_inv_;       // inverse of the diagonal Woodbury block
  Matrix scaled_dev_;  // deviations / sqrt(2K-2)
  Eigen::LLT<Matrix> cap_llt_;
  Scalar trace_inv_ = Scalar(0);
  Scalar logdet_ = Scalar(0);
};

template <typename Scalar>
Scalar trace_inverse(const LowRankCov<Scalar>& cov) {
  return cov.trace_inverse();
}

template <typename Scalar, typename Derived>
Scalar mahalanobis_sq(const LowRankCov<Scalar>& cov,
                      const Eigen::MatrixBase<Derived>& delta) {
  return cov.mahalanobis_sq(delta);
}

template <typename Scalar>
Scalar logdet(const LowRankCov<Scalar>& cov) {
  return cov.logdet();
}

}  // namespace deelbo
