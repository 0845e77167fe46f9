#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "pfedpf/errors.hpp"
#include "pfedpf/rng.hpp"

namespace pfedpf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Lower Cholesky factor of an SPD matrix.
template <typename Scalar>
class SpdFactor {
 public:
  SpdFactor() = default;
  explicit SpdFactor(MatrixX<Scalar> lower) : lower_(std::move(lower)) {}

  const MatrixX<Scalar>& lower() const noexcept { return lower_; }
  Eigen::Index dim() const noexcept { return lower_.rows(); }

  // log det(L L^T)
  Scalar log_det() const { return Scalar(2) * lower_.diagonal().array().log().sum(); }

  // (L L^T)^{-1} b
  template <typename Derived>
  VectorX<Scalar> solve(const Eigen::MatrixBase<Derived>& b) const {
    VectorX<Scalar> y = lower_.template triangularView<Eigen::Lower>().solve(b);
    return lower_.transpose().template triangularView<Eigen::Upper>().solve(y);
  }

  MatrixX<Scalar> inverse() const {
    const auto n = dim();
    MatrixX<Scalar> inv = MatrixX<Scalar>::Identity(n, n);
    lower_.template triangularView<Eigen::Lower>().solveInPlace(inv);
    lower_.transpose().template triangularView<Eigen::Upper>().solveInPlace(inv);
    return Scalar(0.5) * (inv + inv.transpose());
  }

  MatrixX<Scalar> reconstruct() const { return lower_ * lower_.transpose(); }

 private:
  MatrixX<Scalar> lower_;
};

// Column-oriented Cholesky-Crout. Throws NotPositiveDefinite on a pivot
// below 1e-300.
template <typename Derived>
SpdFactor<typename Derived::Scalar> cholesky(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  if (a.rows() != a.cols()) throw DimensionMismatch("cholesky: matrix is not square");
  const Eigen::Index n = a.rows();
  MatrixX<Scalar> lower = MatrixX<Scalar>::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Scalar pivot = a(j, j);
    if (j > 0) pivot -= lower.row(j).head(j).squaredNorm();
    if (!(pivot > Scalar(1e-300))) {
      throw NotPositiveDefinite("cholesky: non-positive pivot " + std::to_string(double(pivot)) +
                                " at column " + std::to_string(j));
    }
    const Scalar diag = std::sqrt(pivot);
    lower(j, j) = diag;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      Scalar s = a(i, j);
      if (j > 0) s -= lower.row(i).head(j).dot(lower.row(j).head(j));
      lower(i, j) = s / diag;
    }
  }
  return SpdFactor<Scalar>(std::move(lower));
}

// Cholesky with a single +1e-8 I retry before giving up.
template <typename Derived>
SpdFactor<typename Derived::Scalar> cholesky_with_jitter(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  try {
    return cholesky(a);
  } catch (const NotPositiveDefinite&) {
    MatrixX<Scalar> jittered = a;
    jittered.diagonal().array() += Scalar(1e-8);
    return cholesky(jittered);
  }
}

// mean + L z, z ~ N(0, I). An empty (0x0) factor stands for zero covariance.
template <typename Scalar>
VectorX<Scalar> sample_mvn(const VectorX<Scalar>& mean, const SpdFactor<Scalar>& factor,
                           RngStream& rng) {
  if (factor.dim() == 0) return mean;
  if (factor.dim() != mean.size()) throw DimensionMismatch("sample_mvn: mean/factor size");
  VectorX<Scalar> z(mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = Scalar(rng.normal());
  return mean + factor.lower().template triangularView<Eigen::Lower>() * z;
}

// Same, writing a batch of draws into the columns of `out`.
template <typename Scalar>
MatrixX<Scalar> sample_mvn(const VectorX<Scalar>& mean, const SpdFactor<Scalar>& factor,
                           Eigen::Index count, RngStream& rng) {
  MatrixX<Scalar> out(mean.size(), count);
  for (Eigen::Index c = 0; c < count; ++c) out.col(c) = sample_mvn(mean, factor, rng);
  return out;
}

// Gaussian log density from a precomputed covariance factor.
template <typename Scalar, typename Derived>
Scalar mvn_log_density(const Eigen::MatrixBase<Derived>& x, const VectorX<Scalar>& mean,
                       const SpdFactor<Scalar>& cov_factor) {
  const VectorX<Scalar> diff = x - mean;
  const VectorX<Scalar> w = cov_factor.lower().template triangularView<Eigen::Lower>().solve(diff);
  const Scalar n = Scalar(mean.size());
  return Scalar(-0.5) * (w.squaredNorm() + cov_factor.log_det() +
                         n * std::log(Scalar(2) * Scalar(3.14159265358979323846)));
}

struct SpectralSummary {
  double min_eigenvalue = std::numeric_limits<double>::quiet_NaN();
  double min_singular = 0.0;
  double max_singular = 0.0;

  bool has_eigenvalue() const noexcept { return !std::isnan(min_eigenvalue); }
};

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
template <typename Derived>
VectorX<typename Derived::Scalar> jacobi_eigenvalues(const Eigen::MatrixBase<Derived>& sym,
                                                     double tolerance = 1e-12,
                                                     int max_sweeps = 100) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> a = sym;
  const Eigen::Index n = a.rows();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    Scalar off = 0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    const Scalar scale = a.diagonal().squaredNorm() + Scalar(2) * off;
    if (off <= Scalar(tolerance * tolerance) * scale || off == Scalar(0)) break;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= 0 ? Scalar(1) : Scalar(-1)) /
                         (std::abs(theta) + std::sqrt(theta * theta + Scalar(1)));
        const Scalar c = Scalar(1) / std::sqrt(t * t + Scalar(1));
        const Scalar s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar akp = a(k, p);
          const Scalar akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar apk = a(p, k);
          const Scalar aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  return a.diagonal();
}

// Singular values come from the smaller Gram matrix, so a rectangular input
// reports min(rows, cols) of them. min_eigenvalue is NaN unless the input is
// square and symmetric.
template <typename Derived>
SpectralSummary spectral_summary(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  SpectralSummary out;
  if (a.size() == 0) return out;
  const MatrixX<Scalar> gram = a.rows() >= a.cols() ? MatrixX<Scalar>(a.transpose() * a)
                                                    : MatrixX<Scalar>(a * a.transpose());
  const VectorX<Scalar> ev = jacobi_eigenvalues(gram);
  out.min_singular = std::sqrt(std::max(double(ev.minCoeff()), 0.0));
  out.max_singular = std::sqrt(std::max(double(ev.maxCoeff()), 0.0));
  if (a.rows() == a.cols()) {
    const MatrixX<Scalar> dense = a;
    const Scalar asym = (dense - dense.transpose()).cwiseAbs().maxCoeff();
    const Scalar mag = std::max(Scalar(1), dense.cwiseAbs().maxCoeff());
    if (asym <= Scalar(1e-12) * mag) {
      out.min_eigenvalue = double(jacobi_eigenvalues(dense).minCoeff());
    }
  }
  return out;
}

template <typename Derived>
typename Derived::Scalar logsumexp(const Eigen::MatrixBase<Derived>& v) {
  const auto shift = v.maxCoeff();
  return shift + std::log((v.array() - shift).exp().sum());
}

template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Scalar shift = logits.maxCoeff();
  VectorX<Scalar> p = (logits.array() - shift).exp().matrix();
  return p / p.sum();
}

// Row-wise softmax of an n x k logit matrix.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Scalar shift = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - shift).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 30.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double softplus_inverse(double y) { return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y)); }

inline double relative_frobenius_error(const Matrix& actual, const Matrix& expected) {
  const double denom = expected.norm();
  return denom == 0.0 ? actual.norm() : (actual - expected).norm() / denom;
}

// Symmetrize in place: (A + A^T) / 2.
template <typename Derived>
void symmetrize(Eigen::MatrixBase<Derived>& a) {
  a = (0.5 * (a + a.transpose())).eval();
}

}  // namespace pfedpf
