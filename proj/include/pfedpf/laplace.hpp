#pragma once

#include <cstddef>
#include <span>

#include "pfedpf/model.hpp"
#include "pfedpf/numerics.hpp"
#include "pfedpf/rng.hpp"

namespace pfedpf {

// Largest flattened classifier handled with a full covariance.
inline constexpr Eigen::Index kMaxPosteriorDim = 4096;

// Gaussian over the flattened classifier (weight rows, then bias).
// A posterior built with point_mass() has zero covariance and empty factors;
// sampling it returns the mean.
class GaussianPosterior {
 public:
  GaussianPosterior() = default;

  static GaussianPosterior from_precision(Vector mean, const Matrix& precision);
  static GaussianPosterior from_covariance(Vector mean, Matrix covariance);
  static GaussianPosterior point_mass(Vector mean);

  const Vector& mean() const noexcept { return mean_; }
  const Matrix& covariance() const noexcept { return covariance_; }
  const SpdFactor<double>& precision_factor() const noexcept { return precision_factor_; }
  const SpdFactor<double>& covariance_factor() const noexcept { return covariance_factor_; }
  Eigen::Index dim() const noexcept { return mean_.size(); }
  bool is_point_mass() const noexcept { return covariance_factor_.dim() == 0; }

  double log_density(const Vector& phi) const;
  Vector sample(RngStream& rng) const;
  // p x count, one draw per column.
  Matrix sample(Eigen::Index count, RngStream& rng) const;

 private:
  Vector mean_;
  Matrix covariance_;
  SpdFactor<double> precision_factor_;
  SpdFactor<double> covariance_factor_;
};

struct PriorConfig {
  double prior_precision = 1.0;
};

enum class PredictMode { monte_carlo, probit_binary };

struct PredictConfig {
  std::size_t mc_samples = 64;
  PredictMode mode = PredictMode::monte_carlo;
};

// H = sum_n J_n^T (diag(p_n) - p_n p_n^T) J_n + gamma I at the MAP classifier;
// covariance = H^{-1}. Throws DegenerateHessian when H stays non-SPD after
// one jitter retry.
GaussianPosterior fit_laplace(const Matrix& features, std::span<const int> labels,
                              const Vector& map_classifier, Eigen::Index class_count,
                              const PriorConfig& prior);

// The generalized Gauss-Newton matrix above, without inversion.
Matrix laplace_precision(const Matrix& features, std::span<const int> labels,
                         const Vector& map_classifier, Eigen::Index class_count,
                         double prior_precision);

// Mean softmax over classifier samples (columns of `samples`).
Vector mc_predict(const Matrix& samples, const Vector& features, Eigen::Index class_count);
// Row i is the predictive for feature row i.
Matrix mc_predict(const Matrix& samples, const Matrix& features, Eigen::Index class_count);
Vector mc_predict(const GaussianPosterior& post, const Vector& features, Eigen::Index class_count,
                  std::size_t samples, RngStream& rng);

// sigma(f / sqrt(1 + pi/8 * S)) for the binary margin f = logit_1 - logit_0.
double probit_predict_binary(const GaussianPosterior& post, const Linearization& lin);
double probit_predict_binary(double margin, double margin_variance);

// Regularized negative log posterior of the linear classifier at fixed
// features: sum_n CE + gamma/2 |phi|^2.
double classifier_neg_log_posterior(const Matrix& features, std::span<const int> labels,
                                    const Vector& phi, Eigen::Index class_count,
                                    double prior_precision);

}  // namespace pfedpf
