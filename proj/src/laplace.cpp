#include "pfedpf/laplace.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "pfedpf/errors.hpp"

namespace pfedpf {

GaussianPosterior GaussianPosterior::from_precision(Vector mean, const Matrix& precision) {
  if (precision.rows() != mean.size() || precision.cols() != mean.size())
    throw DimensionMismatch("posterior: precision shape does not match mean");
  GaussianPosterior post;
  post.mean_ = std::move(mean);
  try {
    post.precision_factor_ = cholesky_with_jitter(precision);
    post.covariance_ = post.precision_factor_.inverse();
    post.covariance_factor_ = cholesky_with_jitter(post.covariance_);
  } catch (const NotPositiveDefinite& e) {
    throw DegenerateHessian(std::string("posterior precision is not SPD: ") + e.what());
  }
  return post;
}

GaussianPosterior GaussianPosterior::from_covariance(Vector mean, Matrix covariance) {
  if (covariance.rows() != mean.size() || covariance.cols() != mean.size())
    throw DimensionMismatch("posterior: covariance shape does not match mean");
  GaussianPosterior post;
  post.mean_ = std::move(mean);
  symmetrize(covariance);
  post.covariance_ = std::move(covariance);
  try {
    post.covariance_factor_ = cholesky_with_jitter(post.covariance_);
    post.precision_factor_ = cholesky_with_jitter(post.covariance_factor_.inverse());
  } catch (const NotPositiveDefinite& e) {
    throw DegenerateHessian(std::string("posterior covariance is not SPD: ") + e.what());
  }
  return post;
}

GaussianPosterior GaussianPosterior::point_mass(Vector mean) {
  GaussianPosterior post;
  post.covariance_ = Matrix::Zero(mean.size(), mean.size());
  post.mean_ = std::move(mean);
  return post;
}

double GaussianPosterior::log_density(const Vector& phi) const {
  if (is_point_mass()) throw Error("log_density of a point-mass posterior");
  return mvn_log_density(phi, mean_, covariance_factor_);
}

Vector GaussianPosterior::sample(RngStream& rng) const {
  return sample_mvn(mean_, covariance_factor_, rng);
}

Matrix GaussianPosterior::sample(Eigen::Index count, RngStream& rng) const {
  return sample_mvn(mean_, covariance_factor_, count, rng);
}

Matrix laplace_precision(const Matrix& feats, std::span<const int> labels, const Vector& map_classifier,
                         Eigen::Index class_count, double prior_precision) {
  const Eigen::Index k = class_count;
  const Eigen::Index d = feats.cols();
  const Eigen::Index p = k * d + k;
  if (map_classifier.size() != p) throw DimensionMismatch("fit_laplace: classifier length");
  if (static_cast<Eigen::Index>(labels.size()) != feats.rows())
    throw DimensionMismatch("fit_laplace: labels/features count");
  Matrix h = prior_precision * Matrix::Identity(p, p);
  if (feats.rows() == 0) return h;

  const DenseLayer cls = unflatten_classifier(map_classifier, k, d);
  const Matrix probs = softmax_rows(classifier_logits(cls, feats));
  Matrix augmented(feats.rows(), d + 1);
  augmented.leftCols(d) = feats;
  augmented.col(d).setOnes();

  // Block (i, j) of the GGN is Z~^T diag(Lambda_ij) Z~ with Z~ = [Z, 1].
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i; j < k; ++j) {
      Vector lambda = -probs.col(i).cwiseProduct(probs.col(j));
      if (i == j) lambda += probs.col(i);
      const Matrix block = augmented.transpose() * lambda.asDiagonal() * augmented;
      for (Eigen::Index a = 0; a <= d; ++a) {
        const Eigen::Index row = a < d ? i * d + a : k * d + i;
        for (Eigen::Index b = 0; b <= d; ++b) {
          const Eigen::Index col = b < d ? j * d + b : k * d + j;
          h(row, col) += block(a, b);
          if (i != j) h(col, row) += block(a, b);
        }
      }
    }
  }
  symmetrize(h);
  return h;
}

GaussianPosterior fit_laplace(const Matrix& feats, std::span<const int> labels,
                              const Vector& map_classifier, Eigen::Index class_count,
                              const PriorConfig& prior) {
  if (!(prior.prior_precision > 0.0)) throw Error("fit_laplace: prior precision must be > 0");
  if (map_classifier.size() > kMaxPosteriorDim) {
    throw Error("fit_laplace: classifier dimension " + std::to_string(map_classifier.size()) +
                " exceeds the full-covariance cap of " + std::to_string(kMaxPosteriorDim));
  }
  const Matrix h = laplace_precision(feats, labels, map_classifier, class_count, prior.prior_precision);
  if (feats.rows() == 0) {
    // Prior only: covariance is exactly I / gamma.
    return GaussianPosterior::from_covariance(
        map_classifier, Matrix::Identity(h.rows(), h.cols()) / prior.prior_precision);
  }
  return GaussianPosterior::from_precision(map_classifier, h);
}

Matrix mc_predict(const Matrix& samples, const Matrix& feats, Eigen::Index class_count) {
  const Eigen::Index d = feats.cols();
  Matrix mean = Matrix::Zero(feats.rows(), class_count);
  for (Eigen::Index s = 0; s < samples.cols(); ++s) {
    const DenseLayer cls = unflatten_classifier(samples.col(s), class_count, d);
    mean += softmax_rows(classifier_logits(cls, feats));
  }
  mean /= static_cast<double>(samples.cols());
  // Renormalize rows so accumulated rounding never leaves the simplex.
  for (Eigen::Index i = 0; i < mean.rows(); ++i) mean.row(i) /= mean.row(i).sum();
  return mean;
}

Vector mc_predict(const Matrix& samples, const Vector& feats, Eigen::Index class_count) {
  return mc_predict(samples, Matrix(feats.transpose()), class_count).row(0).transpose();
}

Vector mc_predict(const GaussianPosterior& post, const Vector& feats, Eigen::Index class_count,
                  std::size_t samples, RngStream& rng) {
  if (samples < 1) throw Error("mc_predict: need at least one sample");
  return mc_predict(post.sample(static_cast<Eigen::Index>(samples), rng), feats, class_count);
}

double probit_predict_binary(double margin, double margin_variance) {
  return sigmoid(margin / std::sqrt(1.0 + std::numbers::pi / 8.0 * margin_variance));
}

double probit_predict_binary(const GaussianPosterior& post, const Linearization& lin) {
  if (lin.logits_at_mean.size() != 2) throw DimensionMismatch("probit: binary classifier required");
  const double margin = lin.logits_at_mean(1) - lin.logits_at_mean(0);
  const Vector j = (lin.jacobian.row(1) - lin.jacobian.row(0)).transpose();
  const double s = j.dot(post.covariance() * j);
  return probit_predict_binary(margin, s);
}

double classifier_neg_log_posterior(const Matrix& feats, std::span<const int> labels,
                                    const Vector& phi, Eigen::Index class_count,
                                    double prior_precision) {
  const DenseLayer cls = unflatten_classifier(phi, class_count, feats.cols());
  const Matrix out = classifier_logits(cls, feats);
  double nll = 0.0;
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    nll += logsumexp(out.row(i).transpose()) - out(i, labels[static_cast<std::size_t>(i)]);
  return nll + 0.5 * prior_precision * phi.squaredNorm();
}

}  // namespace pfedpf
