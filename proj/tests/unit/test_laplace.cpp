#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "pfedpf/laplace.hpp"
#include "test_support.hpp"

using namespace pfedpf;
using pfedpf::testing::numeric_hessian;
using pfedpf::testing::random_matrix;
using pfedpf::testing::random_spd;
using pfedpf::testing::random_vector;

TEST(FitLaplace, NoDataGivesPriorCovariance) {
  const Matrix feats(0, 3);
  const std::vector<int> labels;
  const auto post = fit_laplace(feats, labels, Vector::Ones(8), 2, {4.0});
  EXPECT_EQ(post.covariance(), Matrix(Matrix::Identity(8, 8) * 0.25));
  EXPECT_EQ(post.mean(), Vector::Ones(8));
}

TEST(FitLaplace, OneDimensionalLogisticMatchesNumericHessian) {
  const Matrix feats = (Matrix(3, 1) << -1.0, 0.5, 2.0).finished();
  const std::vector<int> labels{0, 1, 1};
  const Vector phi = (Vector(4) << -0.3, 0.8, 0.1, -0.2).finished();
  const double gamma = 0.7;
  const Matrix h = laplace_precision(feats, labels, phi, 2, gamma);
  const Matrix numeric = numeric_hessian(
      [&](const Vector& v) { return classifier_neg_log_posterior(feats, labels, v, 2, gamma); }, phi);
  EXPECT_LT(relative_frobenius_error(h, numeric), 1e-6);
}

TEST(FitLaplace, CovarianceIsInverseNumericHessianUpToP20) {
  RngStream rng(14, 2);
  for (const auto& [d, k] : std::vector<std::pair<int, int>>{{1, 2}, {3, 2}, {2, 3}, {4, 4}}) {
    const Matrix feats = random_matrix(30, d, rng);
    std::vector<int> labels;
    for (int i = 0; i < 30; ++i) labels.push_back(int(rng.below(std::uint64_t(k))));
    const Vector phi = random_vector(k * d + k, rng, 0.5);
    const auto post = fit_laplace(feats, labels, phi, k, {1.0});
    const Matrix numeric = numeric_hessian(
        [&](const Vector& v) { return classifier_neg_log_posterior(feats, labels, v, k, 1.0); }, phi);
    EXPECT_LT(relative_frobenius_error(post.covariance(), Matrix(numeric.inverse())), 1e-6) << d << "x" << k;
  }
}

TEST(FitLaplace, LargerPriorShrinksEveryEigenvalue) {
  RngStream rng(3, 1);
  const Matrix feats = random_matrix(20, 2, rng);
  std::vector<int> labels(20);
  for (int i = 0; i < 20; ++i) labels[i] = i % 2;
  const Vector phi = random_vector(6, rng);
  Eigen::SelfAdjointEigenSolver<Matrix> a(fit_laplace(feats, labels, phi, 2, {1.0}).covariance());
  Eigen::SelfAdjointEigenSolver<Matrix> b(fit_laplace(feats, labels, phi, 2, {2.0}).covariance());
  for (Eigen::Index i = 0; i < 6; ++i) EXPECT_LT(b.eigenvalues()(i), a.eigenvalues()(i));
}

TEST(FitLaplace, RejectsBadInputs) {
  const Matrix feats = Matrix::Ones(2, 2);
  const std::vector<int> labels{0, 1};
  EXPECT_THROW(fit_laplace(feats, labels, Vector::Zero(5), 2, {1.0}), DimensionMismatch);
  EXPECT_THROW(fit_laplace(feats, labels, Vector::Zero(6), 2, {0.0}), Error);
  const std::vector<int> short_labels{0};
  EXPECT_THROW(fit_laplace(feats, short_labels, Vector::Zero(6), 2, {1.0}), DimensionMismatch);
}

TEST(Posterior, PrecisionAndCovarianceAgree) {
  RngStream rng(1, 7);
  const Matrix prec = random_spd(5, rng);
  const Vector mean = random_vector(5, rng);
  const auto a = GaussianPosterior::from_precision(mean, prec);
  const auto b = GaussianPosterior::from_covariance(mean, prec.inverse());
  EXPECT_LT(relative_frobenius_error(a.covariance(), b.covariance()), 1e-12);
  const Vector x = random_vector(5, rng);
  EXPECT_NEAR(a.log_density(x), b.log_density(x), 1e-9);
}

TEST(Posterior, PointMassSamplesMean) {
  RngStream rng(0, 0);
  const auto post = GaussianPosterior::point_mass(Vector::Ones(3));
  EXPECT_TRUE(post.is_point_mass());
  EXPECT_EQ(post.sample(rng), Vector::Ones(3));
  EXPECT_THROW(post.log_density(Vector::Ones(3)), Error);
}

TEST(McPredict, PointMassEqualsSoftmax) {
  RngStream rng(2, 2);
  const Vector phi = random_vector(6, rng);
  const Vector z = random_vector(2, rng);
  const auto post = GaussianPosterior::point_mass(phi);
  const Vector p = mc_predict(post, z, 2, 16, rng);
  const DenseLayer c = unflatten_classifier(phi, 2, 2);
  EXPECT_LT((p - softmax(Vector(c.weight * z + c.bias))).norm(), 1e-15);
}

TEST(McPredict, SymmetricPosteriorIsHalfHalf) {
  RngStream rng(5, 5);
  const auto post = GaussianPosterior::from_covariance(Vector::Zero(6), Matrix::Identity(6, 6));
  const std::size_t m = 20000;
  const Vector p = mc_predict(post, (Vector(2) << 1.0, -0.5).finished(), 2, m, rng);
  // Per-sample softmax has std <= 0.5.
  EXPECT_NEAR(p(0), 0.5, 3 * 0.5 / std::sqrt(double(m)));
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
}

TEST(McPredict, SelfConsistentAcrossSampleCounts) {
  Matrix cov = Matrix::Identity(9, 9) * 0.5;
  const Vector mean = Vector::LinSpaced(9, -1, 1);
  const auto post = GaussianPosterior::from_covariance(mean, cov);
  const Vector z = (Vector(2) << 0.7, -1.2).finished();
  RngStream a(1, 1), b(1, 2);
  const Vector p4 = mc_predict(post, z, 3, 10000, a);
  const Vector p5 = mc_predict(post, z, 3, 100000, b);
  EXPECT_LT(0.5 * (p4 - p5).cwiseAbs().sum(), 0.01);
}

TEST(McPredict, RowsAreDistributions) {
  RngStream rng(8, 8);
  const Matrix samples = random_matrix(12, 40, rng, 30.0);
  const Matrix feats = random_matrix(25, 3, rng, 10.0);
  const Matrix p = mc_predict(samples, feats, 3);
  EXPECT_GE(p.minCoeff(), 0.0);
  for (Eigen::Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
  EXPECT_LT((p.row(4).transpose() - mc_predict(samples, Vector(feats.row(4).transpose()), 3)).norm(), 1e-15);
}

TEST(Probit, Cases) {
  EXPECT_DOUBLE_EQ(probit_predict_binary(1.3, 0.0), sigmoid(1.3));
  EXPECT_DOUBLE_EQ(probit_predict_binary(0.0, 17.0), 0.5);
  EXPECT_NEAR(probit_predict_binary(2.0, 8.0 / std::numbers::pi), sigmoid(std::sqrt(2.0)), 1e-15);
  EXPECT_NEAR(probit_predict_binary(2.0, 8.0 / std::numbers::pi), 0.8044, 5e-5);
}

TEST(Probit, MonotoneInVarianceAndTendsToHalf) {
  double prev = 1.0;
  for (double s = 0.0; s < 1e6; s = s * 4 + 0.1) {
    const double p = probit_predict_binary(1.5, s);
    EXPECT_LT(p, prev);
    prev = p;
  }
  EXPECT_NEAR(probit_predict_binary(1.5, 1e12), 0.5, 1e-5);
}

TEST(Probit, PosteriorFormUsesReducedMargin) {
  RngStream rng(4, 4);
  const Matrix cov = random_spd(6, rng);
  const Vector mean = random_vector(6, rng);
  const auto post = GaussianPosterior::from_covariance(mean, cov);
  MlpParams params;
  params.classifier = unflatten_classifier(mean, 2, 2);
  const Vector x = (Vector(2) << 0.4, -1.1).finished();
  const Linearization lin = linearize_classifier(params, x);
  const Eigen::RowVectorXd j = lin.jacobian.row(1) - lin.jacobian.row(0);
  const double f = lin.logits_at_mean(1) - lin.logits_at_mean(0);
  const double s = j * cov * j.transpose();
  EXPECT_NEAR(probit_predict_binary(post, lin), sigmoid(f / std::sqrt(1 + std::numbers::pi / 8 * s)), 1e-14);
}
