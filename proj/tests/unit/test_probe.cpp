#include <gtest/gtest.h>

#include <vector>

#include "pfedpf/laplace.hpp"
#include "pfedpf/probe.hpp"
#include "test_support.hpp"

using namespace pfedpf;
using namespace pfedpf::testing;

namespace {

struct Toy {
  MlpParams params;
  GaussianPosterior post;
};

Toy trained_toy() {
  RngStream rng(1, 1);
  const Dataset data = gen_blobs(2, 60, 2, 0.5, rng);
  MlpParams p = init_mlp(2, {16, 16}, 2, rng);
  SgdConfig sgd;
  sgd.learning_rate = 0.05;
  sgd.batch_size = 32;
  sgd.local_epochs = 100;
  p = train_local(p, data, sgd, rng);
  auto post = fit_laplace(features(p, data.inputs), data.labels, flatten_classifier(p.classifier), 2, {1.0});
  return {std::move(p), std::move(post)};
}

}  // namespace

TEST(FeatureJacobian, MatchesFiniteDifferences) {
  RngStream rng(2, 2);
  const MlpParams p = init_mlp(3, {9, 5}, 2, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const Vector x = random_vector(3, rng);
    const Matrix jac = feature_jacobian(p, x);
    ASSERT_EQ(jac.rows(), 5);
    ASSERT_EQ(jac.cols(), 3);
    for (Eigen::Index r = 0; r < 5; ++r) {
      const Vector g = numeric_gradient(
          [&](const Vector& v) { return features(p, v.transpose())(0, r); }, x, 1e-7);
      EXPECT_LT((jac.row(r).transpose() - g).norm(), 1e-6) << trial;
    }
  }
}

TEST(FlowSpectralMax, IdentityIsExactlyOne) {
  RngStream rng(3, 3);
  const auto post = GaussianPosterior::from_covariance(Vector::Zero(4), Matrix::Identity(4, 4));
  EXPECT_EQ(flow_spectral_max(identity_stack(5, post.mean()), post, 10, rng), 1.0);
  EXPECT_EQ(flow_spectral_max(FlowStack{}, post, 10, rng), 1.0);
  EXPECT_GT(flow_spectral_max(random_stack(3, 4, rng), post, 10, rng), 0.0);
}

TEST(Probe, IdentityFlowColumnReproducesLaplaceAndCapsAgree) {
  const Toy toy = trained_toy();
  const FlowStack identity = identity_stack(10, toy.post.mean());
  const std::vector<double> deltas{1e2, 1e3, 1e4};
  ProbeOptions options;
  options.mc_samples = 256;
  const RngStream stream(9, 9);
  const Vector dir = (Vector(2) << 0.6, -0.8).finished();
  const ProbeDirection r = asymptotic_confidence_probe(toy.params, toy.post, &identity, 1.0, dir, deltas,
                                                       options, stream);
  ASSERT_EQ(r.laplace.size(), 3u);
  EXPECT_EQ(r.identity_flow, r.laplace);
  EXPECT_EQ(r.flow, r.laplace);
  EXPECT_EQ(r.flow_cap, r.laplace_cap);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_GE(r.laplace[i], 0.5);
    EXPECT_LE(r.laplace[i], 1.0);
    EXPECT_GE(r.probit[i], 0.5);
  }
  EXPECT_GE(r.bound_mu, 0.5);
  EXPECT_GE(r.bound_u, 0.5);
}

TEST(Probe, MapIsOverconfidentFarAway) {
  const Toy toy = trained_toy();
  const std::vector<double> deltas{1e4};
  RngStream rng(4, 4);
  for (int i = 0; i < 5; ++i) {
    Vector dir = random_vector(2, rng);
    dir.normalize();
    const ProbeDirection r = asymptotic_confidence_probe(toy.params, toy.post, nullptr, 1.0, dir, deltas,
                                                         ProbeOptions{}, RngStream(1, 2));
    EXPECT_GE(r.map[0], 0.999) << i;
    EXPECT_TRUE(r.flow.empty());
    EXPECT_LT(r.laplace[0], r.map[0] + 1e-12);
  }
}

TEST(Probe, RejectsNonBinaryAndZeroDirection) {
  RngStream rng(5, 5);
  const MlpParams p3 = init_mlp(2, {4}, 3, rng);
  const auto post3 = GaussianPosterior::point_mass(flatten_classifier(p3.classifier));
  const std::vector<double> deltas{1.0};
  EXPECT_THROW(asymptotic_confidence_probe(p3, post3, nullptr, 1.0, Vector::Ones(2), deltas, {}, rng), Error);
  const MlpParams p2 = init_mlp(2, {4}, 2, rng);
  const auto post2 = GaussianPosterior::point_mass(flatten_classifier(p2.classifier));
  EXPECT_THROW(asymptotic_confidence_probe(p2, post2, nullptr, 1.0, Vector::Zero(2), deltas, {}, rng), Error);
}
