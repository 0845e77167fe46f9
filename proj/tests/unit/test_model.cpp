#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "pfedpf/data.hpp"
#include "pfedpf/model.hpp"
#include "test_support.hpp"

using namespace pfedpf;
using pfedpf::testing::flatten_all;
using pfedpf::testing::numeric_gradient;
using pfedpf::testing::random_vector;
using pfedpf::testing::unflatten_all;

namespace {

MlpParams random_net(RngStream& rng, Eigen::Index in, std::vector<Eigen::Index> hidden, Eigen::Index k) {
  MlpParams p = init_mlp(in, hidden, k, rng);
  for (auto& l : p.extractor) l.bias = random_vector(l.out_dim(), rng, 0.3);
  p.classifier.bias = random_vector(k, rng, 0.3);
  return p;
}

// Resample until every pre-activation is away from the ReLU kink.
Vector input_off_kinks(const MlpParams& p, RngStream& rng) {
  while (true) {
    const Vector x = random_vector(p.input_dim(), rng);
    const ForwardTrace t = forward(p, x);
    bool ok = true;
    for (const auto& pre : t.pre_activations) ok = ok && pre.cwiseAbs().minCoeff() > 1e-3;
    if (ok) return x;
  }
}

double accuracy_of(const MlpParams& p, const Dataset& d) {
  const Matrix z = logits(p, d.inputs);
  int correct = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index arg;
    z.row(i).maxCoeff(&arg);
    correct += arg == d.labels[static_cast<std::size_t>(i)];
  }
  return double(correct) / double(d.size());
}

}  // namespace

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  RngStream rng(0, 0);
  MlpParams p = init_mlp(3, {4}, 2, rng);
  for (auto& l : p.extractor) l.weight.setZero();
  p.classifier.weight.setZero();
  EXPECT_EQ(forward(p, Vector::Ones(3)).logits, Vector::Zero(2));
}

TEST(Forward, ReluClipsNegatives) {
  MlpParams p;
  p.extractor.push_back({Matrix::Identity(2, 2), Vector::Zero(2)});
  p.classifier = {Matrix::Identity(2, 2), Vector::Zero(2)};
  Vector x(2);
  x << 1, -1;
  const ForwardTrace t = forward(p, x);
  EXPECT_EQ(t.features(), Vector((Vector(2) << 1, 0).finished()));
}

TEST(Forward, MatchesIndependentEvaluation) {
  RngStream rng(4, 1);
  const MlpParams p = random_net(rng, 5, {7, 6}, 3);
  const Vector x = random_vector(5, rng);
  Vector h = x;
  for (const auto& l : p.extractor) {
    Vector pre(l.out_dim());
    for (Eigen::Index r = 0; r < l.out_dim(); ++r) {
      double s = l.bias(r);
      for (Eigen::Index c = 0; c < l.in_dim(); ++c) s += l.weight(r, c) * h(c);
      pre(r) = s > 0 ? s : 0;
    }
    h = pre;
  }
  Vector expected(3);
  for (Eigen::Index r = 0; r < 3; ++r) {
    double s = p.classifier.bias(r);
    for (Eigen::Index c = 0; c < h.size(); ++c) s += p.classifier.weight(r, c) * h(c);
    expected(r) = s;
  }
  EXPECT_LT((forward(p, x).logits - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((logits(p, x.transpose()).row(0).transpose() - expected).norm(), 1e-12);
}

TEST(Forward, EmptyExtractorUsesInputAsFeatures) {
  MlpParams p;
  p.classifier = {Matrix::Ones(2, 3), Vector::Zero(2)};
  EXPECT_EQ(p.input_dim(), 3);
  EXPECT_EQ(forward(p, Vector::Ones(3)).logits, Vector::Constant(2, 3.0));
}

TEST(Validate, RejectsBrokenChain) {
  RngStream rng(0, 0);
  MlpParams p = init_mlp(3, {4, 5}, 2, rng);
  EXPECT_NO_THROW(validate(p));
  p.extractor[1].weight = Matrix::Zero(5, 3);
  EXPECT_THROW(validate(p), DimensionMismatch);
}

TEST(InitMlp, GlorotRangeAndZeroBias) {
  RngStream rng(1, 1);
  const MlpParams p = init_mlp(10, {20}, 5, rng);
  const double bound = std::sqrt(6.0 / 30.0);
  EXPECT_LE(p.extractor[0].weight.cwiseAbs().maxCoeff(), bound);
  EXPECT_EQ(p.extractor[0].bias, Vector::Zero(20));
  EXPECT_EQ(p.classifier.weight.rows(), 5);
}

TEST(Backward, SaturatedLossHasTinyGradient) {
  MlpParams p;
  p.extractor.push_back({Matrix::Identity(2, 2), Vector::Zero(2)});
  p.classifier = {(Matrix(2, 2) << 50, 0, 0, -50).finished(), Vector::Zero(2)};
  Vector x(2);
  x << 1, 0.5;
  const Gradients g = backward(p, forward(p, x), 0);
  EXPECT_LT(flatten_all(g.params).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Backward, MatchesFiniteDifferencesOn2_16_8_3) {
  RngStream rng(12, 5);
  for (int trial = 0; trial < 10; ++trial) {
    const MlpParams p = random_net(rng, 2, {16, 8}, 3);
    const Vector x = input_off_kinks(p, rng);
    const int label = int(rng.below(3));
    const Gradients g = backward(p, forward(p, x), label);
    auto loss_of = [&](const Vector& theta) {
      return cross_entropy(forward(unflatten_all(p, theta), x).logits, label);
    };
    const Vector numeric = numeric_gradient(loss_of, flatten_all(p));
    const Vector analytic = flatten_all(g.params);
    EXPECT_LT((analytic - numeric).norm() / numeric.norm(), 1e-5) << trial;
    auto loss_x = [&](const Vector& xx) { return cross_entropy(forward(p, xx).logits, label); };
    const Vector nx = numeric_gradient(loss_x, x);
    EXPECT_LT((g.input - nx).norm() / nx.norm(), 1e-5) << trial;
  }
}

TEST(Backward, FromLogitsIsLinearInUpstream) {
  RngStream rng(3, 3);
  const MlpParams p = random_net(rng, 4, {5}, 3);
  const Vector x = input_off_kinks(p, rng);
  const ForwardTrace t = forward(p, x);
  const Vector up = random_vector(3, rng);
  const Gradients a = backward_from_logits(p, t, up);
  const Gradients b = backward_from_logits(p, t, Vector(2.0 * up));
  EXPECT_LT((flatten_all(b.params) - 2.0 * flatten_all(a.params)).norm(), 1e-12);
}

TEST(BatchLoss, MatchesMeanOfSingleExamples) {
  RngStream rng(6, 6);
  const MlpParams p = random_net(rng, 3, {4}, 2);
  const Matrix xs = pfedpf::testing::random_matrix(5, 3, rng);
  const std::vector<int> ys{0, 1, 1, 0, 1};
  MlpParams grad;
  const double loss = batch_loss_and_gradient(p, xs, ys, &grad);
  double expected = 0.0;
  Vector g = Vector::Zero(flatten_all(p).size());
  for (int i = 0; i < 5; ++i) {
    const ForwardTrace t = forward(p, xs.row(i).transpose());
    expected += cross_entropy(t.logits, ys[i]) / 5.0;
    g += flatten_all(backward(p, t, ys[i]).params) / 5.0;
  }
  EXPECT_NEAR(loss, expected, 1e-12);
  EXPECT_LT((flatten_all(grad) - g).norm(), 1e-12);
}

TEST(BatchLoss, FullBatchStepsDoNotIncreaseLoss) {
  RngStream rng(7, 1);
  const Dataset d = gen_blobs(3, 20, 2, 0.8, rng);
  MlpParams p = init_mlp(2, {16}, 3, rng);
  MlpParams grad;
  double prev = batch_loss_and_gradient(p, d.inputs, d.labels, &grad);
  for (int step = 0; step < 20; ++step) {
    p = unflatten_all(p, flatten_all(p) - 1e-3 * flatten_all(grad));
    const double now = batch_loss_and_gradient(p, d.inputs, d.labels, &grad);
    EXPECT_LE(now, prev + 1e-15);
    prev = now;
  }
}

TEST(TrainLocal, ZeroLearningRateKeepsParams) {
  RngStream rng(2, 2);
  const Dataset d = gen_blobs(2, 10, 2, 0.3, rng);
  const MlpParams p = init_mlp(2, {8}, 2, rng);
  SgdConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 4;
  cfg.local_epochs = 3;
  RngStream train(2, 3);
  EXPECT_TRUE(train_local(p, d, cfg, train) == p);
}

TEST(TrainLocal, SeparableBlobsReachHighAccuracy) {
  RngStream rng(9, 9);
  const Dataset d = gen_blobs(2, 100, 2, 0.3, rng);
  const MlpParams p = init_mlp(2, {16}, 2, rng);
  SgdConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 16;
  cfg.local_epochs = 50;
  RngStream train(9, 10);
  EXPECT_GE(accuracy_of(train_local(p, d, cfg, train), d), 0.99);
}

TEST(TrainLocal, FrozenBlocksAreBitIdentical) {
  RngStream rng(5, 5);
  const Dataset d = gen_blobs(3, 30, 4, 0.5, rng);
  const MlpParams p = init_mlp(4, {8, 8}, 3, rng);
  SgdConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 8;
  cfg.local_epochs = 2;
  RngStream t1(5, 6), t2(5, 6);
  const MlpParams a = train_local(p, d, cfg, t1, Freeze::classifier);
  EXPECT_EQ(a.classifier.weight, p.classifier.weight);
  EXPECT_EQ(a.classifier.bias, p.classifier.bias);
  EXPECT_NE(a.extractor[0].weight, p.extractor[0].weight);
  const MlpParams b = train_local(p, d, cfg, t2, Freeze::extractor);
  for (std::size_t l = 0; l < p.extractor.size(); ++l) {
    EXPECT_EQ(b.extractor[l].weight, p.extractor[l].weight);
    EXPECT_EQ(b.extractor[l].bias, p.extractor[l].bias);
  }
  EXPECT_NE(b.classifier.weight, p.classifier.weight);
}

TEST(TrainLocal, EmptyShardThrows) {
  RngStream rng(0, 0);
  const MlpParams p = init_mlp(2, {4}, 2, rng);
  Dataset empty;
  empty.inputs = Matrix(0, 2);
  EXPECT_THROW(train_local(p, empty, SgdConfig{}, rng), EmptyShard);
}

TEST(TrainLocal, ReproducibleFromStream) {
  RngStream rng(1, 2);
  const Dataset d = gen_blobs(2, 20, 3, 0.5, rng);
  const MlpParams p = init_mlp(3, {6}, 2, rng);
  SgdConfig cfg;
  cfg.batch_size = 7;
  cfg.local_epochs = 2;
  RngStream a(4, 4), b(4, 4);
  EXPECT_TRUE(train_local(p, d, cfg, a) == train_local(p, d, cfg, b));
}

TEST(Classifier, FlattenLayoutAndRoundTrip) {
  DenseLayer c{(Matrix(2, 3) << 1, 2, 3, 4, 5, 6).finished(), (Vector(2) << 7, 8).finished()};
  const Vector flat = flatten_classifier(c);
  EXPECT_EQ(flat, (Vector(8) << 1, 2, 3, 4, 5, 6, 7, 8).finished());
  const DenseLayer back = unflatten_classifier(flat, 2, 3);
  EXPECT_EQ(back.weight, c.weight);
  EXPECT_EQ(back.bias, c.bias);
}

TEST(Classifier, JacobianHandLayout) {
  const Matrix j = classifier_jacobian((Vector(2) << 1, 2).finished(), 2);
  EXPECT_EQ(j.row(0), (Eigen::RowVectorXd(6) << 1, 2, 0, 0, 1, 0).finished());
  EXPECT_EQ(j.row(1), (Eigen::RowVectorXd(6) << 0, 0, 1, 2, 0, 1).finished());
}

TEST(Classifier, ZeroFeaturesLeaveOnlyBiasBlock) {
  const Matrix j = classifier_jacobian(Vector::Zero(3), 2);
  EXPECT_EQ(j.leftCols(6), Matrix::Zero(2, 6));
  EXPECT_EQ(j.rightCols(2), Matrix::Identity(2, 2));
}

TEST(Classifier, LinearizationMatchesFiniteDifferences) {
  RngStream rng(3, 9);
  const MlpParams p = random_net(rng, 3, {5}, 4);
  const Vector x = input_off_kinks(p, rng);
  const Linearization lin = linearize_classifier(p, x);
  EXPECT_LT((lin.logits_at_mean - forward(p, x).logits).norm(), 1e-14);
  const Vector phi = flatten_classifier(p.classifier);
  for (Eigen::Index out = 0; out < 4; ++out) {
    auto f = [&](const Vector& v) {
      MlpParams q = p;
      q.classifier = unflatten_classifier(v, 4, p.feature_dim());
      return forward(q, x).logits(out);
    };
    const Vector g = numeric_gradient(f, phi);
    EXPECT_LT((lin.jacobian.row(out).transpose() - g).cwiseAbs().maxCoeff(), 1e-7);
  }
}

TEST(Sgd, ValidationRejectsBadValues) {
  SgdConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = SgdConfig{};
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = SgdConfig{};
  cfg.learning_rate = -1.0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(MlpParams, ExtractorParameterCount) {
  RngStream rng(0, 0);
  const MlpParams p = init_mlp(3, {4, 5}, 2, rng);
  EXPECT_EQ(p.extractor_parameter_count(), std::size_t(3 * 4 + 4 + 4 * 5 + 5));
  EXPECT_EQ(p.classifier_dim(), 5 * 2 + 2);
}
