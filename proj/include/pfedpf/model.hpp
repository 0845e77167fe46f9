#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pfedpf/data.hpp"
#include "pfedpf/numerics.hpp"
#include "pfedpf/rng.hpp"

namespace pfedpf {

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out

  Eigen::Index in_dim() const noexcept { return weight.cols(); }
  Eigen::Index out_dim() const noexcept { return weight.rows(); }
};

// ReLU feature extractor followed by a linear classifier. An empty extractor
// makes the input itself the feature vector.
struct MlpParams {
  std::vector<DenseLayer> extractor;
  DenseLayer classifier;  // k x d

  Eigen::Index input_dim() const noexcept {
    return extractor.empty() ? classifier.in_dim() : extractor.front().in_dim();
  }
  Eigen::Index feature_dim() const noexcept { return classifier.in_dim(); }
  Eigen::Index class_count() const noexcept { return classifier.out_dim(); }
  // Length of the flattened classifier: d*k + k.
  Eigen::Index classifier_dim() const noexcept {
    return classifier.weight.size() + classifier.bias.size();
  }
  std::size_t extractor_parameter_count() const noexcept;

  bool operator==(const MlpParams& other) const;
};

// Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases.
MlpParams init_mlp(Eigen::Index input_dim, const std::vector<Eigen::Index>& hidden,
                   Eigen::Index class_count, RngStream& rng);

// Throws DimensionMismatch when layer shapes do not chain.
void validate(const MlpParams& params);

struct ForwardTrace {
  Vector input;
  std::vector<Vector> pre_activations;  // one per extractor layer
  std::vector<Vector> activations;      // ReLU outputs
  Vector logits;

  const Vector& features() const { return activations.empty() ? input : activations.back(); }
};

ForwardTrace forward(const MlpParams& params, const Vector& x);

struct Gradients {
  MlpParams params;  // same shapes as the model
  Vector input;
};

// Softmax cross-entropy gradients for one example.
Gradients backward(const MlpParams& params, const ForwardTrace& trace, int label);
// Backpropagate an arbitrary upstream gradient on the logits.
Gradients backward_from_logits(const MlpParams& params, const ForwardTrace& trace,
                               const Vector& logit_grad);

double cross_entropy(const Vector& logits, int label);

// Batched helpers; rows of `inputs` are examples.
Matrix features(const MlpParams& params, const Matrix& inputs);
Matrix logits(const MlpParams& params, const Matrix& inputs);
Matrix classifier_logits(const DenseLayer& classifier, const Matrix& features);

// Mean cross-entropy and its gradient over a batch of rows.
double batch_loss_and_gradient(const MlpParams& params, const Matrix& inputs,
                               std::span<const int> labels, MlpParams* gradient);

enum class Freeze { none, extractor, classifier };

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // When set (>= 0), replaces weight_decay on the classifier block.
  double classifier_weight_decay = -1.0;
  std::size_t batch_size = 128;
  std::size_t local_epochs = 5;

  void validate() const;
};

// Mini-batch SGD with momentum and coupled weight decay (g += wd * w;
// v = m v + g; w -= lr v). One shuffle per epoch, drawn from `rng`.
MlpParams train_local(const MlpParams& params, const Dataset& shard, const SgdConfig& cfg,
                      RngStream& rng, Freeze freeze = Freeze::none);

// Classifier flattening: weight rows (row-major), then bias.
Vector flatten_classifier(const DenseLayer& classifier);
DenseLayer unflatten_classifier(const Vector& flat, Eigen::Index class_count,
                                Eigen::Index feature_dim);

struct Linearization {
  Vector logits_at_mean;
  Matrix jacobian;  // k x (d*k + k)
};

Linearization linearize_classifier(const MlpParams& params, const Vector& x);
// Jacobian of the logits w.r.t. the flattened classifier for a given feature vector.
Matrix classifier_jacobian(const Vector& features, Eigen::Index class_count);

}  // namespace pfedpf
