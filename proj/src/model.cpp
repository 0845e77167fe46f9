#include "pfedpf/model.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "pfedpf/errors.hpp"

namespace pfedpf {

namespace {

bool same(const DenseLayer& a, const DenseLayer& b) {
  return a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
         a.bias.size() == b.bias.size() && a.weight == b.weight && a.bias == b.bias;
}

DenseLayer zeros_like(const DenseLayer& layer) {
  return {Matrix::Zero(layer.weight.rows(), layer.weight.cols()), Vector::Zero(layer.bias.size())};
}

MlpParams zeros_like(const MlpParams& params) {
  MlpParams out;
  out.extractor.reserve(params.extractor.size());
  for (const auto& layer : params.extractor) out.extractor.push_back(zeros_like(layer));
  out.classifier = zeros_like(params.classifier);
  return out;
}

Vector relu(const Vector& v) { return v.cwiseMax(0.0); }

}  // namespace

std::size_t MlpParams::extractor_parameter_count() const noexcept {
  std::size_t count = 0;
  for (const auto& layer : extractor) count += layer.weight.size() + layer.bias.size();
  return count;
}

bool MlpParams::operator==(const MlpParams& other) const {
  if (extractor.size() != other.extractor.size()) return false;
  for (std::size_t i = 0; i < extractor.size(); ++i)
    if (!same(extractor[i], other.extractor[i])) return false;
  return same(classifier, other.classifier);
}

MlpParams init_mlp(Eigen::Index input_dim, const std::vector<Eigen::Index>& hidden,
                   Eigen::Index class_count, RngStream& rng) {
  auto make_layer = [&rng](Eigen::Index in, Eigen::Index out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    DenseLayer layer{Matrix(out, in), Vector::Zero(out)};
    for (Eigen::Index r = 0; r < out; ++r)
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = rng.uniform(-limit, limit);
    return layer;
  };
  MlpParams params;
  Eigen::Index width = input_dim;
  for (const auto h : hidden) {
    params.extractor.push_back(make_layer(width, h));
    width = h;
  }
  params.classifier = make_layer(width, class_count);
  return params;
}

void validate(const MlpParams& params) {
  Eigen::Index width = params.input_dim();
  for (std::size_t l = 0; l < params.extractor.size(); ++l) {
    const auto& layer = params.extractor[l];
    if (layer.in_dim() != width || layer.bias.size() != layer.out_dim())
      throw DimensionMismatch("extractor layer " + std::to_string(l) + " does not chain");
    width = layer.out_dim();
  }
  if (params.classifier.in_dim() != width ||
      params.classifier.bias.size() != params.classifier.out_dim())
    throw DimensionMismatch("classifier does not match extractor output");
}

ForwardTrace forward(const MlpParams& params, const Vector& x) {
  if (x.size() != params.input_dim()) throw DimensionMismatch("forward: input dimension");
  ForwardTrace trace;
  trace.input = x;
  trace.pre_activations.reserve(params.extractor.size());
  trace.activations.reserve(params.extractor.size());
  for (const auto& layer : params.extractor) {
    const Vector& h = trace.activations.empty() ? trace.input : trace.activations.back();
    Vector z = layer.weight * h + layer.bias;
    trace.activations.push_back(relu(z));
    trace.pre_activations.push_back(std::move(z));
  }
  trace.logits = params.classifier.weight * trace.features() + params.classifier.bias;
  return trace;
}

double cross_entropy(const Vector& logits, int label) { return logsumexp(logits) - logits(label); }

Gradients backward_from_logits(const MlpParams& params, const ForwardTrace& trace,
                               const Vector& logit_grad) {
  Gradients grads;
  grads.params.extractor.resize(params.extractor.size());
  grads.params.classifier.weight = logit_grad * trace.features().transpose();
  grads.params.classifier.bias = logit_grad;
  Vector upstream = params.classifier.weight.transpose() * logit_grad;
  for (std::size_t l = params.extractor.size(); l-- > 0;) {
    // ReLU subgradient at 0 is 0.
    const Vector dz = (trace.pre_activations[l].array() > 0.0).select(upstream, 0.0);
    const Vector& below = l == 0 ? trace.input : trace.activations[l - 1];
    grads.params.extractor[l].weight = dz * below.transpose();
    grads.params.extractor[l].bias = dz;
    upstream = params.extractor[l].weight.transpose() * dz;
  }
  grads.input = std::move(upstream);
  return grads;
}

Gradients backward(const MlpParams& params, const ForwardTrace& trace, int label) {
  Vector g = softmax(trace.logits);
  g(label) -= 1.0;
  return backward_from_logits(params, trace, g);
}

Matrix features(const MlpParams& params, const Matrix& inputs) {
  Matrix h = inputs;
  for (const auto& layer : params.extractor) {
    h = ((h * layer.weight.transpose()).rowwise() + layer.bias.transpose()).cwiseMax(0.0);
  }
  return h;
}

Matrix classifier_logits(const DenseLayer& classifier, const Matrix& feats) {
  return (feats * classifier.weight.transpose()).rowwise() + classifier.bias.transpose();
}

Matrix logits(const MlpParams& params, const Matrix& inputs) {
  return classifier_logits(params.classifier, features(params, inputs));
}

double batch_loss_and_gradient(const MlpParams& params, const Matrix& inputs,
                               std::span<const int> labels, MlpParams* gradient) {
  const Eigen::Index n = inputs.rows();
  std::vector<Matrix> pre;
  std::vector<Matrix> post;
  pre.reserve(params.extractor.size());
  post.reserve(params.extractor.size());
  for (const auto& layer : params.extractor) {
    const Matrix& h = post.empty() ? inputs : post.back();
    Matrix z = (h * layer.weight.transpose()).rowwise() + layer.bias.transpose();
    post.push_back(z.cwiseMax(0.0));
    pre.push_back(std::move(z));
  }
  const Matrix& feats = post.empty() ? inputs : post.back();
  const Matrix out = classifier_logits(params.classifier, feats);
  Matrix g = softmax_rows(out);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    loss += logsumexp(out.row(i).transpose()) - out(i, y);
    g(i, y) -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  loss *= inv_n;
  if (gradient == nullptr) return loss;
  g *= inv_n;
  *gradient = zeros_like(params);
  gradient->classifier.weight = g.transpose() * feats;
  gradient->classifier.bias = g.colwise().sum().transpose();
  Matrix upstream = g * params.classifier.weight;
  for (std::size_t l = params.extractor.size(); l-- > 0;) {
    const Matrix dz = (pre[l].array() > 0.0).select(upstream, 0.0);
    const Matrix& below = l == 0 ? inputs : post[l - 1];
    gradient->extractor[l].weight = dz.transpose() * below;
    gradient->extractor[l].bias = dz.colwise().sum().transpose();
    if (l > 0) upstream = dz * params.extractor[l].weight;
  }
  return loss;
}

void SgdConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw Error("sgd: learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("sgd: momentum must lie in [0, 1)");
  if (batch_size < 1) throw Error("sgd: batch_size must be >= 1");
}

namespace {

void sgd_step(DenseLayer& layer, DenseLayer& velocity, const DenseLayer& grad, double lr,
              double momentum, double wd) {
  velocity.weight = momentum * velocity.weight + grad.weight + wd * layer.weight;
  velocity.bias = momentum * velocity.bias + grad.bias + wd * layer.bias;
  layer.weight -= lr * velocity.weight;
  layer.bias -= lr * velocity.bias;
}

}  // namespace

MlpParams train_local(const MlpParams& params, const Dataset& shard, const SgdConfig& cfg,
                      RngStream& rng, Freeze freeze) {
  cfg.validate();
  if (shard.size() == 0) throw EmptyShard("train_local: empty shard");
  if (!shard.labeled()) throw Error("train_local: shard has no labels");
  validate(params);
  MlpParams current = params;
  if (cfg.learning_rate == 0.0) return current;
  MlpParams velocity = zeros_like(params);
  const double cls_wd = cfg.classifier_weight_decay >= 0.0 ? cfg.classifier_weight_decay
                                                          : cfg.weight_decay;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(shard.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  MlpParams grad;
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const auto rows = static_cast<Eigen::Index>(stop - start);
      Matrix batch(rows, shard.input_dim());
      batch_labels.resize(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        batch.row(static_cast<Eigen::Index>(i - start)) = shard.inputs.row(order[i]);
        batch_labels[i - start] = shard.labels[static_cast<std::size_t>(order[i])];
      }
      batch_loss_and_gradient(current, batch, batch_labels, &grad);
      if (freeze != Freeze::classifier) {
        sgd_step(current.classifier, velocity.classifier, grad.classifier, cfg.learning_rate,
                 cfg.momentum, cls_wd);
      }
      if (freeze != Freeze::extractor) {
        for (std::size_t l = 0; l < current.extractor.size(); ++l) {
          sgd_step(current.extractor[l], velocity.extractor[l], grad.extractor[l],
                   cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        }
      }
    }
  }
  return current;
}

Vector flatten_classifier(const DenseLayer& classifier) {
  const Eigen::Index k = classifier.out_dim();
  const Eigen::Index d = classifier.in_dim();
  Vector flat(k * d + k);
  for (Eigen::Index i = 0; i < k; ++i) flat.segment(i * d, d) = classifier.weight.row(i).transpose();
  flat.tail(k) = classifier.bias;
  return flat;
}

DenseLayer unflatten_classifier(const Vector& flat, Eigen::Index class_count,
                                Eigen::Index feature_dim) {
  if (flat.size() != class_count * feature_dim + class_count)
    throw DimensionMismatch("unflatten_classifier: length does not match k*d + k");
  DenseLayer layer{Matrix(class_count, feature_dim), flat.tail(class_count)};
  for (Eigen::Index i = 0; i < class_count; ++i)
    layer.weight.row(i) = flat.segment(i * feature_dim, feature_dim).transpose();
  return layer;
}

Matrix classifier_jacobian(const Vector& feats, Eigen::Index class_count) {
  const Eigen::Index d = feats.size();
  Matrix jac = Matrix::Zero(class_count, class_count * d + class_count);
  for (Eigen::Index i = 0; i < class_count; ++i) {
    jac.block(i, i * d, 1, d) = feats.transpose();
    jac(i, class_count * d + i) = 1.0;
  }
  return jac;
}

Linearization linearize_classifier(const MlpParams& params, const Vector& x) {
  const ForwardTrace trace = forward(params, x);
  return {trace.logits, classifier_jacobian(trace.features(), params.class_count())};
}

}  // namespace pfedpf
