#include "pfedpf/flows.hpp"

#include <string>

#include "pfedpf/errors.hpp"

namespace pfedpf {

FlowForward flow_forward(const FlowStack& stack, const Vector& x) {
  FlowForward out{x, 0.0};
  for (const auto& layer : stack.layers) {
    if (layer.dim() != out.y.size()) throw DimensionMismatch("flow_forward: dimension");
    out.log_det += layer.log_det(out.y);
    out.y = layer.forward(out.y);
  }
  return out;
}

Vector flow_inverse(const FlowStack& stack, const Vector& y) {
  Vector x = y;
  for (auto it = stack.layers.rbegin(); it != stack.layers.rend(); ++it) {
    if (it->dim() != x.size()) throw DimensionMismatch("flow_inverse: dimension");
    x = it->inverse(x);
  }
  return x;
}

Matrix flow_forward_columns(const FlowStack& stack, const Matrix& points) {
  if (stack.empty()) return points;
  Matrix out(points.rows(), points.cols());
  for (Eigen::Index c = 0; c < points.cols(); ++c) {
    Vector y = points.col(c);
    for (const auto& layer : stack.layers) y = layer.forward(y);
    out.col(c) = y;
  }
  return out;
}

Matrix numeric_flow_jacobian(const FlowStack& stack, const Vector& x, double step) {
  const Eigen::Index p = x.size();
  Matrix jac(p, p);
  Vector probe = x;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double h = step * std::max(1.0, std::abs(x(j)));
    probe(j) = x(j) + h;
    const Vector plus = flow_forward(stack, probe).y;
    probe(j) = x(j) - h;
    const Vector minus = flow_forward(stack, probe).y;
    probe(j) = x(j);
    jac.col(j) = (plus - minus) / (2.0 * h);
  }
  return jac;
}

FlowStack identity_stack(std::size_t length, const Vector& x0) {
  FlowStack stack;
  const double raw = softplus_inverse(1.0);
  for (std::size_t l = 0; l < length; ++l) stack.layers.push_back(RadialLayer{x0, raw, raw});
  return stack;
}

FlowStack init_stack(std::size_t length, const GaussianPosterior& base, RngStream& rng) {
  FlowStack stack;
  const double raw = softplus_inverse(1.0);
  for (std::size_t l = 0; l < length; ++l) stack.layers.push_back(RadialLayer{base.sample(rng), raw, raw});
  return stack;
}

double pushforward_log_density(const FlowStack& stack, const GaussianPosterior& base,
                               const Vector& phi) {
  if (phi.size() != base.dim()) throw DimensionMismatch("pushforward_log_density: dimension");
  Vector x = phi;
  double log_det = 0.0;
  for (auto it = stack.layers.rbegin(); it != stack.layers.rend(); ++it) {
    x = it->inverse(x);
    log_det += it->log_det(x);
  }
  return base.log_density(x) - log_det;
}

Matrix pushforward_samples(const FlowStack& stack, const GaussianPosterior& base,
                           Eigen::Index count, RngStream& rng) {
  return flow_forward_columns(stack, base.sample(count, rng));
}

TargetLogDensity::TargetLogDensity(Matrix feats, std::vector<int> labels, Eigen::Index class_count,
                                   double prior_precision)
    : features_(std::move(feats)),
      labels_(std::move(labels)),
      class_count_(class_count),
      prior_precision_(prior_precision) {
  if (static_cast<Eigen::Index>(labels_.size()) != features_.rows())
    throw DimensionMismatch("TargetLogDensity: labels/features count");
}

double TargetLogDensity::value_and_gradient(const Vector& phi, Vector* gradient) const {
  const Eigen::Index d = features_.cols();
  const Eigen::Index k = class_count_;
  if (phi.size() != dim()) throw DimensionMismatch("TargetLogDensity: dimension");
  const DenseLayer cls = unflatten_classifier(phi, k, d);
  const Matrix out = classifier_logits(cls, features_);
  double value = -0.5 * prior_precision_ * phi.squaredNorm();
  Matrix residual = gradient != nullptr ? Matrix(-softmax_rows(out)) : Matrix();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const int y = labels_[static_cast<std::size_t>(i)];
    value += out(i, y) - logsumexp(out.row(i).transpose());
    if (gradient != nullptr) residual(i, y) += 1.0;
  }
  if (gradient != nullptr) {
    const Matrix gw = residual.transpose() * features_;
    gradient->resize(dim());
    for (Eigen::Index i = 0; i < k; ++i) gradient->segment(i * d, d) = gw.row(i).transpose();
    gradient->tail(k) = residual.colwise().sum().transpose();
    *gradient -= prior_precision_ * phi;
  }
  return value;
}

GaussianTarget::GaussianTarget(Vector mean, const Matrix& covariance)
    : mean_(std::move(mean)), precision_(cholesky(covariance).inverse()) {}

double GaussianTarget::value_and_gradient(const Vector& phi, Vector* gradient) const {
  const Vector diff = phi - mean_;
  const Vector pd = precision_ * diff;
  if (gradient != nullptr) *gradient = -pd;
  return -0.5 * diff.dot(pd);
}

void FineTuneConfig::validate() const {
  if (steps < 1) throw Error("fine_tune: steps must be >= 1");
  if (mc_batch < 1) throw Error("fine_tune: mc_batch must be >= 1");
  if (!(step_size > 0.0)) throw Error("fine_tune: step_size must be > 0");
}

double reverse_kl_sample_loss(const FlowStack& stack, const LogDensityTarget& target,
                              const Vector& x, std::vector<Vector>* layer_gradients) {
  const std::size_t count = stack.layers.size();
  std::vector<Vector> inputs;
  inputs.reserve(count);
  Vector y = x;
  double log_det = 0.0;
  for (const auto& layer : stack.layers) {
    inputs.push_back(y);
    log_det += layer.log_det(y);
    y = layer.forward(y);
  }
  Vector g;
  const double log_target = target.value_and_gradient(y, layer_gradients ? &g : nullptr);
  const double loss = -log_det - log_target;
  if (layer_gradients == nullptr) return loss;

  layer_gradients->assign(count, Vector());
  g = -g;  // d loss / d y_L
  for (std::size_t l = count; l-- > 0;) {
    const RadialLayer& layer = stack.layers[l];
    const Eigen::Index p = layer.dim();
    const double a = layer.alpha();
    const double b = layer.beta();
    const Vector d = inputs[l] - layer.x0;
    const double r = d.norm();
    const double h = 1.0 / (a + r);
    const double h2 = h * h;
    const double big_a = 1.0 + b * h;
    const double big_b = 1.0 + b * a * h2;
    const double dg = d.dot(g);

    // Through y = x + beta h d.
    Vector gx = big_a * g;
    if (r > 0.0) gx -= (b * h2 * dg / r) * d;
    Vector gx0 = g - gx;
    double g_alpha = -b * h2 * dg;
    double g_beta = h * dg;

    // Through -log|det J|.
    const double pm1 = static_cast<double>(p - 1);
    const double dld_dr = pm1 * (-b * h2) / big_a + (-2.0 * b * a * h2 * h) / big_b;
    const double dld_dalpha = pm1 * (-b * h2) / big_a + (b * h2 - 2.0 * b * a * h2 * h) / big_b;
    const double dld_dbeta = pm1 * h / big_a + a * h2 / big_b;
    if (r > 0.0) {
      gx -= (dld_dr / r) * d;
      gx0 += (dld_dr / r) * d;
    }
    g_alpha -= dld_dalpha;
    g_beta -= dld_dbeta;

    Vector packed(p + 2);
    packed.head(p) = gx0;
    packed(p) = (g_alpha - g_beta) * sigmoid(layer.alpha_raw);
    packed(p + 1) = g_beta * sigmoid(layer.beta_raw);
    (*layer_gradients)[l] = std::move(packed);
    g = std::move(gx);
  }
  return loss;
}

FineTuneResult fine_tune(const GaussianPosterior& base, const LogDensityTarget& target,
                         const FineTuneConfig& cfg, RngStream& rng, const FlowStack* warm_start) {
  cfg.validate();
  if (target.dim() != base.dim()) throw DimensionMismatch("fine_tune: base/target dimension");
  FineTuneResult result;
  if (cfg.flow_length == 0) return result;
  if (warm_start != nullptr && warm_start->length() == cfg.flow_length) {
    result.stack = *warm_start;
  } else {
    result.stack = init_stack(cfg.flow_length, base, rng);
  }
  auto& layers = result.stack.layers;
  const Eigen::Index p = base.dim();
  const std::size_t count = layers.size();

  std::vector<Vector> m(count, Vector::Zero(p + 2));
  std::vector<Vector> v(count, Vector::Zero(p + 2));
  std::vector<Vector> grad_sum(count);
  std::vector<Vector> sample_grads;
  result.losses.reserve(cfg.steps);
  double b1_pow = 1.0;
  double b2_pow = 1.0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (auto& gs : grad_sum) gs = Vector::Zero(p + 2);
    double loss = 0.0;
    for (std::size_t s = 0; s < cfg.mc_batch; ++s) {
      const Vector x = base.sample(rng);
      loss += reverse_kl_sample_loss(result.stack, target, x, &sample_grads);
      for (std::size_t l = 0; l < count; ++l) grad_sum[l] += sample_grads[l];
    }
    const double inv = 1.0 / static_cast<double>(cfg.mc_batch);
    loss *= inv;
    bool finite = std::isfinite(loss);
    for (std::size_t l = 0; l < count && finite; ++l) finite = grad_sum[l].allFinite();
    if (!finite) {
      throw NonFiniteLoss(step, "fine_tune: non-finite loss at step " + std::to_string(step) +
                                    "; lower the step size");
    }
    result.losses.push_back(loss);

    b1_pow *= cfg.beta1;
    b2_pow *= cfg.beta2;
    for (std::size_t l = 0; l < count; ++l) {
      const Vector g = grad_sum[l] * inv;
      m[l] = cfg.beta1 * m[l] + (1.0 - cfg.beta1) * g;
      v[l] = cfg.beta2 * v[l] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
      const Vector m_hat = m[l] / (1.0 - b1_pow);
      const Vector v_hat = v[l] / (1.0 - b2_pow);
      const Vector update =
          cfg.step_size * m_hat.cwiseQuotient((v_hat.array().sqrt() + cfg.epsilon).matrix());
      layers[l].x0 -= update.head(p);
      layers[l].alpha_raw -= update(p);
      layers[l].beta_raw -= update(p + 1);
    }
  }
  return result;
}

}  // namespace pfedpf
