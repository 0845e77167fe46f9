#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "pfedpf/laplace.hpp"
#include "pfedpf/numerics.hpp"
#include "pfedpf/rng.hpp"

namespace pfedpf {

// y = x + beta (x - x0) / (alpha + |x - x0|) with alpha = softplus(alpha_raw)
// and beta = -alpha + softplus(beta_raw). The parameterization keeps
// alpha > 0 and beta > -alpha, so every layer is a bijection.
template <typename Scalar>
struct BasicRadialLayer {
  VectorX<Scalar> x0;
  Scalar alpha_raw = Scalar(0);
  Scalar beta_raw = Scalar(0);

  Scalar alpha() const { return Scalar(softplus(double(alpha_raw))); }
  Scalar beta() const { return -alpha() + Scalar(softplus(double(beta_raw))); }
  Eigen::Index dim() const noexcept { return x0.size(); }

  VectorX<Scalar> forward(const VectorX<Scalar>& x) const {
    const VectorX<Scalar> d = x - x0;
    const Scalar h = Scalar(1) / (alpha() + d.norm());
    return x + (beta() * h) * d;
  }

  // log|det J| = (p-1) log(1 + beta h) + log(1 + beta alpha h^2), h = 1/(alpha + r).
  Scalar log_det(const VectorX<Scalar>& x) const {
    const Scalar a = alpha();
    const Scalar b = beta();
    const Scalar h = Scalar(1) / (a + (x - x0).norm());
    const Scalar p = Scalar(dim());
    return (p - Scalar(1)) * std::log1p(b * h) + std::log1p(b * a * h * h);
  }

  // Positive root of r^2 + (alpha + beta - s) r - alpha s = 0, s = |y - x0|.
  VectorX<Scalar> inverse(const VectorX<Scalar>& y) const {
    const VectorX<Scalar> d = y - x0;
    const Scalar s = d.norm();
    if (s == Scalar(0)) return x0;
    const Scalar a = alpha();
    const Scalar c = a + beta() - s;
    const Scalar disc = std::sqrt(c * c + Scalar(4) * a * s);
    const Scalar r = c > Scalar(0) ? Scalar(2) * a * s / (c + disc) : (disc - c) / Scalar(2);
    return x0 + d * (r / s);
  }
};

using RadialLayer = BasicRadialLayer<double>;

// T = T_L o ... o T_1; an empty stack is the identity.
struct FlowStack {
  std::vector<RadialLayer> layers;

  std::size_t length() const noexcept { return layers.size(); }
  bool empty() const noexcept { return layers.empty(); }
};

struct FlowForward {
  Vector y;
  double log_det = 0.0;
};

FlowForward flow_forward(const FlowStack& stack, const Vector& x);
Vector flow_inverse(const FlowStack& stack, const Vector& y);
// Pushes every column of `points` through the stack.
Matrix flow_forward_columns(const FlowStack& stack, const Matrix& points);

// Central-difference Jacobian of the stack at x.
Matrix numeric_flow_jacobian(const FlowStack& stack, const Vector& x, double step = 1e-6);

// Layers with alpha_raw == beta_raw, hence beta == 0 exactly.
FlowStack identity_stack(std::size_t length, const Vector& x0);
// x0 drawn from the base, alpha = 1, beta = 0.
FlowStack init_stack(std::size_t length, const GaussianPosterior& base, RngStream& rng);

// log N(T^{-1}(phi); mu, Sigma) - sum_l log|det J_{T_l}| at the intermediate points.
double pushforward_log_density(const FlowStack& stack, const GaussianPosterior& base,
                               const Vector& phi);

// Columns are base draws pushed through the stack.
Matrix pushforward_samples(const FlowStack& stack, const GaussianPosterior& base,
                           Eigen::Index count, RngStream& rng);

// Unnormalized log target with gradient.
class LogDensityTarget {
 public:
  virtual ~LogDensityTarget() = default;
  virtual Eigen::Index dim() const = 0;
  virtual double value_and_gradient(const Vector& phi, Vector* gradient) const = 0;
};

// log p(D | phi) + log N(phi | 0, I / gamma) for the linear softmax classifier
// on frozen features, up to a constant.
class TargetLogDensity final : public LogDensityTarget {
 public:
  TargetLogDensity(Matrix features, std::vector<int> labels, Eigen::Index class_count,
                   double prior_precision);

  Eigen::Index dim() const override { return class_count_ * (features_.cols() + 1); }
  double value_and_gradient(const Vector& phi, Vector* gradient) const override;

 private:
  Matrix features_;
  std::vector<int> labels_;
  Eigen::Index class_count_;
  double prior_precision_;
};

// Isotropic or full Gaussian target, mostly for calibration of the trainer.
class GaussianTarget final : public LogDensityTarget {
 public:
  GaussianTarget(Vector mean, const Matrix& covariance);
  Eigen::Index dim() const override { return mean_.size(); }
  double value_and_gradient(const Vector& phi, Vector* gradient) const override;

 private:
  Vector mean_;
  Matrix precision_;
};

struct FineTuneConfig {
  std::size_t flow_length = 10;
  std::size_t steps = 500;
  std::size_t mc_batch = 32;
  double step_size = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

struct FineTuneResult {
  FlowStack stack;
  std::vector<double> losses;  // one MC loss estimate per step
};

// Reverse-KL fit of a radial stack on top of a frozen Gaussian base:
// minimize E_{x ~ base}[-log|det J_T(x)| - log p*(T(x))] with Adam and
// reparameterized gradients. A non-null `warm_start` replaces the random
// initial stack. Throws NonFiniteLoss naming the step.
FineTuneResult fine_tune(const GaussianPosterior& base, const LogDensityTarget& target,
                         const FineTuneConfig& cfg, RngStream& rng,
                         const FlowStack* warm_start = nullptr);

// Single-sample reverse-KL loss and its gradient for fixed base draw x;
// exposed for gradient checks. Gradients are laid out per layer as
// [x0 (p), alpha_raw, beta_raw].
double reverse_kl_sample_loss(const FlowStack& stack, const LogDensityTarget& target,
                              const Vector& x, std::vector<Vector>* layer_gradients);

}  // namespace pfedpf
