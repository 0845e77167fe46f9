#include "pfedpf/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pfedpf/errors.hpp"

namespace pfedpf {

Matrix feature_jacobian(const MlpParams& params, const Vector& x) {
  const ForwardTrace trace = forward(params, x);
  Matrix jac = Matrix::Identity(x.size(), x.size());
  for (std::size_t l = 0; l < params.extractor.size(); ++l) {
    Matrix next = params.extractor[l].weight * jac;
    const Vector& pre = trace.pre_activations[l];
    for (Eigen::Index r = 0; r < pre.size(); ++r)
      if (!(pre(r) > 0.0)) next.row(r).setZero();
    jac = std::move(next);
  }
  return jac;
}

double flow_spectral_max(const FlowStack& flow, const GaussianPosterior& base, std::size_t count,
                         RngStream& rng) {
  const bool identity = std::all_of(flow.layers.begin(), flow.layers.end(),
                                    [](const RadialLayer& l) { return l.beta() == 0.0; });
  if (identity) return 1.0;
  double best = 0.0;
  for (std::size_t s = 0; s < count; ++s) {
    const Vector x = base.sample(rng);
    best = std::max(best, spectral_summary(numeric_flow_jacobian(flow, x)).max_singular);
  }
  return best;
}

namespace {

double max_class(const Vector& probs) { return probs.maxCoeff(); }

double sigmoid_of(double v) { return sigmoid(v); }

}  // namespace

ProbeDirection asymptotic_confidence_probe(const MlpParams& params, const GaussianPosterior& post,
                                           const FlowStack* flow, double flow_s_max,
                                           const Vector& direction, std::span<const double> deltas,
                                           const ProbeOptions& options, const RngStream& stream) {
  if (params.class_count() != 2) throw Error("probe: binary classifier required");
  if (direction.norm() == 0.0) throw Error("probe: zero direction");
  const Eigen::Index k = 2;
  const Eigen::Index d = params.feature_dim();
  const auto m = static_cast<Eigen::Index>(options.mc_samples);

  RngStream draw = stream;
  const Matrix base_samples = post.sample(m, draw);
  const Matrix flow_samples = flow != nullptr ? flow_forward_columns(*flow, base_samples) : Matrix();
  const FlowStack identity = identity_stack(flow != nullptr ? flow->length() : 1, post.mean());
  draw = stream;
  const Matrix identity_samples = pushforward_samples(identity, post, m, draw);

  ProbeDirection out;
  for (const double delta : deltas) {
    const Vector x = delta * direction;
    const Vector z = features(params, x.transpose()).row(0).transpose();
    out.deltas.push_back(delta);
    out.map.push_back(max_class(softmax(forward(params, x).logits)));
    out.laplace.push_back(max_class(mc_predict(base_samples, z, k)));
    out.identity_flow.push_back(max_class(mc_predict(identity_samples, z, k)));
    if (flow != nullptr) out.flow.push_back(max_class(mc_predict(flow_samples, z, k)));
    const double p1 = probit_predict_binary(post, linearize_classifier(params, x));
    out.probit.push_back(std::max(p1, 1.0 - p1));
  }

  // Far-field slope of the features and the reduced margin row.
  const double d0 = options.far_delta;
  const Matrix probe_points = (Matrix(2, direction.size()) << (d0 * direction).transpose(),
                               (2.0 * d0 * direction).transpose()).finished();
  const Matrix zz = features(params, probe_points);
  const Vector a = (zz.row(1) - zz.row(0)).transpose() / d0;
  Vector j = Vector::Zero(k * d + k);
  j.segment(0, d) = -a;
  j.segment(d, d) = a;
  const double jmu = std::abs(j.dot(post.mean()));
  const double jsj = j.dot(post.covariance() * j);
  const double pi8 = std::numbers::pi / 8.0;
  out.cap_argument = jsj > 0.0 ? jmu / std::sqrt(pi8 * jsj) : std::numeric_limits<double>::infinity();
  out.laplace_cap = sigmoid_of(out.cap_argument);
  out.flow_cap = sigmoid_of(flow_s_max * out.cap_argument);

  // u = d margin / dx in the far linear region; J = du/dphi = [-U; U; 0; 0].
  const Matrix u_jac = feature_jacobian(params, d0 * direction);
  const DenseLayer& cls = params.classifier;
  const Vector u = u_jac.transpose() * (cls.weight.row(1) - cls.weight.row(0)).transpose();
  Matrix jm = Matrix::Zero(k * d + k, direction.size());
  jm.middleRows(0, d) = -u_jac;
  jm.middleRows(d, d) = u_jac;
  out.s_min_jt = spectral_summary(Matrix(jm.transpose())).min_singular;
  const double lambda_min = spectral_summary(post.covariance()).min_eigenvalue;
  out.norm_mu = post.mean().norm();
  out.norm_u = u.norm();
  const double denom = out.s_min_jt * std::sqrt(pi8 * lambda_min);
  out.bound_mu = sigmoid_of(flow_s_max * out.norm_mu / denom);
  out.bound_u = sigmoid_of(flow_s_max * out.norm_u / denom);
  return out;
}

}  // namespace pfedpf
