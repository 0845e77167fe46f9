#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pfedpf/flows.hpp"
#include "pfedpf/laplace.hpp"
#include "pfedpf/model.hpp"
#include "pfedpf/rng.hpp"

namespace pfedpf {

struct ProbeOptions {
  std::size_t mc_samples = 1024;
  double far_delta = 1e3;  // delta_0 for the slope estimate
  std::size_t jacobian_samples = 256;
};

// Far-field confidences along one direction plus the analytic caps.
struct ProbeDirection {
  std::vector<double> deltas;
  std::vector<double> map;            // point estimate
  std::vector<double> laplace;        // MC over the Gaussian
  std::vector<double> flow;           // MC over the flow pushforward (empty without a flow)
  std::vector<double> identity_flow;  // MC through a beta = 0 stack, same stream as laplace
  std::vector<double> probit;         // closed-form binary predictive of the Gaussian

  double cap_argument = 0.0;  // |j mu| / sqrt(pi/8 j Sigma j^T), j = (-a, a, 0, 0)
  double laplace_cap = 0.0;
  double flow_cap = 0.0;      // sigma(s_max(J_T) * cap_argument)

  // sigma(s_max(J_T) * norm / (s_min(J^T) sqrt(pi/8 lambda_min(Sigma)))) with
  // both candidate norms.
  double norm_mu = 0.0;
  double norm_u = 0.0;
  double s_min_jt = 0.0;
  double bound_mu = 0.0;
  double bound_u = 0.0;
};

// Exact Jacobian dz/dx of the extractor output at x (ReLU masks taken at x).
Matrix feature_jacobian(const MlpParams& params, const Vector& x);

// max over `count` base draws of the top singular value of the numeric
// flow Jacobian. Exactly 1 for an empty or beta = 0 stack.
double flow_spectral_max(const FlowStack& flow, const GaussianPosterior& base, std::size_t count,
                         RngStream& rng);

// Binary classifiers only. `stream` seeds the posterior draws; every column
// uses a fresh copy of it, so the identity-flow column reproduces the
// Laplace column bit for bit.
ProbeDirection asymptotic_confidence_probe(const MlpParams& params, const GaussianPosterior& post,
                                           const FlowStack* flow, double flow_s_max,
                                           const Vector& direction, std::span<const double> deltas,
                                           const ProbeOptions& options, const RngStream& stream);

}  // namespace pfedpf
