#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pfedpf/data.hpp"
#include "pfedpf/flows.hpp"
#include "pfedpf/laplace.hpp"
#include "pfedpf/metrics.hpp"
#include "pfedpf/model.hpp"

namespace pfedpf {

struct ClientShard {
  int client_id = 0;
  Dataset train;
  Dataset test;
  double weight = 0.0;  // |D_i| / |D|
};

struct PartitionConfig {
  int clients = 20;
  double minor_fraction = 0.2;  // p
  int train_per_client = 1500;
  int test_per_client = 500;
};

// Per-class example counts for one client: round(p n) spread uniformly over
// classes, the rest split between the two main classes.
std::vector<int> class_counts(int total, double minor_fraction, int class_count,
                              std::pair<int, int> main_classes);
std::pair<int, int> main_classes_for(int client, int class_count);

// Two main classes per client (round-robin); test shards mirror the train
// proportions. Throws InsufficientData when a class pool runs dry.
std::vector<ClientShard> partition(const Dataset& dataset, const PartitionConfig& cfg, RngStream& rng);

// Exact first two moments of the mixture sum_i pi_i N(mu_i, Sigma_i).
template <typename Scalar>
struct GaussianMoments {
  VectorX<Scalar> mean;
  MatrixX<Scalar> covariance;
};

// mu = sum pi_i mu_i and Sigma = sum pi_i (Sigma_i + mu_i mu_i^T) - mu mu^T,
// accumulated as offsets from the first component so identical inputs
// reproduce themselves bit-exactly.
template <typename Scalar>
GaussianMoments<Scalar> aggregate_moments(std::span<const VectorX<Scalar>> means,
                                          std::span<const MatrixX<Scalar>> covariances,
                                          std::span<const Scalar> weights) {
  if (means.empty() || means.size() != covariances.size() || means.size() != weights.size())
    throw DimensionMismatch("aggregate: inputs and weights disagree in count");
  const Eigen::Index p = means.front().size();
  for (std::size_t i = 0; i < means.size(); ++i) {
    if (means[i].size() != p || covariances[i].rows() != p || covariances[i].cols() != p)
      throw DimensionMismatch("aggregate: component " + std::to_string(i) + " has the wrong dimension");
  }
  Scalar total = 0;
  for (const auto w : weights) total += w;
  if (std::abs(double(total) - 1.0) > 1e-9) throw Error("aggregate: weights must sum to 1");

  GaussianMoments<Scalar> out;
  out.mean = means.front();
  for (std::size_t i = 1; i < means.size(); ++i) out.mean += weights[i] * (means[i] - means.front());
  out.covariance = covariances.front();
  for (std::size_t i = 1; i < means.size(); ++i)
    out.covariance += weights[i] * (covariances[i] - covariances.front());
  for (std::size_t i = 0; i < means.size(); ++i) {
    const VectorX<Scalar> diff = means[i] - out.mean;
    out.covariance.noalias() += weights[i] * diff * diff.transpose();
  }
  return out;
}

// Moment-matched Gaussian (forward-KL projection of the mixture). Retries the
// covariance factorization once with jitter.
GaussianPosterior aggregate_gaussians(std::span<const GaussianPosterior> posteriors,
                                      std::span<const double> weights);

// Weighted parameter mean: the zero-variance case of aggregate_gaussians.
Vector aggregate_deterministic(std::span<const Vector> params, std::span<const double> weights);
std::vector<DenseLayer> aggregate_deterministic(std::span<const std::vector<DenseLayer>> layers,
                                                std::span<const double> weights);

enum class BaseAlgorithm { fedavg, fedper, lg_fedavg };

struct AlgorithmVariant {
  BaseAlgorithm base = BaseAlgorithm::fedavg;
  bool posterior_fine_tune = false;

  // FedAvg and LG-FedAvg share the classifier; FedAvg and FedPer share the extractor.
  bool shares_classifier() const noexcept { return base != BaseAlgorithm::fedper; }
  bool shares_extractor() const noexcept { return base != BaseAlgorithm::lg_fedavg; }
  std::string name() const;
};

std::string to_string(BaseAlgorithm base);
BaseAlgorithm parse_base_algorithm(const std::string& name);

struct RoundConfig {
  std::size_t total_rounds = 80;
  std::size_t local_epochs = 5;
  // When false, clients upload bare classifier means until the final round.
  bool laplace_every_round = true;
};

struct ServerState {
  std::vector<DenseLayer> extractor;
  GaussianPosterior classifier_posterior;
  std::size_t round = 0;
};

struct ClientState {
  ClientShard shard;
  MlpParams params;  // personal copy, including any personal blocks
  std::optional<GaussianPosterior> posterior;
  FlowStack flow;
};

struct FederationConfig {
  std::vector<Eigen::Index> hidden{16, 16};
  AlgorithmVariant variant;
  RoundConfig rounds;
  SgdConfig sgd;
  PriorConfig prior;
  FineTuneConfig flow;
  // Fine-tune after every round (warm-started) instead of once at the end.
  bool fine_tune_every_round = false;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct ClientUpload {
  std::size_t bytes = 0;
  std::uint64_t checksum = 0;
  bool has_extractor = false;
  bool has_classifier = false;
};

struct RoundTrace {
  std::size_t round = 0;
  std::vector<ClientUpload> uploads;
  double posterior_trace = 0.0;  // trace of the aggregated covariance
};

std::string to_json_line(const RoundTrace& trace);

// Server and clients start from one shared initialization; the server
// posterior starts as N(initial classifier, I / gamma).
ServerState init_server(const FederationConfig& cfg, Eigen::Index input_dim, Eigen::Index class_count);
std::vector<ClientState> init_clients(const ServerState& server, std::vector<ClientShard> shards,
                                      Eigen::Index class_count);

// Classifier SGD weight decay gamma / |D_i|, matching the Laplace prior.
SgdConfig coupled_sgd(const FederationConfig& cfg, std::size_t shard_size);

// Broadcast -> local training -> Laplace fit -> upload -> aggregation.
RoundTrace run_round(ServerState& server, std::vector<ClientState>& clients, const FederationConfig& cfg);

// Model each client evaluates with after training.
MlpParams evaluation_params(const ServerState& server, const ClientState& client,
                            const AlgorithmVariant& variant);
// Posterior the flow starts from: the server posterior when the classifier
// is shared, otherwise a Laplace fit of the personal classifier.
GaussianPosterior base_posterior(const ServerState& server, const ClientState& client,
                                 const FederationConfig& cfg);

struct FederationOutcome {
  ServerState server;
  std::vector<ClientState> clients;
  std::vector<RoundTrace> trace;
};

FederationOutcome train_federation(const FederationConfig& cfg, std::vector<ClientShard> shards,
                                   Eigen::Index class_count);

struct NamedDataset {
  std::string name;
  Dataset data;
};

struct EvalConfig {
  std::size_t mc_samples = 64;
  OdinConfig odin;
  double dropout_rate = 0.2;
  std::size_t dropout_samples = 10;
  std::size_t ece_bins = 15;
};

struct ClientReport {
  int client_id = 0;
  double weight = 0.0;
  double accuracy = 0.0;
  double nll = 0.0;
  double ece = 0.0;
  ReliabilityDiagram reliability;
  std::string primary_method;  // "bayes" with fine-tuning, else "msp"
  // ood set -> method -> metrics
  std::map<std::string, std::map<std::string, DetectionMetrics>> detection;
  // ood set -> method -> scores (kept for CSV dumps)
  std::map<std::string, std::map<std::string, ScoreSet>> scores;
};

struct AggregateReport {
  double accuracy = 0.0;
  double nll = 0.0;
  double ece = 0.0;
  std::map<std::string, std::map<std::string, DetectionMetrics>> detection;
};

struct ExperimentResult {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<ClientReport> clients;
  AggregateReport aggregate;
  std::vector<RoundTrace> trace;
  FederationOutcome outcome;
};

// Fine-tunes (when the variant asks for it) and evaluates every client on
// its test shard and on each OOD set.
ExperimentResult evaluate_clients(FederationOutcome outcome, const FederationConfig& cfg,
                                  const EvalConfig& eval, std::span<const NamedDataset> ood_sets);

ExperimentResult run_experiment(const FederationConfig& cfg, std::vector<ClientShard> shards,
                                Eigen::Index class_count, const EvalConfig& eval,
                                std::span<const NamedDataset> ood_sets);

AggregateReport weighted_average(std::span<const ClientReport> clients);

}  // namespace pfedpf
