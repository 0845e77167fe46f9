#include "pfedpf/federation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <json.hpp>

#include "pfedpf/checkpoint.hpp"
#include "pfedpf/errors.hpp"
#include "pfedpf/parallel.hpp"

namespace pfedpf {

std::pair<int, int> main_classes_for(int client, int class_count) {
  return {(2 * client) % class_count, (2 * client + 1) % class_count};
}

std::vector<int> class_counts(int total, double minor_fraction, int class_count,
                              std::pair<int, int> main_classes) {
  if (class_count < 2) throw Error("partition: need at least two classes");
  if (!(minor_fraction >= 0.0 && minor_fraction <= 1.0))
    throw Error("partition: minor fraction must lie in [0, 1]");
  std::vector<int> counts(static_cast<std::size_t>(class_count), 0);
  const int minor = static_cast<int>(std::lround(minor_fraction * total));
  const int each = minor / class_count;
  const int spill = minor - each * class_count;
  for (int c = 0; c < class_count; ++c) counts[c] = each + (c < spill ? 1 : 0);
  const int rest = total - minor;
  counts[main_classes.first] += rest - rest / 2;
  counts[main_classes.second] += rest / 2;
  return counts;
}

std::vector<ClientShard> partition(const Dataset& dataset, const PartitionConfig& cfg, RngStream& rng) {
  if (!dataset.labeled()) throw Error("partition: dataset has no labels");
  if (cfg.clients < 1) throw Error("partition: need at least one client");
  const int k = dataset.class_count;
  std::vector<std::vector<Eigen::Index>> pools(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < dataset.size(); ++i) pools[dataset.labels[i]].push_back(i);
  for (auto& pool : pools) shuffle(pool, rng);
  std::vector<std::size_t> cursor(pools.size(), 0);

  auto take = [&](const std::vector<int>& counts, int client) {
    std::vector<Eigen::Index> rows;
    for (int c = 0; c < k; ++c) {
      auto& pool = pools[c];
      if (cursor[c] + counts[c] > pool.size()) {
        throw InsufficientData("partition: class " + std::to_string(c) + " runs out at client " +
                               std::to_string(client));
      }
      rows.insert(rows.end(), pool.begin() + cursor[c], pool.begin() + cursor[c] + counts[c]);
      cursor[c] += counts[c];
    }
    return dataset.subset(rows);
  };

  std::vector<ClientShard> shards;
  std::size_t total = 0;
  for (int i = 0; i < cfg.clients; ++i) {
    const auto mains = main_classes_for(i, k);
    ClientShard shard;
    shard.client_id = i;
    shard.train = take(class_counts(cfg.train_per_client, cfg.minor_fraction, k, mains), i);
    shard.test = take(class_counts(cfg.test_per_client, cfg.minor_fraction, k, mains), i);
    total += static_cast<std::size_t>(shard.train.size());
    shards.push_back(std::move(shard));
  }
  for (auto& shard : shards)
    shard.weight = static_cast<double>(shard.train.size()) / static_cast<double>(total);
  return shards;
}

GaussianPosterior aggregate_gaussians(std::span<const GaussianPosterior> posteriors,
                                      std::span<const double> weights) {
  std::vector<Vector> means;
  std::vector<Matrix> covs;
  bool all_point = true;
  for (const auto& post : posteriors) {
    means.push_back(post.mean());
    covs.push_back(post.covariance());
    all_point = all_point && post.is_point_mass();
  }
  auto moments = aggregate_moments<double>(means, covs, weights);
  if (all_point) return GaussianPosterior::point_mass(std::move(moments.mean));
  return GaussianPosterior::from_covariance(std::move(moments.mean), std::move(moments.covariance));
}

Vector aggregate_deterministic(std::span<const Vector> params, std::span<const double> weights) {
  if (params.empty() || params.size() != weights.size())
    throw DimensionMismatch("aggregate: inputs and weights disagree in count");
  Vector out = params.front();
  for (std::size_t i = 1; i < params.size(); ++i) {
    if (params[i].size() != out.size()) throw DimensionMismatch("aggregate: parameter length");
    out += weights[i] * (params[i] - params.front());
  }
  return out;
}

std::vector<DenseLayer> aggregate_deterministic(std::span<const std::vector<DenseLayer>> layers,
                                                std::span<const double> weights) {
  if (layers.empty() || layers.size() != weights.size())
    throw DimensionMismatch("aggregate: inputs and weights disagree in count");
  std::vector<DenseLayer> out = layers.front();
  for (std::size_t i = 1; i < layers.size(); ++i) {
    if (layers[i].size() != out.size()) throw DimensionMismatch("aggregate: layer count");
    for (std::size_t l = 0; l < out.size(); ++l) {
      const auto& src = layers[i][l];
      const auto& ref = layers.front()[l];
      if (src.weight.rows() != ref.weight.rows() || src.weight.cols() != ref.weight.cols())
        throw DimensionMismatch("aggregate: layer " + std::to_string(l) + " shape");
      out[l].weight += weights[i] * (src.weight - ref.weight);
      out[l].bias += weights[i] * (src.bias - ref.bias);
    }
  }
  return out;
}

std::string to_string(BaseAlgorithm base) {
  switch (base) {
    case BaseAlgorithm::fedavg: return "fedavg";
    case BaseAlgorithm::fedper: return "fedper";
    case BaseAlgorithm::lg_fedavg: return "lg_fedavg";
  }
  return "unknown";
}

BaseAlgorithm parse_base_algorithm(const std::string& name) {
  if (name == "fedavg") return BaseAlgorithm::fedavg;
  if (name == "fedper") return BaseAlgorithm::fedper;
  if (name == "lg_fedavg") return BaseAlgorithm::lg_fedavg;
  throw ConfigError("variant.base", "unknown algorithm '" + name + "'");
}

std::string AlgorithmVariant::name() const {
  std::string out;
  switch (base) {
    case BaseAlgorithm::fedavg: out = "FedAvg"; break;
    case BaseAlgorithm::fedper: out = "FedPer"; break;
    case BaseAlgorithm::lg_fedavg: out = "LG-FedAvg"; break;
  }
  return posterior_fine_tune ? out + "-pf" : out;
}

std::string to_json_line(const RoundTrace& trace) {
  nlohmann::ordered_json j;
  j["round"] = trace.round;
  auto uploads = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < trace.uploads.size(); ++i) {
    const auto& up = trace.uploads[i];
    uploads.push_back({{"client", i},
                       {"bytes", up.bytes},
                       {"checksum", hex64(up.checksum)},
                       {"extractor", up.has_extractor},
                       {"classifier", up.has_classifier}});
  }
  j["uploads"] = std::move(uploads);
  j["posterior_trace"] = trace.posterior_trace;
  return j.dump();
}

ServerState init_server(const FederationConfig& cfg, Eigen::Index input_dim, Eigen::Index class_count) {
  RngStream rng(cfg.seed, stream_id_for({stream_tag::kInit}));
  MlpParams params = init_mlp(input_dim, cfg.hidden, class_count, rng);
  ServerState server;
  server.extractor = std::move(params.extractor);
  const Vector flat = flatten_classifier(params.classifier);
  const auto p = flat.size();
  server.classifier_posterior = GaussianPosterior::from_covariance(
      flat, Matrix::Identity(p, p) / cfg.prior.prior_precision);
  return server;
}

std::vector<ClientState> init_clients(const ServerState& server, std::vector<ClientShard> shards,
                                      Eigen::Index class_count) {
  MlpParams start;
  start.extractor = server.extractor;
  const Eigen::Index d = server.extractor.empty()
                             ? (server.classifier_posterior.dim() / class_count - 1)
                             : server.extractor.back().out_dim();
  start.classifier = unflatten_classifier(server.classifier_posterior.mean(), class_count, d);
  std::vector<ClientState> clients;
  clients.reserve(shards.size());
  for (auto& shard : shards) {
    ClientState c;
    c.shard = std::move(shard);
    c.params = start;
    clients.push_back(std::move(c));
  }
  return clients;
}

SgdConfig coupled_sgd(const FederationConfig& cfg, std::size_t shard_size) {
  SgdConfig sgd = cfg.sgd;
  sgd.local_epochs = cfg.rounds.local_epochs;
  sgd.classifier_weight_decay = cfg.prior.prior_precision / static_cast<double>(std::max<std::size_t>(1, shard_size));
  return sgd;
}

namespace {

std::vector<double> shard_weights(const std::vector<ClientState>& clients) {
  std::vector<double> w;
  w.reserve(clients.size());
  for (const auto& c : clients) w.push_back(c.shard.weight);
  return w;
}

MlpParams with_broadcast(const ServerState& server, const ClientState& client,
                         const AlgorithmVariant& variant) {
  MlpParams params = client.params;
  if (variant.shares_extractor()) params.extractor = server.extractor;
  if (variant.shares_classifier()) {
    params.classifier = unflatten_classifier(server.classifier_posterior.mean(), params.class_count(),
                                             params.feature_dim());
  }
  return params;
}

void fine_tune_clients(const ServerState& server, std::vector<ClientState>& clients,
                       const FederationConfig& cfg, std::uint64_t tag) {
  parallel_for(clients.size(), cfg.workers, [&](std::size_t i) {
    ClientState& c = clients[i];
    const MlpParams params = evaluation_params(server, c, cfg.variant);
    const GaussianPosterior base = base_posterior(server, c, cfg);
    const TargetLogDensity target(features(params, c.shard.train.inputs), c.shard.train.labels,
                                  params.class_count(), cfg.prior.prior_precision);
    RngStream rng(cfg.seed, stream_id_for({stream_tag::kFineTune, static_cast<std::uint64_t>(c.shard.client_id), tag}));
    c.flow = fine_tune(base, target, cfg.flow, rng, c.flow.empty() ? nullptr : &c.flow).stack;
  });
}

}  // namespace

RoundTrace run_round(ServerState& server, std::vector<ClientState>& clients, const FederationConfig& cfg) {
  if (clients.empty()) throw Error("run_round: no clients");
  const AlgorithmVariant& variant = cfg.variant;
  const std::size_t round = server.round;
  const bool final_round = round + 1 >= cfg.rounds.total_rounds;
  const bool fit = variant.shares_classifier() && (cfg.rounds.laplace_every_round || final_round);

  RoundTrace trace;
  trace.round = round;
  trace.uploads.resize(clients.size());
  std::vector<GaussianPosterior> uploads(clients.size());

  parallel_for(clients.size(), cfg.workers, [&](std::size_t i) {
    ClientState& c = clients[i];
    const auto id = static_cast<std::uint64_t>(c.shard.client_id);
    RngStream rng(cfg.seed, stream_id_for({stream_tag::kTrain, id, round}));
    const auto n = static_cast<std::size_t>(c.shard.train.size());
    c.params = train_local(with_broadcast(server, c, variant), c.shard.train, coupled_sgd(cfg, n), rng);

    ByteWriter payload;
    if (variant.shares_extractor()) {
      for (const auto& layer : c.params.extractor) {
        payload.put_row_major(layer.weight);
        payload.put_row_major(layer.bias);
      }
    }
    if (variant.shares_classifier()) {
      const Vector flat = flatten_classifier(c.params.classifier);
      if (fit) {
        c.posterior = fit_laplace(features(c.params, c.shard.train.inputs), c.shard.train.labels, flat,
                                  c.params.class_count(), cfg.prior);
      } else {
        c.posterior = GaussianPosterior::point_mass(flat);
      }
      uploads[i] = *c.posterior;
      payload.put_row_major(uploads[i].mean());
      if (fit) payload.put_row_major(uploads[i].covariance());
    }
    auto& up = trace.uploads[i];
    up.bytes = payload.bytes().size();
    up.checksum = fnv1a64(payload.bytes());
    up.has_extractor = variant.shares_extractor();
    up.has_classifier = variant.shares_classifier();
  });

  // Reduction in ascending client order.
  const std::vector<double> weights = shard_weights(clients);
  if (variant.shares_extractor()) {
    std::vector<std::vector<DenseLayer>> extractors;
    for (const auto& c : clients) extractors.push_back(c.params.extractor);
    server.extractor = aggregate_deterministic(std::span<const std::vector<DenseLayer>>(extractors), weights);
  }
  if (variant.shares_classifier()) server.classifier_posterior = aggregate_gaussians(uploads, weights);
  server.round = round + 1;
  trace.posterior_trace = server.classifier_posterior.covariance().trace();

  if (cfg.fine_tune_every_round && variant.posterior_fine_tune) fine_tune_clients(server, clients, cfg, server.round);
  return trace;
}

MlpParams evaluation_params(const ServerState& server, const ClientState& client,
                            const AlgorithmVariant& variant) {
  return with_broadcast(server, client, variant);
}

GaussianPosterior base_posterior(const ServerState& server, const ClientState& client,
                                 const FederationConfig& cfg) {
  if (cfg.variant.shares_classifier()) return server.classifier_posterior;
  const MlpParams params = evaluation_params(server, client, cfg.variant);
  return fit_laplace(features(params, client.shard.train.inputs), client.shard.train.labels,
                     flatten_classifier(params.classifier), params.class_count(), cfg.prior);
}

FederationOutcome train_federation(const FederationConfig& cfg, std::vector<ClientShard> shards,
                                   Eigen::Index class_count) {
  if (shards.empty()) throw Error("train_federation: no clients");
  FederationOutcome out;
  out.server = init_server(cfg, shards.front().train.input_dim(), class_count);
  out.clients = init_clients(out.server, std::move(shards), class_count);
  for (std::size_t r = 0; r < cfg.rounds.total_rounds; ++r)
    out.trace.push_back(run_round(out.server, out.clients, cfg));
  return out;
}

namespace {

std::vector<double> row_scores(const Matrix& m, double (*fn)(const Vector&)) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[i] = fn(m.row(i).transpose());
  return out;
}

double energy_t1(const Vector& logits) { return energy(logits, 1.0); }
double entropy_of_logits(const Vector& logits) { return entropy(softmax(logits)); }

// Raw per-method scores for one input set; orientation is attached later.
struct RawScores {
  std::map<std::string, std::vector<double>> values;
};

RawScores score_inputs(const MlpParams& params, const Matrix& inputs, const Matrix& logit_rows,
                       const Matrix* bayes_probs, const EvalConfig& eval, RngStream dropout_rng) {
  RawScores raw;
  raw.values["msp"] = row_scores(logit_rows, msp);
  raw.values["energy"] = row_scores(logit_rows, energy_t1);
  raw.values["entropy"] = row_scores(logit_rows, entropy_of_logits);
  raw.values["maxlogit"] = row_scores(logit_rows, maxlogit);
  auto& odin_scores = raw.values["odin"];
  auto& mcd_scores = raw.values["mcd"];
  for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
    const Vector x = inputs.row(i).transpose();
    odin_scores.push_back(odin(params, x, eval.odin));
    mcd_scores.push_back(bayes_confidence(
        mc_dropout_predict(params, x, eval.dropout_rate, eval.dropout_samples, dropout_rng)));
  }
  if (bayes_probs != nullptr) raw.values["bayes"] = row_scores(*bayes_probs, bayes_confidence);
  return raw;
}

Orientation orientation_of(const std::string& method) {
  return (method == "energy" || method == "entropy") ? Orientation::higher_is_ood : Orientation::higher_is_id;
}

}  // namespace

ExperimentResult evaluate_clients(FederationOutcome outcome, const FederationConfig& cfg,
                                  const EvalConfig& eval, std::span<const NamedDataset> ood_sets) {
  const bool pf = cfg.variant.posterior_fine_tune;
  std::vector<ClientReport> reports(outcome.clients.size());
  const ServerState& server = outcome.server;

  parallel_for(outcome.clients.size(), cfg.workers, [&](std::size_t i) {
    ClientState& c = outcome.clients[i];
    const auto id = static_cast<std::uint64_t>(c.shard.client_id);
    const MlpParams params = evaluation_params(server, c, cfg.variant);
    const Eigen::Index k = params.class_count();
    const Dataset& test = c.shard.test;
    const Matrix test_logits = logits(params, test.inputs);

    Matrix samples;
    std::optional<Matrix> test_bayes;
    if (pf) {
      const GaussianPosterior base = base_posterior(server, c, cfg);
      const TargetLogDensity target(features(params, c.shard.train.inputs), c.shard.train.labels, k,
                                    cfg.prior.prior_precision);
      RngStream ft(cfg.seed, stream_id_for({stream_tag::kFineTune, id}));
      if (!(cfg.fine_tune_every_round && cfg.rounds.total_rounds > 0))
        c.flow = fine_tune(base, target, cfg.flow, ft).stack;
      RngStream pr(cfg.seed, stream_id_for({stream_tag::kPredict, id}));
      samples = pushforward_samples(c.flow, base, static_cast<Eigen::Index>(eval.mc_samples), pr);
      test_bayes = mc_predict(samples, features(params, test.inputs), k);
    }

    PredictionBatch batch;
    batch.probabilities = pf ? *test_bayes : softmax_rows(test_logits);
    batch.labels = test.labels;
    batch.logits = test_logits;

    ClientReport& rep = reports[i];
    rep.client_id = c.shard.client_id;
    rep.weight = c.shard.weight;
    rep.accuracy = accuracy(batch);
    rep.nll = nll(batch);
    rep.reliability = reliability_diagram(batch, eval.ece_bins);
    rep.ece = ece(batch, eval.ece_bins);
    rep.primary_method = pf ? "bayes" : "msp";

    const RawScores id_raw =
        score_inputs(params, test.inputs, test_logits, pf ? &*test_bayes : nullptr, eval,
                     RngStream(cfg.seed, stream_id_for({stream_tag::kDropout, id, 0})));
    for (std::size_t j = 0; j < ood_sets.size(); ++j) {
      const Dataset& ood = ood_sets[j].data;
      const Matrix ood_logits = logits(params, ood.inputs);
      std::optional<Matrix> ood_bayes;
      if (pf) ood_bayes = mc_predict(samples, features(params, ood.inputs), k);
      const RawScores ood_raw =
          score_inputs(params, ood.inputs, ood_logits, pf ? &*ood_bayes : nullptr, eval,
                       RngStream(cfg.seed, stream_id_for({stream_tag::kDropout, id, j + 1})));
      for (const auto& [method, id_scores] : id_raw.values) {
        ScoreSet set(id_scores, ood_raw.values.at(method), orientation_of(method));
        rep.detection[ood_sets[j].name][method] = detection_metrics(set);
        rep.scores[ood_sets[j].name].emplace(method, std::move(set));
      }
    }
  });

  ExperimentResult result;
  result.variant = cfg.variant.name();
  result.seed = cfg.seed;
  result.aggregate = weighted_average(reports);
  result.clients = std::move(reports);
  result.trace = outcome.trace;
  result.outcome = std::move(outcome);
  return result;
}

ExperimentResult run_experiment(const FederationConfig& cfg, std::vector<ClientShard> shards,
                                Eigen::Index class_count, const EvalConfig& eval,
                                std::span<const NamedDataset> ood_sets) {
  return evaluate_clients(train_federation(cfg, std::move(shards), class_count), cfg, eval, ood_sets);
}

AggregateReport weighted_average(std::span<const ClientReport> clients) {
  AggregateReport agg;
  for (const auto& c : clients) {
    agg.accuracy += c.weight * c.accuracy;
    agg.nll += c.weight * c.nll;
    agg.ece += c.weight * c.ece;
    for (const auto& [set, methods] : c.detection) {
      for (const auto& [method, m] : methods) {
        auto& a = agg.detection[set][method];
        a.auroc += c.weight * m.auroc;
        a.aupr += c.weight * m.aupr;
        a.fpr95 += c.weight * m.fpr95;
      }
    }
  }
  return agg;
}

}  // namespace pfedpf
