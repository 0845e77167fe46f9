#include "pfedpf/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "pfedpf/checkpoint.hpp"
#include "pfedpf/errors.hpp"
#include "pfedpf/parallel.hpp"

namespace pfedpf {

namespace fs = std::filesystem;

namespace {

// One JSON object of the config; remembers which keys were consumed.
class Section {
 public:
  Section(const nlohmann::json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json* find(const std::string& key) {
    allowed_.insert(key);
    const auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }

  double real(const std::string& key, double fallback) {
    const auto* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_number()) throw ConfigError(name(key), "expected a number");
    const double x = v->get<double>();
    if (!std::isfinite(x)) throw ConfigError(name(key), "must be finite");
    return x;
  }

  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    const auto* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_number_integer()) throw ConfigError(name(key), "expected an integer");
    return v->get<std::int64_t>();
  }

  std::size_t count(const std::string& key, std::size_t fallback, std::size_t min = 0) {
    const std::int64_t x = integer(key, static_cast<std::int64_t>(fallback));
    if (x < static_cast<std::int64_t>(min))
      throw ConfigError(name(key), "must be >= " + std::to_string(min));
    return static_cast<std::size_t>(x);
  }

  bool flag(const std::string& key, bool fallback) {
    const auto* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_boolean()) throw ConfigError(name(key), "expected true or false");
    return v->get<bool>();
  }

  std::string text(const std::string& key, const std::string& fallback) {
    const auto* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_string()) throw ConfigError(name(key), "expected a string");
    return v->get<std::string>();
  }

  template <typename T>
  std::vector<T> list(const std::string& key, std::vector<T> fallback) {
    const auto* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_array()) throw ConfigError(name(key), "expected an array");
    std::vector<T> out;
    for (const auto& item : *v) {
      if constexpr (std::is_floating_point_v<T>) {
        if (!item.is_number()) throw ConfigError(name(key), "expected numbers");
      } else {
        if (!item.is_number_integer() || item.get<std::int64_t>() < 0)
          throw ConfigError(name(key), "expected non-negative integers");
      }
      out.push_back(item.get<T>());
    }
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : node_.items())
      if (!allowed_.contains(key)) throw ConfigError(name(key), "unknown key");
  }

 private:
  const nlohmann::json& node_;
  std::string path_;
  std::set<std::string> allowed_;
};

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, what);
}

DatasetSpec parse_dataset(Section s) {
  DatasetSpec d;
  d.kind = s.text("kind", d.kind);
  if (d.kind == "blobs") {
    d.class_count = static_cast<int>(s.count("class_count", 10, 2));
    d.per_class = static_cast<int>(s.count("per_class", 500, 1));
    d.input_dim = static_cast<int>(s.count("input_dim", 10, 1));
    d.spread = s.real("spread", d.spread);
    d.center_scale = s.real("center_scale", d.center_scale);
    require(d.spread >= 0.0, s.name("spread"), "must be >= 0");
  } else if (d.kind == "idx") {
    d.images = s.text("images", "");
    d.labels = s.text("labels", "");
    require(!d.images.empty(), s.name("images"), "is required for idx datasets");
    require(!d.labels.empty(), s.name("labels"), "is required for idx datasets");
  } else {
    throw ConfigError(s.name("kind"), "expected 'blobs' or 'idx'");
  }
  s.finish();
  return d;
}

OodSpec parse_ood(Section s) {
  OodSpec o;
  o.name = s.text("name", "");
  require(!o.name.empty(), s.name("name"), "is required");
  o.kind = s.text("kind", o.kind);
  if (o.kind == "noise") {
    o.delta = s.real("delta", o.delta);
    o.count = static_cast<int>(s.count("count", 500, 1));
    require(o.delta > 0.0, s.name("delta"), "must be > 0");
  } else if (o.kind == "idx") {
    o.images = s.text("images", "");
    o.labels = s.text("labels", "");
    require(!o.images.empty() && !o.labels.empty(), s.name("images"), "idx OOD sets need images and labels");
  } else {
    throw ConfigError(s.name("kind"), "expected 'noise' or 'idx'");
  }
  s.finish();
  return o;
}

std::vector<Eigen::Index> to_hidden(const std::vector<std::size_t>& v) {
  return {v.begin(), v.end()};
}

std::vector<std::size_t> from_hidden(const std::vector<Eigen::Index>& v) {
  return {v.begin(), v.end()};
}

std::string policy_name(CheckpointPolicy p) {
  switch (p) {
    case CheckpointPolicy::all: return "all";
    case CheckpointPolicy::server: return "server";
    case CheckpointPolicy::none: return "none";
  }
  return "all";
}

}  // namespace

ExperimentConfig parse_config(const nlohmann::json& doc) {
  ExperimentConfig cfg;
  Section root(doc, "");
  auto& fed = cfg.federation;

  if (const auto* node = root.find("dataset")) cfg.dataset = parse_dataset(Section(*node, "dataset"));

  if (const auto* node = root.find("partition")) {
    Section s(*node, "partition");
    auto& p = cfg.partition;
    p.clients = static_cast<int>(s.count("clients", 20, 1));
    p.minor_fraction = s.real("p", p.minor_fraction);
    p.train_per_client = static_cast<int>(s.count("train_per_client", 1500, 1));
    p.test_per_client = static_cast<int>(s.count("test_per_client", 500, 1));
    require(p.minor_fraction >= 0.0 && p.minor_fraction <= 1.0, s.name("p"), "must lie in [0, 1]");
    s.finish();
  }

  if (const auto* node = root.find("model")) {
    Section s(*node, "model");
    fed.hidden = to_hidden(s.list<std::size_t>("hidden", from_hidden(fed.hidden)));
    for (const auto h : fed.hidden) require(h >= 1, s.name("hidden"), "layer widths must be >= 1");
    s.finish();
  }

  if (const auto* node = root.find("variants")) {
    require(node->is_array() && !node->empty(), "variants", "expected a non-empty array");
    cfg.variants.clear();
    for (std::size_t i = 0; i < node->size(); ++i) {
      Section s((*node)[i], "variants[" + std::to_string(i) + "]");
      AlgorithmVariant v;
      const std::string base = s.text("base", "fedavg");
      try {
        v.base = parse_base_algorithm(base);
      } catch (const ConfigError&) {
        throw ConfigError(s.name("base"), "unknown algorithm '" + base + "'");
      }
      v.posterior_fine_tune = s.flag("posterior_fine_tune", false);
      s.finish();
      cfg.variants.push_back(v);
    }
  }

  if (const auto* node = root.find("rounds")) {
    Section s(*node, "rounds");
    fed.rounds.total_rounds = s.count("total", fed.rounds.total_rounds, 1);
    fed.rounds.local_epochs = s.count("local_epochs", fed.rounds.local_epochs, 1);
    fed.rounds.laplace_every_round = s.flag("laplace_every_round", true);
    s.finish();
  }

  if (const auto* node = root.find("sgd")) {
    Section s(*node, "sgd");
    fed.sgd.learning_rate = s.real("learning_rate", fed.sgd.learning_rate);
    fed.sgd.momentum = s.real("momentum", fed.sgd.momentum);
    fed.sgd.weight_decay = s.real("weight_decay", fed.sgd.weight_decay);
    fed.sgd.batch_size = s.count("batch_size", fed.sgd.batch_size, 1);
    require(fed.sgd.learning_rate > 0.0, s.name("learning_rate"), "must be > 0");
    require(fed.sgd.momentum >= 0.0 && fed.sgd.momentum < 1.0, s.name("momentum"), "must lie in [0, 1)");
    require(fed.sgd.weight_decay >= 0.0, s.name("weight_decay"), "must be >= 0");
    s.finish();
  }

  if (const auto* node = root.find("laplace")) {
    Section s(*node, "laplace");
    fed.prior.prior_precision = s.real("prior_precision", fed.prior.prior_precision);
    cfg.eval.mc_samples = s.count("mc_samples", cfg.eval.mc_samples, 1);
    cfg.gamma_sensitivity = s.list<double>("sensitivity", {});
    require(fed.prior.prior_precision > 0.0, s.name("prior_precision"), "must be > 0");
    for (const double g : cfg.gamma_sensitivity) require(g > 0.0, s.name("sensitivity"), "values must be > 0");
    s.finish();
  }

  if (const auto* node = root.find("flow")) {
    Section s(*node, "flow");
    fed.flow.flow_length = s.count("length", fed.flow.flow_length);
    fed.flow.steps = s.count("steps", fed.flow.steps, 1);
    fed.flow.mc_batch = s.count("mc_batch", fed.flow.mc_batch, 1);
    fed.flow.step_size = s.real("step_size", fed.flow.step_size);
    fed.fine_tune_every_round = s.flag("per_round", false);
    require(fed.flow.step_size > 0.0, s.name("step_size"), "must be > 0");
    s.finish();
  }

  if (const auto* node = root.find("eval")) {
    Section s(*node, "eval");
    auto& e = cfg.eval;
    e.odin.temperature = s.real("odin_temperature", e.odin.temperature);
    e.odin.epsilon = s.real("odin_epsilon", e.odin.epsilon);
    e.dropout_rate = s.real("dropout_rate", e.dropout_rate);
    e.dropout_samples = s.count("dropout_samples", e.dropout_samples, 1);
    e.ece_bins = s.count("ece_bins", e.ece_bins, 1);
    require(e.odin.temperature > 0.0, s.name("odin_temperature"), "must be > 0");
    require(e.dropout_rate >= 0.0 && e.dropout_rate < 1.0, s.name("dropout_rate"), "must lie in [0, 1)");
    s.finish();
  }

  if (const auto* node = root.find("ood")) {
    require(node->is_array(), "ood", "expected an array");
    cfg.ood.clear();
    std::set<std::string> names;
    for (std::size_t i = 0; i < node->size(); ++i) {
      cfg.ood.push_back(parse_ood(Section((*node)[i], "ood[" + std::to_string(i) + "]")));
      require(names.insert(cfg.ood.back().name).second, "ood[" + std::to_string(i) + "].name",
              "duplicate OOD set name");
    }
  }

  cfg.seeds = root.list<std::uint64_t>("seeds", cfg.seeds);
  require(!cfg.seeds.empty(), "seeds", "needs at least one seed");

  if (const auto* node = root.find("ablation")) {
    Section s(*node, "ablation");
    cfg.flow_lengths = s.list<std::size_t>("flow_lengths", cfg.flow_lengths);
    require(!cfg.flow_lengths.empty(), s.name("flow_lengths"), "needs at least one length");
    s.finish();
  }

  if (const auto* node = root.find("probe")) {
    Section s(*node, "probe");
    auto& p = cfg.probe;
    p.per_class = static_cast<int>(s.count("per_class", static_cast<std::size_t>(p.per_class), 1));
    p.spread = s.real("spread", p.spread);
    p.input_dim = static_cast<int>(s.count("input_dim", static_cast<std::size_t>(p.input_dim), 1));
    p.hidden = to_hidden(s.list<std::size_t>("hidden", from_hidden(p.hidden)));
    p.epochs = s.count("epochs", p.epochs, 1);
    p.learning_rate = s.real("learning_rate", p.learning_rate);
    p.batch_size = s.count("batch_size", p.batch_size, 1);
    p.directions = s.count("directions", p.directions, 1);
    p.deltas = s.list<double>("deltas", p.deltas);
    p.options.mc_samples = s.count("mc_samples", p.options.mc_samples, 1);
    p.options.jacobian_samples = s.count("jacobian_samples", p.options.jacobian_samples, 1);
    p.options.far_delta = s.real("far_delta", p.options.far_delta);
    const std::size_t classes = s.count("class_count", 2);
    require(classes == 2, s.name("class_count"), "the probe needs a binary problem");
    require(p.learning_rate > 0.0, s.name("learning_rate"), "must be > 0");
    require(p.options.far_delta > 0.0, s.name("far_delta"), "must be > 0");
    s.finish();
  }

  const std::string policy = root.text("checkpoints", "all");
  if (policy == "all") {
    cfg.checkpoints = CheckpointPolicy::all;
  } else if (policy == "server") {
    cfg.checkpoints = CheckpointPolicy::server;
  } else if (policy == "none") {
    cfg.checkpoints = CheckpointPolicy::none;
  } else {
    throw ConfigError("checkpoints", "expected 'all', 'server' or 'none'");
  }
  cfg.output_dir = root.text("output_dir", cfg.output_dir);
  root.finish();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }
  ExperimentConfig cfg = parse_config(doc);
  const fs::path base = path.parent_path();
  auto resolve = [&base](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(cfg.dataset.images);
  resolve(cfg.dataset.labels);
  for (auto& o : cfg.ood) {
    resolve(o.images);
    resolve(o.labels);
  }
  return cfg;
}

Json config_to_json(const ExperimentConfig& cfg) {
  const auto& fed = cfg.federation;
  Json j;
  Json ds;
  ds["kind"] = cfg.dataset.kind;
  if (cfg.dataset.kind == "blobs") {
    ds["class_count"] = cfg.dataset.class_count;
    ds["per_class"] = cfg.dataset.per_class;
    ds["input_dim"] = cfg.dataset.input_dim;
    ds["spread"] = cfg.dataset.spread;
    ds["center_scale"] = cfg.dataset.center_scale;
  } else {
    ds["images"] = cfg.dataset.images;
    ds["labels"] = cfg.dataset.labels;
  }
  j["dataset"] = ds;
  j["partition"] = {{"clients", cfg.partition.clients},
                    {"p", cfg.partition.minor_fraction},
                    {"train_per_client", cfg.partition.train_per_client},
                    {"test_per_client", cfg.partition.test_per_client}};
  j["model"] = {{"hidden", from_hidden(fed.hidden)}};
  Json variants = Json::array();
  for (const auto& v : cfg.variants)
    variants.push_back({{"base", to_string(v.base)}, {"posterior_fine_tune", v.posterior_fine_tune}});
  j["variants"] = variants;
  j["rounds"] = {{"total", fed.rounds.total_rounds},
                 {"local_epochs", fed.rounds.local_epochs},
                 {"laplace_every_round", fed.rounds.laplace_every_round}};
  j["sgd"] = {{"learning_rate", fed.sgd.learning_rate},
              {"momentum", fed.sgd.momentum},
              {"weight_decay", fed.sgd.weight_decay},
              {"batch_size", fed.sgd.batch_size}};
  j["laplace"] = {{"prior_precision", fed.prior.prior_precision},
                  {"mc_samples", cfg.eval.mc_samples},
                  {"sensitivity", cfg.gamma_sensitivity}};
  j["flow"] = {{"length", fed.flow.flow_length},
               {"steps", fed.flow.steps},
               {"mc_batch", fed.flow.mc_batch},
               {"step_size", fed.flow.step_size},
               {"per_round", fed.fine_tune_every_round}};
  j["eval"] = {{"odin_temperature", cfg.eval.odin.temperature},
               {"odin_epsilon", cfg.eval.odin.epsilon},
               {"dropout_rate", cfg.eval.dropout_rate},
               {"dropout_samples", cfg.eval.dropout_samples},
               {"ece_bins", cfg.eval.ece_bins}};
  Json ood = Json::array();
  for (const auto& o : cfg.ood) {
    Json e;
    e["name"] = o.name;
    e["kind"] = o.kind;
    if (o.kind == "noise") {
      e["delta"] = o.delta;
      e["count"] = o.count;
    } else {
      e["images"] = o.images;
      e["labels"] = o.labels;
    }
    ood.push_back(e);
  }
  j["ood"] = ood;
  j["seeds"] = cfg.seeds;
  j["ablation"] = {{"flow_lengths", cfg.flow_lengths}};
  const auto& p = cfg.probe;
  j["probe"] = {{"per_class", p.per_class},
                {"spread", p.spread},
                {"input_dim", p.input_dim},
                {"hidden", from_hidden(p.hidden)},
                {"epochs", p.epochs},
                {"learning_rate", p.learning_rate},
                {"batch_size", p.batch_size},
                {"directions", p.directions},
                {"deltas", p.deltas},
                {"mc_samples", p.options.mc_samples},
                {"jacobian_samples", p.options.jacobian_samples},
                {"far_delta", p.options.far_delta}};
  j["checkpoints"] = policy_name(cfg.checkpoints);
  return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string canonical = config_to_json(cfg).dump();
  return hex64(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(canonical.data()), canonical.size())));
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("seeds", "expected a comma-separated list of non-negative integers");
    seeds.push_back(std::stoull(item));
  }
  if (seeds.empty()) throw ConfigError("seeds", "needs at least one seed");
  return seeds;
}

SeedData build_seed_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  Dataset pool;
  if (cfg.dataset.kind == "blobs") {
    RngStream rng(seed, stream_id_for({stream_tag::kData}));
    const auto& d = cfg.dataset;
    pool = gen_blobs(d.class_count, d.per_class, d.input_dim, d.spread, rng, d.center_scale);
  } else {
    pool = load_idx(cfg.dataset.images, cfg.dataset.labels);
  }
  SeedData out;
  out.class_count = pool.class_count;
  RngStream part(seed, stream_id_for({stream_tag::kPartition}));
  out.shards = partition(pool, cfg.partition, part);
  for (std::size_t j = 0; j < cfg.ood.size(); ++j) {
    const auto& spec = cfg.ood[j];
    NamedDataset set{spec.name, {}};
    if (spec.kind == "noise") {
      RngStream rng(seed, stream_id_for({stream_tag::kOod, j}));
      set.data = gen_noise({spec.delta, spec.count, static_cast<int>(pool.input_dim())}, rng);
    } else {
      set.data = load_idx(spec.images, spec.labels);
      set.data.labels.clear();
      if (set.data.input_dim() != pool.input_dim())
        throw ConfigError("ood[" + std::to_string(j) + "].images", "input dimension differs from the dataset");
    }
    out.ood.push_back(std::move(set));
  }
  return out;
}

std::vector<ExperimentResult> run_seed(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t workers) {
  const SeedData data = build_seed_data(cfg, seed);
  std::map<std::pair<int, bool>, FederationOutcome> trained;
  std::vector<ExperimentResult> results;
  for (const auto& variant : cfg.variants) {
    FederationConfig fed = cfg.federation;
    fed.variant = variant;
    fed.seed = seed;
    fed.workers = workers;
    // Post-hoc fine-tuning leaves training untouched, so pf and non-pf share it.
    const bool own = variant.posterior_fine_tune && fed.fine_tune_every_round;
    const auto key = std::make_pair(static_cast<int>(variant.base), own);
    auto it = trained.find(key);
    if (it == trained.end()) {
      FederationConfig train_cfg = fed;
      if (!own) train_cfg.variant.posterior_fine_tune = false;
      it = trained.emplace(key, train_federation(train_cfg, data.shards, data.class_count)).first;
    }
    results.push_back(evaluate_clients(it->second, fed, cfg.eval, data.ood));
  }
  return results;
}

DetectionMetrics primary_detection(const AggregateReport& agg, const std::string& primary_method) {
  DetectionMetrics out;
  if (agg.detection.empty()) return out;
  for (const auto& [set, methods] : agg.detection) {
    const auto& m = methods.at(primary_method);
    out.auroc += m.auroc;
    out.aupr += m.aupr;
    out.fpr95 += m.fpr95;
  }
  const double n = static_cast<double>(agg.detection.size());
  out.auroc /= n;
  out.aupr /= n;
  out.fpr95 /= n;
  return out;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, std::size_t workers) {
  std::vector<AblationRow> rows;
  for (const auto seed : cfg.seeds) {
    const SeedData data = build_seed_data(cfg, seed);
    FederationConfig fed = cfg.federation;
    fed.variant = {BaseAlgorithm::fedavg, true};
    fed.seed = seed;
    fed.workers = workers;
    fed.fine_tune_every_round = false;
    FederationConfig train_cfg = fed;
    train_cfg.variant.posterior_fine_tune = false;
    const FederationOutcome outcome = train_federation(train_cfg, data.shards, data.class_count);
    for (const auto length : cfg.flow_lengths) {
      fed.flow.flow_length = length;
      const ExperimentResult r = evaluate_clients(outcome, fed, cfg.eval, data.ood);
      const DetectionMetrics det = primary_detection(r.aggregate, "bayes");
      rows.push_back({seed, length, r.aggregate.accuracy, r.aggregate.ece, r.aggregate.nll, det.fpr95, det.auroc});
    }
  }
  return rows;
}

std::vector<GammaRow> run_gamma_sensitivity(const ExperimentConfig& cfg, std::size_t workers) {
  std::vector<GammaRow> rows;
  for (const auto seed : cfg.seeds) {
    const SeedData data = build_seed_data(cfg, seed);
    for (const double gamma : cfg.gamma_sensitivity) {
      FederationConfig fed = cfg.federation;
      fed.variant = {BaseAlgorithm::fedavg, true};
      fed.seed = seed;
      fed.workers = workers;
      fed.prior.prior_precision = gamma;
      const ExperimentResult r = run_experiment(fed, data.shards, data.class_count, cfg.eval, data.ood);
      rows.push_back({seed, gamma, r.aggregate.accuracy, r.aggregate.ece, r.aggregate.nll,
                      primary_detection(r.aggregate, "bayes").auroc});
    }
  }
  return rows;
}

ProbeResult run_probe(const ExperimentConfig& cfg, std::uint64_t seed) {
  const ProbeSpec& spec = cfg.probe;
  const double gamma = cfg.federation.prior.prior_precision;
  auto stream = [seed](std::uint64_t part) { return RngStream(seed, stream_id_for({stream_tag::kProbe, part})); };

  RngStream data_rng = stream(1);
  const Dataset data = gen_blobs(2, spec.per_class, spec.input_dim, spec.spread, data_rng);
  RngStream init_rng = stream(2);
  MlpParams params = init_mlp(data.input_dim(), spec.hidden, 2, init_rng);
  SgdConfig sgd = cfg.federation.sgd;
  sgd.learning_rate = spec.learning_rate;
  sgd.batch_size = spec.batch_size;
  sgd.local_epochs = spec.epochs;
  sgd.classifier_weight_decay = gamma / static_cast<double>(data.size());
  RngStream train_rng = stream(3);
  params = train_local(params, data, sgd, train_rng);

  ProbeResult out;
  out.seed = seed;
  const Matrix feats = features(params, data.inputs);
  {
    PredictionBatch batch{softmax_rows(classifier_logits(params.classifier, feats)), data.labels, std::nullopt};
    out.train_accuracy = accuracy(batch);
  }
  const GaussianPosterior post =
      fit_laplace(feats, data.labels, flatten_classifier(params.classifier), 2, cfg.federation.prior);
  const TargetLogDensity target(feats, data.labels, 2, gamma);
  RngStream flow_rng = stream(4);
  const FlowStack flow = fine_tune(post, target, cfg.federation.flow, flow_rng).stack;
  RngStream jac_rng = stream(5);
  out.flow_s_max = flow_spectral_max(flow, post, spec.options.jacobian_samples, jac_rng);
  out.lambda_min = spectral_summary(post.covariance()).min_eigenvalue;

  RngStream dir_rng = stream(6);
  const RngStream draws = stream(7);
  for (std::size_t i = 0; i < spec.directions; ++i) {
    Vector dir(data.input_dim());
    for (Eigen::Index c = 0; c < dir.size(); ++c) dir(c) = dir_rng.normal();
    dir /= dir.norm();
    out.directions.push_back(
        asymptotic_confidence_probe(params, post, &flow, out.flow_s_max, dir, spec.deltas, spec.options, draws));
  }
  return out;
}

namespace {

Json metrics_json(const DetectionMetrics& m) {
  return {{"auroc", m.auroc}, {"aupr", m.aupr}, {"fpr95", m.fpr95}};
}

Json detection_json(const std::map<std::string, std::map<std::string, DetectionMetrics>>& det) {
  Json j = Json::object();
  for (const auto& [set, methods] : det) {
    Json inner = Json::object();
    for (const auto& [method, m] : methods) inner[method] = metrics_json(m);
    j[set] = inner;
  }
  return j;
}

Json header_json(const ExperimentConfig& cfg) {
  Json j;
  j["config_hash"] = config_hash(cfg);
  j["config"] = config_to_json(cfg);
  return j;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (const double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string safe_name(std::string s) {
  for (auto& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  return s;
}

std::string run_tag(const ExperimentResult& r) { return safe_name(r.variant) + "_seed" + std::to_string(r.seed); }

// CSV tables start with a "# config_hash=" comment line.
std::ofstream open_out(const fs::path& path, const std::string& hash) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "# config_hash=" << hash << '\n';
  return out;
}

ReliabilityDiagram pooled_reliability(const ExperimentResult& r) {
  ReliabilityDiagram pooled;
  for (const auto& c : r.clients) {
    const auto& d = c.reliability;
    if (pooled.edges.empty()) {
      pooled.edges = d.edges;
      pooled.confidence.assign(d.count.size(), 0.0);
      pooled.accuracy.assign(d.count.size(), 0.0);
      pooled.count.assign(d.count.size(), 0);
    }
    for (std::size_t b = 0; b < d.count.size(); ++b) {
      pooled.confidence[b] += d.confidence[b] * static_cast<double>(d.count[b]);
      pooled.accuracy[b] += d.accuracy[b] * static_cast<double>(d.count[b]);
      pooled.count[b] += d.count[b];
    }
  }
  for (std::size_t b = 0; b < pooled.count.size(); ++b) {
    if (pooled.count[b] == 0) continue;
    pooled.confidence[b] /= static_cast<double>(pooled.count[b]);
    pooled.accuracy[b] /= static_cast<double>(pooled.count[b]);
  }
  return pooled;
}

// Returns one manifest entry per file written.
Json write_checkpoints(const ExperimentConfig& cfg, const ExperimentResult& r, const fs::path& dir) {
  Json files = Json::array();
  if (cfg.checkpoints == CheckpointPolicy::none) return files;
  auto put = [&](const std::string& name, const std::vector<std::uint8_t>& bytes) {
    write_bytes(dir / name, bytes);
    files.push_back({{"file", name}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a64(bytes))}});
  };
  const auto& server = r.outcome.server;
  const auto tag = run_tag(r);
  const double gamma = cfg.federation.prior.prior_precision;
  if (!r.outcome.clients.empty()) {
    const AlgorithmVariant variant{BaseAlgorithm::fedavg, false};
    put(tag + "_server_model.bin", encode_model(evaluation_params(server, r.outcome.clients.front(), variant)));
  }
  put(tag + "_server_posterior.bin", encode_posterior(server.classifier_posterior, gamma));
  if (cfg.checkpoints != CheckpointPolicy::all) return files;

  FederationConfig fed = cfg.federation;
  for (const auto& v : cfg.variants)
    if (v.name() == r.variant) fed.variant = v;
  for (const auto& c : r.outcome.clients) {
    const std::string base = tag + "_client" + std::to_string(c.shard.client_id);
    put(base + "_model.bin", encode_model(evaluation_params(server, c, fed.variant)));
    if (fed.variant.posterior_fine_tune)
      put(base + "_posterior.bin", encode_posterior(base_posterior(server, c, fed), gamma, &c.flow));
  }
  return files;
}

}  // namespace

Json report_json(const ExperimentConfig& cfg, std::span<const ExperimentResult> runs) {
  Json j = header_json(cfg);
  Json list = Json::array();
  std::map<std::string, std::vector<const ExperimentResult*>> by_variant;
  std::vector<std::string> order;
  for (const auto& r : runs) {
    const std::string primary = r.clients.empty() ? "msp" : r.clients.front().primary_method;
    Json run;
    run["seed"] = r.seed;
    run["variant"] = r.variant;
    run["rounds"] = r.trace.size();
    Json agg;
    agg["accuracy"] = r.aggregate.accuracy;
    agg["nll"] = r.aggregate.nll;
    agg["ece"] = r.aggregate.ece;
    agg["primary_method"] = primary;
    agg["primary"] = metrics_json(primary_detection(r.aggregate, primary));
    agg["detection"] = detection_json(r.aggregate.detection);
    run["aggregate"] = agg;
    Json clients = Json::array();
    for (const auto& c : r.clients) {
      clients.push_back({{"client_id", c.client_id},
                         {"weight", c.weight},
                         {"accuracy", c.accuracy},
                         {"nll", c.nll},
                         {"ece", c.ece},
                         {"primary_method", c.primary_method},
                         {"detection", detection_json(c.detection)}});
    }
    run["clients"] = clients;
    list.push_back(run);
    if (!by_variant.contains(r.variant)) order.push_back(r.variant);
    by_variant[r.variant].push_back(&r);
  }
  j["runs"] = list;

  Json summary = Json::array();
  for (const auto& name : order) {
    std::vector<double> acc, nll_v, ece_v, auroc_v, fpr_v;
    for (const auto* r : by_variant[name]) {
      const std::string primary = r->clients.empty() ? "msp" : r->clients.front().primary_method;
      const DetectionMetrics det = primary_detection(r->aggregate, primary);
      acc.push_back(r->aggregate.accuracy);
      nll_v.push_back(r->aggregate.nll);
      ece_v.push_back(r->aggregate.ece);
      auroc_v.push_back(det.auroc);
      fpr_v.push_back(det.fpr95);
    }
    summary.push_back({{"variant", name},
                       {"seeds", by_variant[name].size()},
                       {"accuracy", mean(acc)},
                       {"nll", mean(nll_v)},
                       {"ece", mean(ece_v)},
                       {"auroc", mean(auroc_v)},
                       {"fpr95", mean(fpr_v)}});
  }
  j["summary"] = summary;
  return j;
}

Json ablation_json(const ExperimentConfig& cfg, std::span<const AblationRow> rows) {
  Json j = header_json(cfg);
  Json list = Json::array();
  for (const auto& r : rows) {
    list.push_back({{"seed", r.seed},
                    {"flow_length", r.flow_length},
                    {"accuracy", r.accuracy},
                    {"ece", r.ece},
                    {"nll", r.nll},
                    {"fpr95", r.fpr95},
                    {"auroc", r.auroc}});
  }
  j["ablation"] = list;
  Json summary = Json::array();
  for (const auto length : cfg.flow_lengths) {
    std::vector<double> acc, ece_v, nll_v, fpr_v, auroc_v;
    for (const auto& r : rows) {
      if (r.flow_length != length) continue;
      acc.push_back(r.accuracy);
      ece_v.push_back(r.ece);
      nll_v.push_back(r.nll);
      fpr_v.push_back(r.fpr95);
      auroc_v.push_back(r.auroc);
    }
    summary.push_back({{"flow_length", length},
                       {"label", length == 0 ? std::string("LA") : "LA-NF-" + std::to_string(length)},
                       {"accuracy", mean(acc)},
                       {"ece", mean(ece_v)},
                       {"nll", mean(nll_v)},
                       {"fpr95", mean(fpr_v)},
                       {"auroc", mean(auroc_v)}});
  }
  j["summary"] = summary;
  return j;
}

Json probe_json(const ExperimentConfig& cfg, std::span<const ProbeResult> results) {
  Json j = header_json(cfg);
  Json list = Json::array();
  for (const auto& res : results) {
    Json r;
    r["seed"] = res.seed;
    r["train_accuracy"] = res.train_accuracy;
    r["lambda_min"] = res.lambda_min;
    r["flow_s_max"] = res.flow_s_max;
    double laplace_excess = -1.0, flow_excess = -1.0, map_min = 1.0;
    Json dirs = Json::array();
    for (const auto& d : res.directions) {
      dirs.push_back({{"deltas", d.deltas},
                      {"map", d.map},
                      {"laplace", d.laplace},
                      {"flow", d.flow},
                      {"identity_flow", d.identity_flow},
                      {"probit", d.probit},
                      {"cap_argument", d.cap_argument},
                      {"laplace_cap", d.laplace_cap},
                      {"flow_cap", d.flow_cap},
                      {"norm_mu", d.norm_mu},
                      {"norm_u", d.norm_u},
                      {"s_min_jt", d.s_min_jt},
                      {"bound_mu", d.bound_mu},
                      {"bound_u", d.bound_u}});
      if (d.deltas.empty()) continue;
      map_min = std::min(map_min, d.map.back());
      laplace_excess = std::max(laplace_excess, d.laplace.back() - d.laplace_cap);
      if (!d.flow.empty()) flow_excess = std::max(flow_excess, d.flow.back() - d.flow_cap);
    }
    r["far_map_min"] = map_min;
    r["far_laplace_excess_max"] = laplace_excess;
    r["far_flow_excess_max"] = flow_excess;
    r["directions"] = dirs;
    list.push_back(r);
  }
  j["probe"] = list;
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void cli_run(const ExperimentConfig& cfg, const fs::path& out, std::size_t workers) {
  const auto start = std::chrono::steady_clock::now();
  const std::string hash = config_hash(cfg);
  std::vector<ExperimentResult> runs;
  for (const auto seed : cfg.seeds) {
    auto seed_runs = run_seed(cfg, seed, workers);
    for (auto& r : seed_runs) runs.push_back(std::move(r));
  }

  std::string trace;
  for (const auto& r : runs) {
    for (const auto& t : r.trace) {
      Json line;
      line["config_hash"] = hash;
      line["seed"] = r.seed;
      line["variant"] = r.variant;
      const Json round = Json::parse(to_json_line(t));
      for (const auto& [k, v] : round.items()) line[k] = v;
      trace += line.dump() + "\n";
    }
  }
  write_text(out / "trace.jsonl", trace);

  {
    auto f = open_out(out / "tables" / "summary.csv", hash);
    f << "seed,variant,accuracy,nll,ece\n";
    for (const auto& r : runs)
      f << r.seed << ',' << r.variant << ',' << r.aggregate.accuracy << ',' << r.aggregate.nll << ','
        << r.aggregate.ece << '\n';
  }
  {
    auto f = open_out(out / "tables" / "detection.csv", hash);
    f << "seed,variant,ood_set,method,auroc,aupr,fpr95\n";
    for (const auto& r : runs)
      for (const auto& [set, methods] : r.aggregate.detection)
        for (const auto& [method, m] : methods)
          f << r.seed << ',' << r.variant << ',' << set << ',' << method << ',' << m.auroc << ',' << m.aupr
            << ',' << m.fpr95 << '\n';
  }
  {
    auto f = open_out(out / "tables" / "clients.csv", hash);
    f << "seed,variant,client,weight,accuracy,nll,ece\n";
    for (const auto& r : runs)
      for (const auto& c : r.clients)
        f << r.seed << ',' << r.variant << ',' << c.client_id << ',' << c.weight << ',' << c.accuracy << ','
          << c.nll << ',' << c.ece << '\n';
  }
  Json checkpoint_files = Json::array();
  for (const auto& r : runs) {
    auto f = open_out(out / "tables" / ("reliability_" + run_tag(r) + ".csv"), hash);
    write_reliability_csv(f, pooled_reliability(r));
    for (const auto& spec : cfg.ood) {
      auto s = open_out(out / "tables" / ("scores_" + run_tag(r) + "_" + safe_name(spec.name) + ".csv"), hash);
      bool header = true;
      for (const auto& c : r.clients) {
        for (const auto& [method, set] : c.scores.at(spec.name)) {
          write_scores_csv(s, method, set, header);
          header = false;
        }
      }
    }
    for (auto& entry : write_checkpoints(cfg, r, out / "checkpoints")) checkpoint_files.push_back(std::move(entry));
  }
  if (!checkpoint_files.empty()) {
    Json manifest;
    manifest["config_hash"] = hash;
    manifest["files"] = checkpoint_files;
    write_text(out / "checkpoints" / "manifest.json", manifest.dump(2) + "\n");
  }

  Json report = report_json(cfg, runs);
  if (!cfg.gamma_sensitivity.empty()) {
    const auto rows = run_gamma_sensitivity(cfg, workers);
    auto f = open_out(out / "tables" / "gamma_sensitivity.csv", hash);
    f << "seed,prior_precision,accuracy,ece,nll,auroc\n";
    Json list = Json::array();
    for (const auto& g : rows) {
      f << g.seed << ',' << g.prior_precision << ',' << g.accuracy << ',' << g.ece << ',' << g.nll << ','
        << g.auroc << '\n';
      list.push_back({{"seed", g.seed},
                      {"prior_precision", g.prior_precision},
                      {"accuracy", g.accuracy},
                      {"ece", g.ece},
                      {"nll", g.nll},
                      {"auroc", g.auroc}});
    }
    report["gamma_sensitivity"] = list;
  }
  write_text(out / "report.json", report.dump(2) + "\n");

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(out / "timing.json",
             Json{{"config_hash", hash}, {"runtime_seconds", seconds}, {"workers", workers}}.dump(2) + "\n");
}

void cli_ablate(const ExperimentConfig& cfg, const fs::path& out, std::size_t workers) {
  const std::string hash = config_hash(cfg);
  const auto rows = run_ablation(cfg, workers);
  auto f = open_out(out / "tables" / "ablation.csv", hash);
  f << "seed,flow_length,accuracy,ece,nll,fpr95,auroc\n";
  for (const auto& r : rows)
    f << r.seed << ',' << r.flow_length << ',' << r.accuracy << ',' << r.ece << ',' << r.nll << ',' << r.fpr95
      << ',' << r.auroc << '\n';
  write_text(out / "report.json", ablation_json(cfg, rows).dump(2) + "\n");
}

void cli_probe(const ExperimentConfig& cfg, const fs::path& out) {
  const std::string hash = config_hash(cfg);
  std::vector<ProbeResult> results;
  for (const auto seed : cfg.seeds) results.push_back(run_probe(cfg, seed));
  auto f = open_out(out / "tables" / "probe.csv", hash);
  f << "seed,direction,delta,map,laplace,flow,identity_flow,probit,laplace_cap,flow_cap\n";
  auto g = open_out(out / "tables" / "probe_caps.csv", hash);
  g << "seed,direction,cap_argument,laplace_cap,flow_cap,norm_mu,norm_u,s_min_jt,lambda_min,flow_s_max,bound_mu,"
       "bound_u\n";
  for (const auto& res : results) {
    for (std::size_t i = 0; i < res.directions.size(); ++i) {
      const auto& d = res.directions[i];
      for (std::size_t k = 0; k < d.deltas.size(); ++k) {
        f << res.seed << ',' << i << ',' << d.deltas[k] << ',' << d.map[k] << ',' << d.laplace[k] << ','
          << (d.flow.empty() ? d.laplace[k] : d.flow[k]) << ',' << d.identity_flow[k] << ',' << d.probit[k] << ',' << d.laplace_cap
          << ',' << d.flow_cap << '\n';
      }
      g << res.seed << ',' << i << ',' << d.cap_argument << ',' << d.laplace_cap << ',' << d.flow_cap << ','
        << d.norm_mu << ',' << d.norm_u << ',' << d.s_min_jt << ',' << res.lambda_min << ',' << res.flow_s_max
        << ',' << d.bound_mu << ',' << d.bound_u << '\n';
    }
  }
  write_text(out / "report.json", probe_json(cfg, results).dump(2) + "\n");
}

void cli_gen_data(const ExperimentConfig& cfg, const fs::path& out) {
  if (cfg.dataset.kind != "blobs") throw ConfigError("dataset.kind", "gen-data needs a blobs dataset");
  const auto& d = cfg.dataset;
  const std::uint64_t seed = cfg.seeds.front();
  RngStream rng(seed, stream_id_for({stream_tag::kData}));
  const Dataset data = gen_blobs(d.class_count, d.per_class, d.input_dim, d.spread, rng, d.center_scale);

  // Affine map onto [0, 255], then round to bytes.
  const double lo = data.inputs.minCoeff();
  const double hi = data.inputs.maxCoeff();
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  IdxImages images;
  images.count = static_cast<std::uint32_t>(data.size());
  images.rows = 1;
  images.cols = static_cast<std::uint32_t>(data.input_dim());
  images.pixels.reserve(static_cast<std::size_t>(data.inputs.size()));
  for (Eigen::Index i = 0; i < data.size(); ++i)
    for (Eigen::Index c = 0; c < data.input_dim(); ++c)
      images.pixels.push_back(static_cast<std::uint8_t>(std::lround((data.inputs(i, c) - lo) * scale)));
  std::vector<std::uint8_t> labels(data.labels.begin(), data.labels.end());

  const auto image_bytes = encode_idx_images(images);
  const auto label_bytes = encode_idx_labels(labels);
  const fs::path dir = out / "data";
  write_bytes(dir / "blobs-images-idx3-ubyte", image_bytes);
  write_bytes(dir / "blobs-labels-idx1-ubyte", label_bytes);
  Json manifest;
  manifest["config_hash"] = config_hash(cfg);
  manifest["seed"] = seed;
  manifest["count"] = images.count;
  manifest["class_count"] = d.class_count;
  manifest["input_dim"] = d.input_dim;
  manifest["scale"] = {{"min", lo}, {"max", hi}};
  manifest["images"] = {{"path", "blobs-images-idx3-ubyte"}, {"fnv1a64", hex64(fnv1a64(image_bytes))}};
  manifest["labels"] = {{"path", "blobs-labels-idx1-ubyte"}, {"fnv1a64", hex64(fnv1a64(label_bytes))}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Json merge_reports(std::span<const Json> reports) {
  if (reports.empty()) throw Error("merge: no reports");
  Json merged = reports.front();
  merged.erase("summary");
  const auto hash = merged.value("config_hash", std::string());
  if (hash.empty()) throw ConfigError("config_hash", "report has no config hash");
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const auto other = reports[i].value("config_hash", std::string());
    if (other != hash) {
      throw ConfigError("config_hash", "report " + std::to_string(i) + " was produced by config " + other +
                                           ", expected " + hash);
    }
    if (reports[i].contains("runs"))
      for (const auto& run : reports[i]["runs"]) merged["runs"].push_back(run);
  }
  return merged;
}

}  // namespace pfedpf
