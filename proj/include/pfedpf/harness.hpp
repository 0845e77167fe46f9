#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfedpf/federation.hpp"
#include "pfedpf/probe.hpp"

namespace pfedpf {

using Json = nlohmann::ordered_json;

struct DatasetSpec {
  std::string kind = "blobs";  // blobs | idx
  int class_count = 10;
  int per_class = 500;
  int input_dim = 10;
  double spread = 0.7;
  double center_scale = 2.0;
  std::string images;
  std::string labels;
};

struct OodSpec {
  std::string name = "noise";
  std::string kind = "noise";  // noise | idx
  double delta = 2000.0;
  int count = 500;
  std::string images;
  std::string labels;
};

struct ProbeSpec {
  int per_class = 100;
  double spread = 0.5;
  int input_dim = 2;
  std::vector<Eigen::Index> hidden{16, 16};
  std::size_t epochs = 200;
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  std::size_t directions = 20;
  std::vector<double> deltas{1e2, 1e3, 1e4};
  ProbeOptions options;
};

enum class CheckpointPolicy { all, server, none };

struct ExperimentConfig {
  DatasetSpec dataset;
  PartitionConfig partition;
  std::vector<AlgorithmVariant> variants{{BaseAlgorithm::fedavg, false}, {BaseAlgorithm::fedavg, true}};
  FederationConfig federation;  // variant, seed and workers are filled per run
  EvalConfig eval;
  std::vector<OodSpec> ood{OodSpec{}};
  std::vector<std::uint64_t> seeds{0};
  std::vector<double> gamma_sensitivity;
  std::vector<std::size_t> flow_lengths{0, 1, 3, 5, 10, 20};
  ProbeSpec probe;
  CheckpointPolicy checkpoints = CheckpointPolicy::all;
  std::string output_dir = "out";
};

// Unknown keys and invalid values raise ConfigError naming the key.
ExperimentConfig parse_config(const nlohmann::json& doc);
// Relative data paths are resolved against the config file's directory.
ExperimentConfig load_config(const std::filesystem::path& path);

// Everything that determines results; output_dir is left out.
Json config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

std::vector<std::uint64_t> parse_seed_list(const std::string& text);

struct SeedData {
  std::vector<ClientShard> shards;
  Eigen::Index class_count = 0;
  std::vector<NamedDataset> ood;
};

SeedData build_seed_data(const ExperimentConfig& cfg, std::uint64_t seed);

// Every configured variant for one seed. Variants that differ only in the
// fine-tune flag share one federation when fine-tuning runs post hoc.
std::vector<ExperimentResult> run_seed(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t workers);

struct AblationRow {
  std::uint64_t seed = 0;
  std::size_t flow_length = 0;
  double accuracy = 0.0;
  double ece = 0.0;
  double nll = 0.0;
  double fpr95 = 0.0;  // primary score, mean over OOD sets
  double auroc = 0.0;
};

// FedAvg-pf trained once per seed, then evaluated at each flow length.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, std::size_t workers);

struct GammaRow {
  std::uint64_t seed = 0;
  double prior_precision = 0.0;
  double accuracy = 0.0;
  double ece = 0.0;
  double nll = 0.0;
  double auroc = 0.0;
};

std::vector<GammaRow> run_gamma_sensitivity(const ExperimentConfig& cfg, std::size_t workers);

struct ProbeResult {
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;
  double lambda_min = 0.0;
  double flow_s_max = 0.0;
  std::vector<ProbeDirection> directions;
};

ProbeResult run_probe(const ExperimentConfig& cfg, std::uint64_t seed);

// Mean over OOD sets of the primary method's metrics.
DetectionMetrics primary_detection(const AggregateReport& agg, const std::string& primary_method);

Json report_json(const ExperimentConfig& cfg, std::span<const ExperimentResult> runs);
Json ablation_json(const ExperimentConfig& cfg, std::span<const AblationRow> rows);
Json probe_json(const ExperimentConfig& cfg, std::span<const ProbeResult> results);

// Subcommand bodies; each writes its artifacts under `out`.
void cli_run(const ExperimentConfig& cfg, const std::filesystem::path& out, std::size_t workers);
void cli_ablate(const ExperimentConfig& cfg, const std::filesystem::path& out, std::size_t workers);
void cli_probe(const ExperimentConfig& cfg, const std::filesystem::path& out);
void cli_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Concatenates the runs of several report.json files. Refuses reports whose
// config hashes differ.
Json merge_reports(std::span<const Json> reports);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace pfedpf
