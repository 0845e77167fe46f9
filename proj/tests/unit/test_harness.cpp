#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "pfedpf/errors.hpp"
#include "pfedpf/harness.hpp"

using namespace pfedpf;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_doc() {
  return nlohmann::json::parse(R"({
    "dataset": {"kind": "blobs", "class_count": 3, "per_class": 60, "input_dim": 4, "spread": 0.6},
    "partition": {"clients": 3, "p": 0.2, "train_per_client": 30, "test_per_client": 15},
    "model": {"hidden": [8]},
    "variants": [{"base": "fedavg", "posterior_fine_tune": false},
                 {"base": "fedavg", "posterior_fine_tune": true},
                 {"base": "fedper", "posterior_fine_tune": true}],
    "rounds": {"total": 2, "local_epochs": 1},
    "sgd": {"learning_rate": 0.05, "batch_size": 16},
    "laplace": {"prior_precision": 1.0, "mc_samples": 16},
    "flow": {"length": 2, "steps": 10, "mc_batch": 8, "step_size": 0.01},
    "eval": {"dropout_samples": 4},
    "ood": [{"name": "noise", "kind": "noise", "delta": 50, "count": 20}],
    "ablation": {"flow_lengths": [0, 2]},
    "seeds": [0, 1],
    "checkpoints": "server",
    "output_dir": "unused"
  })");
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pfedpf_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string config_error_key(const nlohmann::json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<none>";
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + PFEDPF_CLI_PATH + "\" " + args + " >\"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
#ifdef WEXITSTATUS
  return WEXITSTATUS(status);
#else
  return status;
#endif
}

}  // namespace

TEST(Config, DefaultsParseAndRoundTripThroughJson) {
  const ExperimentConfig cfg = parse_config(tiny_doc());
  EXPECT_EQ(cfg.partition.clients, 3);
  EXPECT_EQ(cfg.variants.size(), 3u);
  EXPECT_EQ(cfg.checkpoints, CheckpointPolicy::server);
  const ExperimentConfig again = parse_config(config_to_json(cfg));
  EXPECT_EQ(config_hash(again), config_hash(cfg));
}

TEST(Config, UnknownOrInvalidKeysNameThePath) {
  auto doc = tiny_doc();
  doc["sgd"]["learnng_rate"] = 0.1;
  EXPECT_EQ(config_error_key(doc), "sgd.learnng_rate");

  doc = tiny_doc();
  doc["bogus"] = 1;
  EXPECT_EQ(config_error_key(doc), "bogus");

  doc = tiny_doc();
  doc["partition"]["p"] = 1.5;
  EXPECT_EQ(config_error_key(doc), "partition.p");

  doc = tiny_doc();
  doc["variants"][1]["base"] = "fedprox";
  EXPECT_NE(config_error_key(doc).find("base"), std::string::npos);

  doc = tiny_doc();
  doc["rounds"]["total"] = "many";
  EXPECT_EQ(config_error_key(doc), "rounds.total");

  doc = tiny_doc();
  doc["checkpoints"] = "some";
  EXPECT_EQ(config_error_key(doc), "checkpoints");
}

TEST(Config, HashIgnoresOutputDirOnly) {
  auto doc = tiny_doc();
  const std::string h = config_hash(parse_config(doc));
  EXPECT_EQ(h.size(), 16u);
  doc["output_dir"] = "elsewhere";
  EXPECT_EQ(config_hash(parse_config(doc)), h);
  doc["flow"]["steps"] = 11;
  EXPECT_NE(config_hash(parse_config(doc)), h);
}

TEST(Config, SeedList) {
  EXPECT_EQ(parse_seed_list("0,1,7"), (std::vector<std::uint64_t>{0, 1, 7}));
  EXPECT_EQ(parse_seed_list("3"), (std::vector<std::uint64_t>{3}));
  EXPECT_THROW(parse_seed_list(" 3"), ConfigError);
  EXPECT_THROW(parse_seed_list("1,,2"), ConfigError);
  EXPECT_THROW(parse_seed_list("-1"), ConfigError);
  EXPECT_THROW(parse_seed_list(""), ConfigError);
}

TEST(Merge, RefusesMismatchedHashes) {
  Json a = {{"config_hash", "aaaa"}, {"runs", Json::array({{{"seed", 0}}})}};
  Json b = {{"config_hash", "aaaa"}, {"runs", Json::array({{{"seed", 1}}})}};
  const std::vector<Json> ok{a, b};
  EXPECT_EQ(merge_reports(ok)["runs"].size(), 2u);
  b["config_hash"] = "bbbb";
  const std::vector<Json> bad{a, b};
  EXPECT_THROW(merge_reports(bad), ConfigError);
}

TEST(Harness, ReportIsIdenticalAcrossWorkerCounts) {
  auto doc = tiny_doc();
  doc["seeds"] = {0};
  const ExperimentConfig cfg = parse_config(doc);
  const auto one = run_seed(cfg, 0, 1);
  const auto four = run_seed(cfg, 0, 4);
  EXPECT_EQ(report_json(cfg, one).dump(), report_json(cfg, four).dump());
}

TEST(Harness, AblationRowCountAndZeroLengthIsPlainLaplace) {
  const ExperimentConfig cfg = parse_config(tiny_doc());
  const auto rows = run_ablation(cfg, 2);
  ASSERT_EQ(rows.size(), cfg.flow_lengths.size() * cfg.seeds.size());
  for (const auto seed : cfg.seeds) {
    const SeedData data = build_seed_data(cfg, seed);
    FederationConfig fed = cfg.federation;
    fed.variant = {BaseAlgorithm::fedavg, false};
    fed.seed = seed;
    fed.workers = 1;
    const FederationOutcome outcome = train_federation(fed, data.shards, data.class_count);

    // Gaussian predictive computed directly, no flow code involved.
    std::vector<ClientReport> expected;
    for (const auto& c : outcome.clients) {
      const MlpParams params = evaluation_params(outcome.server, c, fed.variant);
      const GaussianPosterior base = base_posterior(outcome.server, c, fed);
      RngStream pr(seed, stream_id_for({stream_tag::kPredict, std::uint64_t(c.shard.client_id)}));
      const Matrix samples = base.sample(Eigen::Index(cfg.eval.mc_samples), pr);
      PredictionBatch batch;
      batch.probabilities = mc_predict(samples, features(params, c.shard.test.inputs), data.class_count);
      batch.labels = c.shard.test.labels;
      ClientReport rep;
      rep.client_id = c.shard.client_id;
      rep.accuracy = accuracy(batch);
      rep.nll = nll(batch);
      rep.ece = ece(batch, cfg.eval.ece_bins);
      expected.push_back(rep);
    }

    fed.variant.posterior_fine_tune = true;
    fed.flow.flow_length = 0;
    const ExperimentResult zero = evaluate_clients(outcome, fed, cfg.eval, data.ood);
    ASSERT_EQ(zero.clients.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      EXPECT_EQ(zero.clients[i].accuracy, expected[i].accuracy);
      EXPECT_EQ(zero.clients[i].nll, expected[i].nll);
      EXPECT_EQ(zero.clients[i].ece, expected[i].ece);
    }
    const auto row = std::find_if(rows.begin(), rows.end(),
                                  [&](const AblationRow& r) { return r.seed == seed && r.flow_length == 0; });
    ASSERT_NE(row, rows.end());
    const DetectionMetrics det = primary_detection(zero.aggregate, "bayes");
    EXPECT_EQ(row->accuracy, zero.aggregate.accuracy);
    EXPECT_EQ(row->ece, zero.aggregate.ece);
    EXPECT_EQ(row->nll, zero.aggregate.nll);
    EXPECT_EQ(row->auroc, det.auroc);
    EXPECT_EQ(row->fpr95, det.fpr95);
  }
}

TEST(Cli, MalformedConfigExitsTwoNamingTheKey) {
  const fs::path dir = temp_dir("badcfg");
  auto doc = tiny_doc();
  doc["flow"]["lenght"] = 3;
  std::ofstream(dir / "cfg.json") << doc.dump();
  const fs::path log = dir / "log.txt";
  EXPECT_EQ(run_cli("run --config \"" + (dir / "cfg.json").string() + "\" --out \"" + (dir / "out").string() + "\"",
                    log),
            2);
  EXPECT_NE(read_text(log).find("flow.lenght"), std::string::npos) << read_text(log);

  std::ofstream(dir / "broken.json") << "{\"seeds\": [";
  EXPECT_EQ(run_cli("run --config \"" + (dir / "broken.json").string() + "\"", log), 2);
  EXPECT_EQ(run_cli("run", log), 2);
}

TEST(Cli, RunWritesHashedArtifacts) {
  const fs::path dir = temp_dir("run");
  auto doc = tiny_doc();
  doc["seeds"] = {0};
  std::ofstream(dir / "cfg.json") << doc.dump();
  const fs::path out = dir / "out";
  ASSERT_EQ(run_cli("run --config \"" + (dir / "cfg.json").string() + "\" --out \"" + out.string() +
                        "\" --workers 2 --seeds 5",
                    dir / "log.txt"),
            0)
      << read_text(dir / "log.txt");
  const Json report = Json::parse(read_text(out / "report.json"));
  auto cfg = parse_config(doc);
  cfg.seeds = {5};
  const std::string hash = config_hash(cfg);
  EXPECT_EQ(report["config_hash"], hash);
  EXPECT_EQ(report["runs"].size(), 3u);
  EXPECT_EQ(report["runs"][0]["seed"], 5);
  const std::string summary = read_text(out / "tables" / "summary.csv");
  EXPECT_EQ(summary.substr(0, summary.find('\n')), "# config_hash=" + hash);
  EXPECT_TRUE(fs::exists(out / "trace.jsonl"));
  EXPECT_NE(read_text(out / "trace.jsonl").find("\"config_hash\":\"" + hash + "\""), std::string::npos);
  const Json manifest = Json::parse(read_text(out / "checkpoints" / "manifest.json"));
  EXPECT_EQ(manifest["config_hash"], hash);
  ASSERT_FALSE(manifest["files"].empty());
  for (const auto& f : manifest["files"]) EXPECT_TRUE(fs::exists(out / "checkpoints" / f["file"].get<std::string>()));

  ASSERT_EQ(run_cli("merge \"" + (out / "report.json").string() + "\" \"" + (out / "report.json").string() +
                        "\" --out \"" + (dir / "merged.json").string() + "\"",
                    dir / "log.txt"),
            0);
  EXPECT_EQ(Json::parse(read_text(dir / "merged.json"))["runs"].size(), 6u);
}

TEST(Cli, GenDataRoundTripsThroughIdxConfig) {
  const fs::path dir = temp_dir("gen");
  auto doc = tiny_doc();
  std::ofstream(dir / "cfg.json") << doc.dump();
  ASSERT_EQ(run_cli("gen-data --config \"" + (dir / "cfg.json").string() + "\" --out \"" + dir.string() + "\"",
                    dir / "log.txt"),
            0)
      << read_text(dir / "log.txt");
  EXPECT_TRUE(fs::exists(dir / "data" / "manifest.json"));
  doc["dataset"] = {{"kind", "idx"},
                    {"images", "data/blobs-images-idx3-ubyte"},
                    {"labels", "data/blobs-labels-idx1-ubyte"}};
  std::ofstream(dir / "idx.json") << doc.dump();
  const ExperimentConfig cfg = load_config(dir / "idx.json");
  const SeedData data = build_seed_data(cfg, 0);
  EXPECT_EQ(data.shards.size(), 3u);
  EXPECT_EQ(data.class_count, 3);
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& entry : fs::directory_iterator(fs::path(PFEDPF_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
  }
  const ExperimentConfig mnist = load_config(fs::path(PFEDPF_SOURCE_DIR) / "configs" / "mnist_full.json");
  EXPECT_TRUE(fs::path(mnist.dataset.images).is_absolute());
  EXPECT_EQ(mnist.partition.clients, 20);
  EXPECT_EQ(mnist.federation.rounds.total_rounds, 80u);
}
