// pfedpf: run, ablate, probe, gen-data, merge.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pfedpf/errors.hpp"
#include "pfedpf/harness.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::string seeds;
  std::string out;
  std::size_t workers = 1;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "experiment config (JSON)")->required();
  cmd->add_option("--seeds", flags.seeds, "comma-separated seed list, overrides the config");
  cmd->add_option("--out", flags.out, "output directory (default: $PFEDPF_OUT, then config output_dir)");
  cmd->add_option("--workers", flags.workers, "worker threads")->check(CLI::PositiveNumber);
}

pfedpf::ExperimentConfig resolve(const CommonFlags& flags, std::filesystem::path& out) {
  auto cfg = pfedpf::load_config(flags.config);
  if (!flags.seeds.empty()) cfg.seeds = pfedpf::parse_seed_list(flags.seeds);
  if (!flags.out.empty()) {
    out = flags.out;
  } else if (const char* env = std::getenv("PFEDPF_OUT"); env != nullptr && *env != '\0') {
    out = env;
  } else {
    out = cfg.output_dir;
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning with flow-refined last-layer Laplace posteriors"};
  app.require_subcommand(1);

  CommonFlags run_flags, ablate_flags, probe_flags, gen_flags;
  auto* run = app.add_subcommand("run", "train and evaluate every configured variant");
  add_common(run, run_flags);
  auto* ablate = app.add_subcommand("ablate", "FedAvg-pf over the configured flow lengths");
  add_common(ablate, ablate_flags);
  auto* probe = app.add_subcommand("probe", "far-field confidence probe on a binary toy model");
  add_common(probe, probe_flags);
  auto* gen = app.add_subcommand("gen-data", "write the blobs dataset as IDX files plus a manifest");
  add_common(gen, gen_flags);

  std::vector<std::string> merge_inputs;
  std::string merge_out;
  auto* merge = app.add_subcommand("merge", "merge report.json files from the same config");
  merge->add_option("reports", merge_inputs, "report.json files")->required()->expected(1, -1);
  merge->add_option("--out", merge_out, "merged report path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    std::filesystem::path out;
    if (*run) {
      const auto cfg = resolve(run_flags, out);
      pfedpf::cli_run(cfg, out, run_flags.workers);
    } else if (*ablate) {
      const auto cfg = resolve(ablate_flags, out);
      pfedpf::cli_ablate(cfg, out, ablate_flags.workers);
    } else if (*probe) {
      const auto cfg = resolve(probe_flags, out);
      pfedpf::cli_probe(cfg, out);
    } else if (*gen) {
      const auto cfg = resolve(gen_flags, out);
      pfedpf::cli_gen_data(cfg, out);
    } else if (*merge) {
      std::vector<pfedpf::Json> reports;
      for (const auto& path : merge_inputs) reports.push_back(pfedpf::Json::parse(pfedpf::read_text(path)));
      pfedpf::write_text(merge_out, pfedpf::merge_reports(reports).dump(2) + "\n");
      out = std::filesystem::path(merge_out).parent_path();
    }
    std::cout << "wrote " << out.string() << "\n";
  } catch (const pfedpf::ConfigError& e) {
    std::cerr << "config error";
    if (!e.key().empty()) std::cerr << " at '" << e.key() << "'";
    std::cerr << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
