// ffgb: run federated boosting experiments from JSON configs and report on them.
//
//   ffgb run <config.json> [--out DIR] [--seed N] [--threads N]
//   ffgb report <run-dir>
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "ffgb/experiment.hpp"

namespace {

int cmd_run(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
            std::size_t threads) {
  ffgb::ExperimentConfig cfg;
  try {
    cfg = ffgb::load_experiment(config_path);
  } catch (const ffgb::ExperimentConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  if (!out.empty()) cfg.output_dir = out;
  if (seed) cfg = ffgb::with_seed(std::move(cfg), *seed);
  try {
    const auto summary = ffgb::run_experiment(cfg, threads, &std::cerr);
    if (summary.failed > 0) {
      std::cerr << "error: " << summary.failed << " of " << summary.cells.size() << " cell(s) failed\n";
      return 1;
    }
    std::cout << "wrote " << summary.cells.size() << " cell(s) to " << cfg.output_dir << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

int cmd_report(const std::string& dir) {
  try {
    ffgb::print_report(ffgb::build_report(dir), std::cout);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated functional gradient boosting simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, run_dir;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  auto* run = app.add_subcommand("run", "Run an experiment config (all sweep cells)");
  run->add_option("config", config_path, "Experiment JSON config")->required();
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");
  auto* seed_opt = run->add_option("--seed", seed, "Seed override");
  run->add_option("--threads", threads, "Cells run in parallel")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Summarize a finished run directory");
  report->add_option("dir", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (run->parsed())
    return cmd_run(config_path, out_dir, seed_opt->count() ? std::optional<std::uint64_t>(seed) : std::nullopt, threads);
  return cmd_report(run_dir);
}
