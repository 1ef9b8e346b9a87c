#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "ndqfn/harness.hpp"

namespace fs = std::filesystem;
using namespace ndqfn;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool validate_only = false;
  std::string checkpoint;
  long samples = 10000;
  int smooth = 1;
};

ExperimentConfig resolve(const Options& opt) {
  ExperimentConfig config = load_config(opt.config);
  if (opt.seed) config.run.seeds = {*opt.seed};
  if (!opt.out.empty()) config.run.output = opt.out;
  config.validate();
  return config;
}

int cmd_validate(const Options& opt) {
  std::cout << config_to_text(resolve(opt));
  return kOk;
}

int cmd_run(const Options& opt) {
  const ExperimentConfig config = resolve(opt);
  if (opt.validate_only) {
    std::cout << config_to_text(config);
    return kOk;
  }
  for (const auto& r : run_experiment(config)) {
    std::cout << "seed " << r.seed << ": " << r.steps << " steps, final eval " << format_double(r.final_eval);
    if (r.first_solve) std::cout << ", solved at " << *r.first_solve;
    std::cout << "  -> " << r.directory.string() << '\n';
  }
  return kOk;
}

// Averages eval.csv across every seed_* directory under --out (or reads a
// single seed directory) and prints step,mean_return[,smoothed].
int cmd_report(const Options& opt) {
  const fs::path root(opt.out);
  std::vector<fs::path> files;
  if (fs::exists(root / "eval.csv")) {
    files.push_back(root / "eval.csv");
  } else if (fs::is_directory(root)) {
    for (const auto& entry : fs::directory_iterator(root)) {
      if (entry.is_directory() && entry.path().filename().string().rfind("seed_", 0) == 0 &&
          fs::exists(entry.path() / "eval.csv")) {
        files.push_back(entry.path() / "eval.csv");
      }
    }
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw ConfigError("report: no eval.csv under '" + root.string() + "'");

  std::map<long, std::pair<double, int>> by_step;
  for (const auto& file : files) {
    std::ifstream in(file);
    for (const auto& row : read_eval_csv(in)) {
      auto& [sum, count] = by_step[row.step];
      sum += row.mean_return;
      ++count;
    }
  }
  std::vector<long> steps;
  std::vector<double> means;
  for (const auto& [step, acc] : by_step) {
    steps.push_back(step);
    means.push_back(acc.first / acc.second);
  }
  const auto smoothed = moving_average(means, opt.smooth);
  std::cout << "step,mean_return,seeds" << (opt.smooth > 1 ? ",smoothed" : "") << '\n';
  for (std::size_t i = 0; i < steps.size(); ++i) {
    std::cout << steps[i] << ',' << format_double(means[i]) << ',' << by_step[steps[i]].second;
    if (opt.smooth > 1) std::cout << ',' << format_double(smoothed[i]);
    std::cout << '\n';
  }
  return kOk;
}

int cmd_crossing(const Options& opt) {
  const ExperimentConfig config = resolve(opt);
  std::ifstream in(opt.checkpoint, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint '" + opt.checkpoint + "'");
  const Checkpoint cp = read_checkpoint(in);
  const auto env = make_environment(config.env, 0);
  if (env->spec().observation_dim != cp.info.architecture.observation_dim ||
      env->spec().num_actions != cp.info.architecture.num_actions) {
    throw ConfigError("checkpoint does not match the configured environment");
  }
  Rng rng(opt.seed.value_or(1));
  const CrossingReport report =
      crossing_report(cp.network("online"), QuantileGrid(cp.info.grid_size), env->probe_observations(), opt.samples, rng);
  std::cout << "head,pairs,crossings,rate\n"
            << "ndqfn," << report.ndqfn.pairs << ',' << report.ndqfn.crossings << ',' << format_double(report.ndqfn.rate())
            << '\n'
            << "iqn," << report.iqn.pairs << ',' << report.iqn.crossings << ',' << format_double(report.iqn.rate()) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monotone quantile-function agent: training, reports and crossing statistics"};
  app.require_subcommand(1);
  Options opt;

  auto* run = app.add_subcommand("run", "Train every seed in the config");
  run->add_option("--config", opt.config, "Config file")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", opt.seed, "Run only this seed");
  run->add_option("--out", opt.out, "Output directory (overrides run.output)");
  run->add_flag("--validate-only", opt.validate_only, "Print the resolved config and exit");

  auto* validate = app.add_subcommand("validate", "Parse and print the resolved config");
  validate->add_option("--config", opt.config, "Config file")->required();

  auto* report = app.add_subcommand("report", "Seed-averaged evaluation curve");
  report->add_option("--out", opt.out, "Experiment or seed directory")->required();
  report->add_option("--smooth", opt.smooth, "Moving-average window")->check(CLI::PositiveNumber);

  auto* crossing = app.add_subcommand("crossing", "Crossing rates of a checkpoint's heads");
  crossing->add_option("--config", opt.config, "Config used to train the checkpoint")->required();
  crossing->add_option("--checkpoint", opt.checkpoint, "checkpoint.bin")->required();
  crossing->add_option("--samples", opt.samples, "Fraction pairs per action, split across probe states")->check(CLI::PositiveNumber);
  crossing->add_option("--seed", opt.seed, "Seed for the sampled fractions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(opt);
    if (*validate) return cmd_validate(opt);
    if (*report) return cmd_report(opt);
    return cmd_crossing(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}
