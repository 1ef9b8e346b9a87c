#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ndqfn/agent.hpp"
#include "ndqfn/checkpoint.hpp"
#include "ndqfn/envs.hpp"
#include "ndqfn/explore.hpp"

namespace ndqfn {

struct EnvConfig {
  std::string kind = "chain";  // chain | gridworld | stochastic
  int length = 25;
  double noise = 0.0;
  bool scramble_actions = true;
  int size = 4;
  double goal_reward = 1.0;
  double step_penalty = 0.01;
  int arms = 2;

  void validate() const {
    if (kind != "chain" && kind != "gridworld" && kind != "stochastic") {
      throw ConfigError("env.kind must be one of chain, gridworld, stochastic");
    }
  }
};

struct RunConfig {
  std::vector<std::uint64_t> seeds{1};
  std::string output = "results";
  // Evaluation mean return that counts as solved; NaN disables the
  // first-solve column.
  double solve_return = std::numeric_limits<double>::quiet_NaN();
  bool stop_on_solve = false;
};

struct ExperimentConfig {
  EnvConfig env;
  AgentConfig agent;
  ExplorationConfig explore;
  RunConfig run;

  void validate() const {
    env.validate();
    agent.validate();
    explore.validate();
    if (run.seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
    if (run.stop_on_solve && std::isnan(run.solve_return)) {
      throw ConfigError("run.stop_on_solve needs run.solve_return");
    }
    if (agent.head == Head::iqn && explore.strategy != Strategy::none) {
      throw ConfigError("agent.head = iqn only supports explore.strategy = none");
    }
    // Building the environment checks its own parameters.
    make_environment_check();
  }

 private:
  void make_environment_check() const;
};

inline std::unique_ptr<Environment> make_environment(const EnvConfig& config, std::uint64_t seed) {
  config.validate();
  if (config.kind == "chain") return std::make_unique<ChainEnv>(config.length, config.noise, seed, config.scramble_actions);
  if (config.kind == "gridworld") {
    return std::make_unique<GridworldEnv>(config.size, config.goal_reward, config.step_penalty, seed);
  }
  return std::make_unique<StochasticRewardEnv>(config.arms, seed);
}

inline void ExperimentConfig::make_environment_check() const { (void)make_environment(env, 0); }

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

inline bool parse_bool(std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("not a boolean: '" + std::string(text) + "'");
}

inline std::string bool_text(bool b) { return b ? "true" : "false"; }

inline std::vector<std::uint64_t> parse_seeds(std::string_view text) {
  std::vector<std::uint64_t> seeds;
  std::string item;
  std::istringstream ss{std::string(text)};
  while (std::getline(ss, item, ',')) seeds.push_back(parse_integer<std::uint64_t>(trim(item)));
  return seeds;
}

struct ConfigKey {
  std::string_view name;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define NDQFN_INT_KEY(key, field)                                                                    \
  ConfigKey {                                                                                        \
    key, [](ExperimentConfig& c, std::string_view v) { c.field = parse_integer<decltype(c.field)>(v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.field); }                             \
  }
#define NDQFN_REAL_KEY(key, field)                                                                 \
  ConfigKey {                                                                                      \
    key, [](ExperimentConfig& c, std::string_view v) { c.field = parse_double(v); },              \
        [](const ExperimentConfig& c) { return format_double(c.field); }                            \
  }
#define NDQFN_BOOL_KEY(key, field)                                                                 \
  ConfigKey {                                                                                      \
    key, [](ExperimentConfig& c, std::string_view v) { c.field = parse_bool(v); },                \
        [](const ExperimentConfig& c) { return bool_text(c.field); }                                \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"env.kind", [](ExperimentConfig& c, std::string_view v) { c.env.kind = std::string(v); },
       [](const ExperimentConfig& c) { return c.env.kind; }},
      NDQFN_INT_KEY("env.length", env.length),
      NDQFN_REAL_KEY("env.noise", env.noise),
      NDQFN_BOOL_KEY("env.scramble_actions", env.scramble_actions),
      NDQFN_INT_KEY("env.size", env.size),
      NDQFN_REAL_KEY("env.goal_reward", env.goal_reward),
      NDQFN_REAL_KEY("env.step_penalty", env.step_penalty),
      NDQFN_INT_KEY("env.arms", env.arms),
      NDQFN_REAL_KEY("agent.gamma", agent.gamma),
      NDQFN_INT_KEY("agent.n_step", agent.n_step),
      NDQFN_INT_KEY("agent.grid_size", agent.grid_size),
      NDQFN_INT_KEY("agent.n1", agent.n1),
      NDQFN_INT_KEY("agent.n2", agent.n2),
      NDQFN_REAL_KEY("agent.kappa", agent.kappa),
      NDQFN_REAL_KEY("agent.learning_rate", agent.learning_rate),
      NDQFN_REAL_KEY("agent.adam_epsilon", agent.adam_epsilon),
      NDQFN_INT_KEY("agent.batch_size", agent.batch_size),
      NDQFN_INT_KEY("agent.buffer_capacity", agent.buffer_capacity),
      NDQFN_INT_KEY("agent.warmup", agent.warmup),
      NDQFN_INT_KEY("agent.train_period", agent.train_period),
      NDQFN_INT_KEY("agent.sync_period", agent.sync_period),
      NDQFN_INT_KEY("agent.budget", agent.budget),
      NDQFN_INT_KEY("agent.eval_period", agent.eval_period),
      NDQFN_INT_KEY("agent.eval_episodes", agent.eval_episodes),
      NDQFN_REAL_KEY("agent.epsilon_train", agent.epsilon_train),
      NDQFN_REAL_KEY("agent.epsilon_eval", agent.epsilon_eval),
      NDQFN_BOOL_KEY("agent.double_q", agent.double_q),
      NDQFN_INT_KEY("agent.embed_dim", agent.embed_dim),
      NDQFN_INT_KEY("agent.hidden_dim", agent.hidden_dim),
      NDQFN_INT_KEY("agent.cosine_features", agent.cosine_features),
      {"agent.increment_activation",
       [](ExperimentConfig& c, std::string_view v) { c.agent.increment_activation = parse_activation(v); },
       [](const ExperimentConfig& c) { return std::string(to_string(c.agent.increment_activation)); }},
      NDQFN_REAL_KEY("agent.init_gain", agent.init_gain),
      {"agent.head", [](ExperimentConfig& c, std::string_view v) { c.agent.head = parse_head(v); },
       [](const ExperimentConfig& c) { return std::string(to_string(c.agent.head)); }},
      {"explore.strategy", [](ExperimentConfig& c, std::string_view v) { c.explore.strategy = parse_strategy(v); },
       [](const ExperimentConfig& c) { return std::string(to_string(c.explore.strategy)); }},
      NDQFN_REAL_KEY("explore.bonus_rate", explore.bonus_rate),
      NDQFN_REAL_KEY("explore.predictor_learning_rate", explore.predictor_learning_rate),
      NDQFN_REAL_KEY("explore.dltv_scale", explore.dltv_scale),
      {"run.seeds", [](ExperimentConfig& c, std::string_view v) { c.run.seeds = parse_seeds(v); },
       [](const ExperimentConfig& c) {
         std::string out;
         for (std::size_t i = 0; i < c.run.seeds.size(); ++i) out += (i ? "," : "") + std::to_string(c.run.seeds[i]);
         return out;
       }},
      {"run.output", [](ExperimentConfig& c, std::string_view v) { c.run.output = std::string(v); },
       [](const ExperimentConfig& c) { return c.run.output; }},
      NDQFN_REAL_KEY("run.solve_return", run.solve_return),
      NDQFN_BOOL_KEY("run.stop_on_solve", run.stop_on_solve),
  };
  return keys;
}

#undef NDQFN_INT_KEY
#undef NDQFN_REAL_KEY
#undef NDQFN_BOOL_KEY

}  // namespace detail

// Applies one "section.key = value" assignment.
inline void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value) {
  for (const auto& k : detail::config_keys()) {
    if (k.name == key) {
      k.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + std::string(key) + "'");
}

// Flat key = value text; '#' starts a comment. Errors carry source:line.
inline ExperimentConfig parse_config(std::istream& in, std::string_view source = "<config>") {
  ExperimentConfig config;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    const std::string body = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    try {
      if (eq == std::string::npos) throw ConfigError("expected 'key = value'");
      const std::string key = detail::trim(body.substr(0, eq));
      const std::string value = detail::trim(body.substr(eq + 1));
      if (value.empty()) throw ConfigError("empty value for '" + key + "'");
      set_config_value(config, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(source) + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(source) + ": " + e.what());
  }
  return config;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  return parse_config(in, path.string());
}

// Every key with its resolved value, in parse_config's format.
inline std::string config_to_text(const ExperimentConfig& config) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += std::string(k.name) + " = " + k.get(config) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// CSV logs
// ---------------------------------------------------------------------------

// train.csv: one row per finished episode.
//   step            global step at which the episode ended
//   episode_return  undiscounted return
//   loss            mean TD loss over the episode's updates (empty if none)
//   mean_bonus      mean over the episode's steps of the per-step mean bonus
inline constexpr std::string_view kTrainHeader = "step,episode_return,loss,mean_bonus";

// eval.csv: step,mean_return,return_0,...,return_{k-1}
inline std::string eval_header(int episodes) {
  std::string h = "step,mean_return";
  for (int e = 0; e < episodes; ++e) h += ",return_" + std::to_string(e);
  return h;
}

struct EvalRow {
  long step = 0;
  double mean_return = 0.0;
  std::vector<double> returns;
};

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::vector<EvalRow> read_eval_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("step,mean_return", 0) != 0) throw ConfigError("eval.csv: bad header");
  std::vector<EvalRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() < 2) throw ConfigError("eval.csv: short row '" + line + "'");
    EvalRow row{parse_integer<long>(cells[0]), parse_double(cells[1]), {}};
    for (std::size_t i = 2; i < cells.size(); ++i) row.returns.push_back(parse_double(cells[i]));
    rows.push_back(std::move(row));
  }
  return rows;
}

// Trailing moving average; the first window-1 entries average what exists.
inline std::vector<double> moving_average(std::span<const double> values, int window) {
  if (window < 1) throw ConfigError("moving average window must be >= 1");
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sum += values[i];
    if (i >= static_cast<std::size_t>(window)) sum -= values[i - static_cast<std::size_t>(window)];
    out[i] = sum / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
  }
  return out;
}

inline std::optional<long> first_solve_step(std::span<const EvalRow> rows, double threshold) {
  for (const auto& r : rows) {
    if (r.mean_return >= threshold) return r.step;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Crossing statistics
// ---------------------------------------------------------------------------

struct CrossingStats {
  long pairs = 0;
  long crossings = 0;
  double rate() const { return pairs == 0 ? 0.0 : static_cast<double>(crossings) / static_cast<double>(pairs); }
};

struct CrossingReport {
  CrossingStats ndqfn;
  CrossingStats iqn;
};

// For each sample, draws tau and tau' independently from U(0, 1), orders them
// as tau_lo < tau_hi, and counts a crossing for every action whose estimate at
// tau_lo exceeds the one at tau_hi. Probe states are visited round-robin.
inline CrossingReport crossing_report(const NetworkParams& params, const QuantileGrid& grid,
                                      std::span<const std::vector<double>> probes, long samples, Rng& rng) {
  if (probes.empty()) throw ConfigError("crossing_report: need at least one probe state");
  CrossingReport report;
  const long per_probe = (samples + static_cast<long>(probes.size()) - 1) / static_cast<long>(probes.size());
  long remaining = samples;
  for (const auto& obs : probes) {
    const long count = std::min(per_probe, remaining);
    if (count <= 0) break;
    remaining -= count;
    std::vector<double> lo(static_cast<std::size_t>(count)), hi(lo.size()), taus;
    for (long s = 0; s < count; ++s) {
      const double a = rng.uniform_open(), b = rng.uniform_open();
      lo[s] = std::min(a, b);
      hi[s] = std::max(a, b);
      taus.push_back(lo[s]);
      taus.push_back(hi[s]);
    }
    const auto curves = forward(params, obs, grid);
    const Eigen::MatrixXd iqn = forward_iqn(params, obs, taus);
    for (std::size_t a = 0; a < curves.size(); ++a) {
      for (long s = 0; s < count; ++s) {
        if (lo[s] == hi[s]) continue;
        ++report.ndqfn.pairs;
        ++report.iqn.pairs;
        if (evaluate(curves[a], lo[s]) > evaluate(curves[a], hi[s])) ++report.ndqfn.crossings;
        if (iqn(static_cast<Eigen::Index>(a), 2 * s) > iqn(static_cast<Eigen::Index>(a), 2 * s + 1)) ++report.iqn.crossings;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  long steps = 0;
  std::optional<long> first_solve;
  double final_eval = 0.0;
  std::filesystem::path directory;
};

inline void save_agent_checkpoint(const Agent& agent, std::uint64_t seed, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
  CheckpointInfo info{agent.online().architecture(), agent.config().grid_size, seed, agent.steps()};
  write_checkpoint(out, info,
                   {{"online", &agent.online()}, {"target", &agent.target()}, {"predictor", &agent.predictor()}});
}

// Trains one seed and writes train.csv, eval.csv, checkpoint.bin and the
// probe-state curve dumps under `directory`. A numeric failure writes
// checkpoint_failed.bin before rethrowing.
inline SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  {
    std::ofstream cfg(directory / "config.txt");
    cfg << config_to_text(config);
  }

  auto env = make_environment(config.env, derive_seed(seed, Stream::environment));
  auto eval_env = make_environment(config.env, derive_seed(seed, Stream::eval_environment));
  if (config.env.kind == "chain") {
    // Evaluation must see the same chain as training.
    eval_env = make_environment(config.env, derive_seed(seed, Stream::environment));
  }
  Agent agent(config.agent, config.explore, env->spec(), seed);

  std::ofstream train(directory / "train.csv");
  std::ofstream eval(directory / "eval.csv");
  train << kTrainHeader << '\n';
  eval << eval_header(config.agent.eval_episodes) << '\n';

  SeedResult result{seed, 0, std::nullopt, 0.0, directory};
  double loss_sum = 0.0, bonus_sum = 0.0;
  long loss_count = 0, episode_steps = 0;
  try {
    while (agent.steps() < config.agent.budget) {
      const StepRecord rec = agent.step(*env);
      if (rec.loss) {
        loss_sum += *rec.loss;
        ++loss_count;
      }
      bonus_sum += rec.mean_bonus;
      ++episode_steps;
      if (rec.episode_end) {
        train << rec.step << ',' << format_double(rec.episode_return) << ','
              << (loss_count ? format_double(loss_sum / static_cast<double>(loss_count)) : std::string()) << ','
              << format_double(bonus_sum / static_cast<double>(episode_steps)) << '\n';
        loss_sum = bonus_sum = 0.0;
        loss_count = episode_steps = 0;
      }
      if (rec.step % config.agent.eval_period == 0) {
        const EvaluationResult ev = agent.evaluate(*eval_env, config.agent.eval_episodes);
        eval << rec.step << ',' << format_double(ev.mean_return);
        for (double r : ev.returns) eval << ',' << format_double(r);
        eval << '\n';
        result.final_eval = ev.mean_return;
        if (!result.first_solve && !std::isnan(config.run.solve_return) && ev.mean_return >= config.run.solve_return) {
          result.first_solve = rec.step;
          if (config.run.stop_on_solve) break;
        }
      }
    }
  } catch (const NumericError&) {
    save_agent_checkpoint(agent, seed, directory / "checkpoint_failed.bin");
    throw;
  }
  result.steps = agent.steps();
  save_agent_checkpoint(agent, seed, directory / "checkpoint.bin");

  fs::create_directories(directory / "quantiles");
  const auto probes = env->probe_observations();
  for (std::size_t s = 0; s < probes.size(); ++s) {
    const auto curves = forward(agent.online(), probes[s], agent.grid());
    for (std::size_t a = 0; a < curves.size(); ++a) {
      std::ofstream dump(directory / "quantiles" / ("state_" + std::to_string(s) + "_action_" + std::to_string(a) + ".csv"));
      write_curve(dump, curves[a]);
    }
  }
  return result;
}

// Runs every seed in config.run.seeds into <output>/seed_<seed>/ and writes
// <output>/summary.csv (seed,steps,first_solve_step,final_eval).
inline std::vector<SeedResult> run_experiment(const ExperimentConfig& config) {
  config.validate();
  const std::filesystem::path root(config.run.output);
  std::filesystem::create_directories(root);
  std::vector<SeedResult> results;
  for (std::uint64_t seed : config.run.seeds) {
    results.push_back(run_seed(config, seed, root / ("seed_" + std::to_string(seed))));
  }
  std::ofstream summary(root / "summary.csv");
  summary << "seed,steps,first_solve_step,final_eval\n";
  for (const auto& r : results) {
    summary << r.seed << ',' << r.steps << ',' << (r.first_solve ? std::to_string(*r.first_solve) : std::string()) << ','
            << format_double(r.final_eval) << '\n';
  }
  return results;
}

}  // namespace ndqfn
