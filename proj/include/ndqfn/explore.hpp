#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ndqfn/loss.hpp"
#include "ndqfn/net.hpp"
#include "ndqfn/quantfn.hpp"

namespace ndqfn {

enum class Strategy { none, dpe, value_pe, dltv };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::none: return "none";
    case Strategy::dpe: return "dpe";
    case Strategy::value_pe: return "value_pe";
    case Strategy::dltv: return "dltv";
  }
  return "none";
}

inline Strategy parse_strategy(std::string_view text) {
  if (text == "none") return Strategy::none;
  if (text == "dpe") return Strategy::dpe;
  if (text == "value_pe") return Strategy::value_pe;
  if (text == "dltv") return Strategy::dltv;
  throw ConfigError("unknown exploration strategy '" + std::string(text) + "'");
}

struct ExplorationConfig {
  Strategy strategy = Strategy::none;
  double bonus_rate = 1.0;  // c_t, fixed
  double predictor_learning_rate = 1e-3;
  double dltv_scale = 50.0;  // c in c * sqrt(log t / t)

  bool uses_predictor() const { return strategy == Strategy::dpe || strategy == Strategy::value_pe; }

  void validate() const {
    if (!(bonus_rate >= 0.0)) throw ConfigError("explore.bonus_rate must be >= 0");
    if (!(predictor_learning_rate >= 0.0)) throw ConfigError("explore.predictor_learning_rate must be >= 0");
    if (!(dltv_scale >= 0.0)) throw ConfigError("explore.dltv_scale must be >= 0");
  }
};

// W1 distance between the target's and the predictor's curves at (x, a).
inline double dpe_bonus(const NetworkParams& target, const NetworkParams& predictor, std::span<const double> obs,
                        int action, const QuantileGrid& grid) {
  const auto a = static_cast<std::size_t>(action);
  return w1_distance(forward(target, obs, grid)[a], forward(predictor, obs, grid)[a]);
}

// |Q_predictor(x, a) - Q_target(x, a)|.
inline double value_pe_bonus(const NetworkParams& target, const NetworkParams& predictor,
                             std::span<const double> obs, int action, const QuantileGrid& grid) {
  const auto a = static_cast<std::size_t>(action);
  return std::abs(q_value(forward(predictor, obs, grid)[a]) - q_value(forward(target, obs, grid)[a]));
}

// Left-truncated variance of the online curve at (x, a).
inline double dltv_bonus(const NetworkParams& online, std::span<const double> obs, int action,
                         const QuantileGrid& grid) {
  return left_truncated_variance(forward(online, obs, grid)[static_cast<std::size_t>(action)]);
}

// Decaying DLTV multiplier c * sqrt(log t / t); zero for t < 2.
inline double dltv_schedule(long step, double scale) {
  if (step < 2) return 0.0;
  const double t = static_cast<double>(step);
  return scale * std::sqrt(std::log(t) / t);
}

// Bonus of every action at one state, before multiplication by bonus_rate.
// One forward pass per network involved.
inline std::vector<double> action_bonuses(const ExplorationConfig& config, const NetworkParams& online,
                                          const NetworkParams& target, const NetworkParams& predictor,
                                          std::span<const double> obs, const QuantileGrid& grid, long step) {
  const int actions = online.architecture().num_actions;
  std::vector<double> bonus(static_cast<std::size_t>(actions), 0.0);
  switch (config.strategy) {
    case Strategy::none:
      break;
    case Strategy::dpe: {
      const auto t = forward(target, obs, grid);
      const auto p = forward(predictor, obs, grid);
      for (std::size_t a = 0; a < bonus.size(); ++a) bonus[a] = w1_distance(t[a], p[a]);
      break;
    }
    case Strategy::value_pe: {
      const auto t = forward(target, obs, grid);
      const auto p = forward(predictor, obs, grid);
      for (std::size_t a = 0; a < bonus.size(); ++a) bonus[a] = std::abs(q_value(p[a]) - q_value(t[a]));
      break;
    }
    case Strategy::dltv: {
      const double c = dltv_schedule(step, config.dltv_scale);
      const auto curves = forward(online, obs, grid);
      for (std::size_t a = 0; a < bonus.size(); ++a) bonus[a] = c * std::sqrt(left_truncated_variance(curves[a]));
      break;
    }
  }
  return bonus;
}

// epsilon-greedy over Q + bonus_rate * bonus. The bonus only enters the
// greedy branch; ties go to the lowest action index.
inline int select_action(std::span<const double> q, std::span<const double> bonus, double bonus_rate,
                         double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  if (rng.uniform() < epsilon) return static_cast<int>(rng.below(q.size()));
  std::vector<double> score(q.begin(), q.end());
  if (!bonus.empty()) {
    for (std::size_t a = 0; a < score.size(); ++a) score[a] += bonus_rate * bonus[a];
  }
  return argmax(score);
}

// bonus_fn(obs) returns one bonus per action and is only called on the greedy
// branch.
template <typename BonusFn>
int select_action(const NetworkParams& online, BonusFn&& bonus_fn, std::span<const double> obs,
                  const QuantileGrid& grid, const ExplorationConfig& config, double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  const int actions = online.architecture().num_actions;
  if (rng.uniform() < epsilon) return static_cast<int>(rng.below(static_cast<std::uint64_t>(actions)));
  const auto curves = forward(online, obs, grid);
  std::vector<double> score(curves.size());
  for (std::size_t a = 0; a < curves.size(); ++a) score[a] = q_value(curves[a]);
  if (config.strategy != Strategy::none && config.bonus_rate != 0.0) {
    const std::vector<double> bonus = bonus_fn(obs);
    for (std::size_t a = 0; a < score.size(); ++a) score[a] += config.bonus_rate * bonus[a];
  }
  return argmax(score);
}

// Quantile-Huber regression of the predictor's curve toward the frozen
// target's curve at each (state, action):
//   delta*_ij = P_{tau*_j, target}(x, a) - P_{tau~_i, predictor}(x, a).
// Fresh fractions are drawn per pair. Returns the loss before the step.
inline double train_predictor(NetworkParams& predictor, Adam& optimizer, const NetworkParams& target,
                              const Eigen::MatrixXd& states, std::span<const int> actions, const QuantileGrid& grid,
                              const LossConfig& config, Rng& rng) {
  const int batch = static_cast<int>(states.cols());
  if (batch == 0) throw std::invalid_argument("train_predictor: empty batch");
  const QuantileHeads target_heads = forward(target, states, grid).heads;
  std::vector<std::vector<double>> target_values(static_cast<std::size_t>(batch));
  std::vector<std::vector<double>> taus(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const FractionSample fs = FractionSample::draw(config.n1, config.n2, rng);
    const PiecewiseQuantileFunction curve = target_heads.curve(b, actions[b]);
    auto& tv = target_values[b];
    tv.resize(fs.tau_primes.size());
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = evaluate(curve, fs.tau_primes[j]);
    taus[b] = fs.taus;
  }
  const BatchLoss result =
      quantile_regression_loss(predictor, states, actions, target_values, taus, grid, config.kappa, Head::ndqfn);
  optimizer.step(predictor, result.gradients);
  if (!predictor.all_finite()) throw NumericError("predictor parameters became non-finite after an update");
  return result.loss;
}

inline double train_predictor(NetworkParams& predictor, Adam& optimizer, const NetworkParams& target,
                              std::span<const NStepTransition> batch, const QuantileGrid& grid,
                              const LossConfig& config, Rng& rng) {
  std::vector<int> actions;
  for (const auto& tr : batch) actions.push_back(tr.action);
  const Eigen::MatrixXd states = stack_observations(predictor.architecture(), detail::states_of(batch, false));
  return train_predictor(predictor, optimizer, target, states, actions, grid, config, rng);
}

}  // namespace ndqfn
