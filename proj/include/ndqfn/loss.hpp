#pragma once

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ndqfn/common.hpp"
#include "ndqfn/net.hpp"
#include "ndqfn/optim.hpp"
#include "ndqfn/quantfn.hpp"

namespace ndqfn {

// Which head produces quantile values: the monotone piecewise-linear one, or
// the unconstrained IQN-style head used as the crossing baseline.
enum class Head { ndqfn, iqn };

inline std::string_view to_string(Head h) { return h == Head::ndqfn ? "ndqfn" : "iqn"; }

inline Head parse_head(std::string_view text) {
  if (text == "ndqfn") return Head::ndqfn;
  if (text == "iqn") return Head::iqn;
  throw ConfigError("unknown head '" + std::string(text) + "'");
}

// Online-side fractions tau_1..tau_N1 and target-side fractions
// tau'_1..tau'_N2, i.i.d. uniform on (0, 1).
struct FractionSample {
  std::vector<double> taus;
  std::vector<double> tau_primes;

  static FractionSample draw(int n1, int n2, Rng& rng) {
    FractionSample s;
    s.taus.resize(static_cast<std::size_t>(n1));
    s.tau_primes.resize(static_cast<std::size_t>(n2));
    for (double& t : s.taus) t = rng.uniform_open();
    for (double& t : s.tau_primes) t = rng.uniform_open();
    return s;
  }
};

struct NStepTransition {
  std::vector<double> state;
  int action = 0;
  std::vector<double> rewards;  // r_t .. r_{t+k-1}, k <= n
  std::vector<double> next_state;  // x_{t+k}
  bool done = false;
  double discount_power = 0.0;  // gamma^k, or 0 when the episode ended inside the window

  double discounted_reward_sum(double gamma) const {
    double total = 0.0, scale = 1.0;
    for (double r : rewards) {
      total += scale * r;
      scale *= gamma;
    }
    return total;
  }
};

struct LossConfig {
  double gamma = 0.99;
  double kappa = 1.0;
  int n1 = 32;
  int n2 = 32;
  bool double_q = false;
  Head head = Head::ndqfn;

  void validate() const {
    if (!(kappa > 0.0)) throw ConfigError("kappa must be > 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (n1 < 1 || n2 < 1) throw ConfigError("fraction counts must be positive");
  }
};

// rho^kappa_tau(delta) = |tau - 1{delta < 0}| * L_kappa(delta) / kappa.
inline double quantile_huber(double delta, double tau, double kappa) {
  const double weight = std::abs(tau - (delta < 0.0 ? 1.0 : 0.0));
  const double magnitude = std::abs(delta);
  const double huber = magnitude <= kappa ? 0.5 * delta * delta : kappa * (magnitude - 0.5 * kappa);
  return weight * huber / kappa;
}

inline double quantile_huber_derivative(double delta, double tau, double kappa) {
  const double weight = std::abs(tau - (delta < 0.0 ? 1.0 : 0.0));
  if (std::abs(delta) <= kappa) return weight * delta / kappa;
  return weight * (delta > 0.0 ? 1.0 : -1.0);
}

struct QuantileLoss {
  double value = 0.0;
  Eigen::MatrixXd d_deltas;  // N1 x N2
};

// (1/N2) sum_i sum_j rho^kappa_{tau_i}(delta_ij). Only N2 divides; the sum
// over i is not averaged.
inline QuantileLoss huber_quantile_loss(const Eigen::MatrixXd& deltas, std::span<const double> taus, double kappa) {
  if (!(kappa > 0.0)) throw ConfigError("huber_quantile_loss: kappa must be > 0");
  if (static_cast<std::size_t>(deltas.rows()) != taus.size()) {
    throw std::invalid_argument("huber_quantile_loss: one fraction per row of deltas");
  }
  const double inv_n2 = 1.0 / static_cast<double>(deltas.cols());
  QuantileLoss out{0.0, Eigen::MatrixXd(deltas.rows(), deltas.cols())};
  for (Eigen::Index j = 0; j < deltas.cols(); ++j) {
    for (Eigen::Index i = 0; i < deltas.rows(); ++i) {
      const double tau = taus[static_cast<std::size_t>(i)];
      out.value += quantile_huber(deltas(i, j), tau, kappa) * inv_n2;
      out.d_deltas(i, j) = quantile_huber_derivative(deltas(i, j), tau, kappa) * inv_n2;
    }
  }
  return out;
}

// Lowest index among the maxima.
inline int argmax(std::span<const double> values) {
  int best = 0;
  for (int a = 1; a < static_cast<int>(values.size()); ++a) {
    if (values[static_cast<std::size_t>(a)] > values[static_cast<std::size_t>(best)]) best = a;
  }
  return best;
}

// A x B matrix of Q values from a batched NDQFN forward pass.
inline Eigen::MatrixXd q_values(const QuantileHeads& heads) {
  Eigen::MatrixXd q(heads.num_actions(), heads.batch());
  for (int b = 0; b < heads.batch(); ++b) {
    for (int a = 0; a < heads.num_actions(); ++a) q(a, b) = q_value(heads.curve(b, a));
  }
  return q;
}

// Q for the IQN head: midpoint quadrature of its values over the grid.
inline Eigen::MatrixXd iqn_q_values(const NetworkParams& params, const Eigen::MatrixXd& observations,
                                    const QuantileGrid& grid) {
  const int n = grid.segments();
  Eigen::MatrixXd taus(n, observations.cols());
  for (int i = 0; i < n; ++i) taus.row(i).setConstant(grid.midpoint(i));
  const Eigen::MatrixXd values = forward_iqn(params, observations, taus).values;
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(values.rows(), observations.cols());
  for (Eigen::Index b = 0; b < observations.cols(); ++b) {
    for (int i = 0; i < n; ++i) q.col(b) += grid.width(i) * values.col(b * n + i);
  }
  return q;
}

inline Eigen::MatrixXd q_values(const NetworkParams& params, const Eigen::MatrixXd& observations,
                                const QuantileGrid& grid, Head head) {
  if (head == Head::iqn) return iqn_q_values(params, observations, grid);
  return q_values(forward(params, observations, grid).heads);
}

struct BatchLoss {
  double loss = 0.0;
  Gradients gradients;
};

// Mean over samples of the quantile-Huber loss between a model's values at
// taus[b] for (state b, actions[b]) and fixed target values[b]. Targets carry
// no gradient.
inline BatchLoss quantile_regression_loss(const NetworkParams& model, const Eigen::MatrixXd& states,
                                          std::span<const int> actions,
                                          std::span<const std::vector<double>> target_values,
                                          std::span<const std::vector<double>> taus, const QuantileGrid& grid,
                                          double kappa, Head head) {
  const int batch = static_cast<int>(states.cols());
  if (batch == 0) throw std::invalid_argument("quantile_regression_loss: empty batch");
  const double inv_batch = 1.0 / batch;
  const int n1 = static_cast<int>(taus[0].size());
  const int n2 = static_cast<int>(target_values[0].size());

  BatchLoss out{0.0, Gradients(model.architecture())};
  Eigen::MatrixXd deltas(n1, n2);

  auto accumulate = [&](int b, std::span<const double> online_values) -> std::vector<double> {
    for (int i = 0; i < n1; ++i) {
      for (int j = 0; j < n2; ++j) deltas(i, j) = target_values[b][j] - online_values[i];
    }
    const QuantileLoss l = huber_quantile_loss(deltas, taus[b], kappa);
    out.loss += l.value * inv_batch;
    std::vector<double> d_online(static_cast<std::size_t>(n1));
    for (int i = 0; i < n1; ++i) d_online[i] = -l.d_deltas.row(i).sum() * inv_batch;
    return d_online;
  };

  std::vector<double> online_values(static_cast<std::size_t>(n1));
  if (head == Head::ndqfn) {
    const QuantileForward fwd = forward(model, states, grid);
    HeadGradients hg = HeadGradients::zeros_like(fwd.heads);
    const int n = grid.segments();
    std::vector<double> d_inc(static_cast<std::size_t>(n));
    for (int b = 0; b < batch; ++b) {
      const int a = actions[b];
      const PiecewiseQuantileFunction curve = fwd.heads.curve(b, a);
      for (int i = 0; i < n1; ++i) online_values[i] = evaluate(curve, taus[b][i]);
      const std::vector<double> d_online = accumulate(b, online_values);
      std::fill(d_inc.begin(), d_inc.end(), 0.0);
      double d_base = 0.0;
      for (int i = 0; i < n1; ++i) accumulate_evaluate_gradient(grid, taus[b][i], d_online[i], d_base, d_inc);
      hg.baseline(a, b) += d_base;
      for (int i = 0; i < n; ++i) hg.increments(a, b * n + i) += d_inc[i];
    }
    out.gradients = backward(model, fwd.tape, hg);
  } else {
    Eigen::MatrixXd tau_matrix(n1, batch);
    for (int b = 0; b < batch; ++b) {
      for (int i = 0; i < n1; ++i) tau_matrix(i, b) = taus[b][i];
    }
    const IqnForward fwd = forward_iqn(model, states, tau_matrix);
    Eigen::MatrixXd d_values = Eigen::MatrixXd::Zero(fwd.values.rows(), fwd.values.cols());
    for (int b = 0; b < batch; ++b) {
      const int a = actions[b];
      for (int i = 0; i < n1; ++i) online_values[i] = fwd.values(a, b * n1 + i);
      const std::vector<double> d_online = accumulate(b, online_values);
      for (int i = 0; i < n1; ++i) d_values(a, b * n1 + i) = d_online[i];
    }
    out.gradients = backward_iqn(model, fwd.tape, d_values);
  }
  if (!std::isfinite(out.loss)) throw NumericError("quantile regression loss is not finite");
  return out;
}

namespace detail {

inline std::vector<std::vector<double>> states_of(std::span<const NStepTransition> batch, bool next) {
  std::vector<std::vector<double>> s;
  s.reserve(batch.size());
  for (const auto& tr : batch) s.push_back(next ? tr.next_state : tr.state);
  return s;
}

}  // namespace detail

// n-step bootstrap targets per transition:
//   sum_k gamma^k r_{t+k} + gamma^n P_{tau'_j, target}(x_{t+n}, a*)
// with a* = argmax_a Q_target(x_{t+n}, a), or argmax under the online network
// when double_q is set. Terminal windows drop the bootstrap term.
inline std::vector<std::vector<double>> td_targets(const NetworkParams& online, const NetworkParams& target,
                                                   std::span<const NStepTransition> batch,
                                                   std::span<const FractionSample> fractions,
                                                   const QuantileGrid& grid, const LossConfig& config) {
  const auto& arch = target.architecture();
  const int batch_size = static_cast<int>(batch.size());
  const Eigen::MatrixXd next = stack_observations(arch, detail::states_of(batch, true));

  std::vector<std::vector<double>> targets(batch.size());
  Eigen::MatrixXd q_select;
  if (config.double_q) q_select = q_values(online, next, grid, config.head);

  if (config.head == Head::ndqfn) {
    const QuantileHeads heads = forward(target, next, grid).heads;
    if (!config.double_q) q_select = q_values(heads);
    for (int b = 0; b < batch_size; ++b) {
      const auto& tr = batch[b];
      const auto& tp = fractions[b].tau_primes;
      const double base = tr.discounted_reward_sum(config.gamma);
      auto& t = targets[b];
      t.assign(tp.size(), base);
      if (tr.done) continue;
      const int best = argmax(std::span<const double>(q_select.col(b).data(), q_select.rows()));
      const PiecewiseQuantileFunction curve = heads.curve(b, best);
      for (std::size_t j = 0; j < tp.size(); ++j) t[j] += tr.discount_power * evaluate(curve, tp[j]);
    }
  } else {
    if (!config.double_q) q_select = iqn_q_values(target, next, grid);
    const int n2 = static_cast<int>(fractions[0].tau_primes.size());
    Eigen::MatrixXd tau_matrix(n2, batch_size);
    for (int b = 0; b < batch_size; ++b) {
      for (int j = 0; j < n2; ++j) tau_matrix(j, b) = fractions[b].tau_primes[j];
    }
    const Eigen::MatrixXd values = forward_iqn(target, next, tau_matrix).values;
    for (int b = 0; b < batch_size; ++b) {
      const auto& tr = batch[b];
      const double base = tr.discounted_reward_sum(config.gamma);
      auto& t = targets[b];
      t.assign(static_cast<std::size_t>(n2), base);
      if (tr.done) continue;
      const int best = argmax(std::span<const double>(q_select.col(b).data(), q_select.rows()));
      for (int j = 0; j < n2; ++j) t[j] += tr.discount_power * values(best, b * n2 + j);
    }
  }
  for (const auto& t : targets) {
    for (double v : t) {
      if (!std::isfinite(v)) throw NumericError("non-finite TD target");
    }
  }
  return targets;
}

// delta_ij = target_j - P_{tau_i, online}(x_t, a_t), an N1 x N2 matrix.
inline Eigen::MatrixXd td_errors(const NetworkParams& online, const NetworkParams& target,
                                 const NStepTransition& transition, const FractionSample& fractions,
                                 const QuantileGrid& grid, const LossConfig& config) {
  const auto targets = td_targets(online, target, std::span(&transition, 1), std::span(&fractions, 1), grid, config);
  const auto& taus = fractions.taus;
  std::vector<double> online_values(taus.size());
  if (config.head == Head::ndqfn) {
    const auto curve = forward(online, transition.state, grid)[static_cast<std::size_t>(transition.action)];
    for (std::size_t i = 0; i < taus.size(); ++i) online_values[i] = evaluate(curve, taus[i]);
  } else {
    const Eigen::MatrixXd v = forward_iqn(online, transition.state, taus);
    for (std::size_t i = 0; i < taus.size(); ++i) online_values[i] = v(transition.action, static_cast<Eigen::Index>(i));
  }
  Eigen::MatrixXd deltas(static_cast<Eigen::Index>(taus.size()), static_cast<Eigen::Index>(targets[0].size()));
  for (Eigen::Index i = 0; i < deltas.rows(); ++i) {
    for (Eigen::Index j = 0; j < deltas.cols(); ++j) deltas(i, j) = targets[0][j] - online_values[i];
  }
  if (!deltas.allFinite()) throw NumericError("non-finite TD error");
  return deltas;
}

// Loss and exact online-network gradient for fixed fraction draws. The
// target network is treated as a constant.
inline BatchLoss batch_loss(const NetworkParams& online, const NetworkParams& target,
                            std::span<const NStepTransition> batch, std::span<const FractionSample> fractions,
                            const QuantileGrid& grid, const LossConfig& config) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  if (fractions.size() != batch.size()) throw std::invalid_argument("batch_loss: one fraction sample per transition");
  const auto targets = td_targets(online, target, batch, fractions, grid, config);
  std::vector<int> actions;
  std::vector<std::vector<double>> taus;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    actions.push_back(batch[b].action);
    taus.push_back(fractions[b].taus);
  }
  const Eigen::MatrixXd states = stack_observations(online.architecture(), detail::states_of(batch, false));
  return quantile_regression_loss(online, states, actions, targets, taus, grid, config.kappa, config.head);
}

// One Adam step on the mean per-transition loss, with fresh fractions per
// transition. Returns the batch loss before the update.
inline double train_step(NetworkParams& online, Adam& optimizer, const NetworkParams& target,
                         std::span<const NStepTransition> batch, const QuantileGrid& grid, const LossConfig& config,
                         Rng& rng) {
  std::vector<FractionSample> fractions;
  fractions.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) fractions.push_back(FractionSample::draw(config.n1, config.n2, rng));
  const BatchLoss result = batch_loss(online, target, batch, fractions, grid, config);
  optimizer.step(online, result.gradients);
  if (!online.all_finite()) throw NumericError("online parameters became non-finite after an update");
  return result.loss;
}

}  // namespace ndqfn
