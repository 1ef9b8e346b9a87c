#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <tuple>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "ndqfn/common.hpp"

namespace ndqfn {

// optimal_return is the undiscounted return of the policy that is optimal
// for the discounted objective at reference_discount; random_policy_return is
// the expected undiscounted return of the uniform random policy.
struct EnvSpec {
  std::string name;
  int observation_dim = 0;
  int num_actions = 0;
  int max_episode_steps = 0;
  double optimal_return = 0.0;
  double random_policy_return = 0.0;
  double reference_discount = 0.99;
};

struct StepResult {
  std::vector<double> observation;
  double reward = 0.0;
  bool terminal = false;   // absorbing end of the MDP
  bool truncated = false;  // episode cap reached, state is not absorbing

  bool done() const { return terminal || truncated; }
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual std::vector<double> reset() = 0;
  virtual StepResult step(int action) = 0;
  // Observations worth inspecting after training (e.g. for curve dumps).
  virtual std::vector<std::vector<double>> probe_observations() const = 0;
};

namespace detail {

inline std::vector<double> one_hot(int size, int index) {
  std::vector<double> v(static_cast<std::size_t>(size), 0.0);
  v[static_cast<std::size_t>(index)] = 1.0;
  return v;
}

inline void check_action(int action, int num_actions) {
  if (action < 0 || action >= num_actions) {
    throw std::out_of_range("action " + std::to_string(action) + " outside [0, " + std::to_string(num_actions) + ")");
  }
}

}  // namespace detail

// States 0..L-1, start at 0, one-hot observations. Moving left pays a small
// 0.001 reward and moves toward state 0; moving right pays nothing until it
// reaches state L-1, which pays 1.0 and terminates. Episodes are capped at 4L
// steps.
//
// With scrambled actions, which action index means "right" is drawn per state
// from the seed, so a policy that repeats one action index cannot walk the
// chain. Without it, action 0 is left and action 1 is right everywhere.
class ChainEnv final : public Environment {
 public:
  enum class Direction { left, right };
  static constexpr double kSmallReward = 0.001;
  static constexpr double kGoalReward = 1.0;

  ChainEnv(int length, double noise, std::uint64_t seed, bool scramble_actions = true)
      : length_(length), noise_(noise), rng_(seed) {
    if (length < 3) throw ConfigError("chain length must be >= 3");
    if (!(noise >= 0.0)) throw ConfigError("chain noise must be >= 0");
    right_action_.assign(static_cast<std::size_t>(length), 1);
    if (scramble_actions) {
      for (int& a : right_action_) a = static_cast<int>(rng_.below(2));
    }
    spec_.name = "chain";
    spec_.observation_dim = length;
    spec_.num_actions = 2;
    spec_.max_episode_steps = 4 * length;
    spec_.optimal_return = kGoalReward;
    spec_.random_policy_return = random_policy_return(length);
  }

  const EnvSpec& spec() const override { return spec_; }
  int length() const { return length_; }
  int position() const { return position_; }
  int right_action(int state) const { return right_action_[static_cast<std::size_t>(state)]; }
  int left_action(int state) const { return 1 - right_action(state); }
  Direction direction(int state, int action) const {
    return action == right_action(state) ? Direction::right : Direction::left;
  }

  std::vector<double> reset() override {
    position_ = 0;
    elapsed_ = 0;
    return detail::one_hot(length_, position_);
  }

  StepResult step(int action) override {
    detail::check_action(action, 2);
    StepResult r;
    if (direction(position_, action) == Direction::left) {
      r.reward = kSmallReward;
      if (noise_ > 0.0) r.reward += rng_.uniform(-noise_, noise_);
      position_ = std::max(0, position_ - 1);
    } else {
      ++position_;
      if (position_ == length_ - 1) {
        r.reward = kGoalReward;
        r.terminal = true;
      }
    }
    ++elapsed_;
    r.truncated = !r.terminal && elapsed_ >= spec_.max_episode_steps;
    r.observation = detail::one_hot(length_, position_);
    return r;
  }

  std::vector<std::vector<double>> probe_observations() const override {
    std::vector<std::vector<double>> out;
    for (int s = 0; s < length_; ++s) out.push_back(detail::one_hot(length_, s));
    return out;
  }

  // Expected return of the uniform policy, by backward induction over (state, time).
  static double random_policy_return(int length) {
    const int horizon = 4 * length;
    std::vector<double> next(static_cast<std::size_t>(length), 0.0), cur(next.size());
    for (int t = horizon - 1; t >= 0; --t) {
      for (int s = 0; s < length - 1; ++s) {
        const double left = kSmallReward + next[static_cast<std::size_t>(std::max(0, s - 1))];
        const double right = (s + 1 == length - 1) ? kGoalReward : next[static_cast<std::size_t>(s + 1)];
        cur[static_cast<std::size_t>(s)] = 0.5 * (left + right);
      }
      cur[static_cast<std::size_t>(length - 1)] = 0.0;
      std::swap(cur, next);
    }
    return next[0];
  }

 private:
  int length_;
  double noise_;
  Rng rng_;
  std::vector<int> right_action_;
  EnvSpec spec_;
  int position_ = 0;
  int elapsed_ = 0;
};

// size x size grid, start at the top-left corner, goal at the bottom-right.
// Actions: 0 up, 1 down, 2 left, 3 right. Every move costs step_penalty
// (bumping a wall included); entering the goal also pays goal_reward and
// terminates. Episodes are capped at 4 size^2 steps.
class GridworldEnv final : public Environment {
 public:
  GridworldEnv(int size, double goal_reward, double step_penalty, std::uint64_t /*seed*/)
      : size_(size), goal_reward_(goal_reward), step_penalty_(step_penalty) {
    if (size < 2) throw ConfigError("gridworld size must be >= 2");
    if (!(goal_reward >= 0.0) || !(step_penalty >= 0.0)) {
      throw ConfigError("gridworld rewards: goal_reward and step_penalty must be >= 0");
    }
    spec_.name = "gridworld";
    spec_.observation_dim = size * size;
    spec_.num_actions = 4;
    spec_.max_episode_steps = 4 * size * size;
    spec_.optimal_return = goal_reward - step_penalty * 2 * (size - 1);
    spec_.random_policy_return = random_policy_return();
  }

  const EnvSpec& spec() const override { return spec_; }

  std::vector<double> reset() override {
    row_ = col_ = 0;
    elapsed_ = 0;
    return observation();
  }

  StepResult step(int action) override {
    detail::check_action(action, 4);
    std::tie(row_, col_) = move(row_, col_, action);
    StepResult r;
    r.reward = -step_penalty_;
    if (row_ == size_ - 1 && col_ == size_ - 1) {
      r.reward += goal_reward_;
      r.terminal = true;
    }
    ++elapsed_;
    r.truncated = !r.terminal && elapsed_ >= spec_.max_episode_steps;
    r.observation = observation();
    return r;
  }

  std::vector<std::vector<double>> probe_observations() const override {
    std::vector<std::vector<double>> out;
    for (int c = 0; c < size_ * size_; ++c) out.push_back(detail::one_hot(size_ * size_, c));
    return out;
  }

  std::pair<int, int> move(int row, int col, int action) const {
    switch (action) {
      case 0: row = std::max(0, row - 1); break;
      case 1: row = std::min(size_ - 1, row + 1); break;
      case 2: col = std::max(0, col - 1); break;
      default: col = std::min(size_ - 1, col + 1); break;
    }
    return {row, col};
  }

 private:
  std::vector<double> observation() const { return detail::one_hot(size_ * size_, row_ * size_ + col_); }

  double random_policy_return() const {
    const int cells = size_ * size_;
    const int goal = cells - 1;
    std::vector<double> next(static_cast<std::size_t>(cells), 0.0), cur(next.size());
    for (int t = spec_.max_episode_steps - 1; t >= 0; --t) {
      for (int c = 0; c < cells; ++c) {
        if (c == goal) {
          cur[static_cast<std::size_t>(c)] = 0.0;
          continue;
        }
        double total = 0.0;
        for (int a = 0; a < 4; ++a) {
          const auto [r, k] = move(c / size_, c % size_, a);
          const int n = r * size_ + k;
          total += -step_penalty_ + (n == goal ? goal_reward_ : next[static_cast<std::size_t>(n)]);
        }
        cur[static_cast<std::size_t>(c)] = total / 4.0;
      }
      std::swap(cur, next);
    }
    return next[0];
  }

  int size_;
  double goal_reward_;
  double step_penalty_;
  EnvSpec spec_;
  int row_ = 0;
  int col_ = 0;
  int elapsed_ = 0;
};

// A finite reward distribution with a closed-form quantile function.
struct DiscreteDistribution {
  std::vector<double> values;         // ascending
  std::vector<double> probabilities;  // same length, sums to 1

  void validate() const {
    if (values.empty() || values.size() != probabilities.size()) {
      throw ConfigError("discrete distribution: values and probabilities must be non-empty and aligned");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!(probabilities[i] >= 0.0)) throw ConfigError("discrete distribution: negative probability");
      if (i > 0 && !(values[i - 1] < values[i])) throw ConfigError("discrete distribution: values must ascend");
      total += probabilities[i];
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError("discrete distribution: probabilities must sum to 1");
  }

  double mean() const {
    return std::inner_product(values.begin(), values.end(), probabilities.begin(), 0.0);
  }

  // inf{z : P(Z <= z) > tau}, right-continuous in tau.
  double quantile(double tau) const {
    double cdf = 0.0;
    for (std::size_t i = 0; i + 1 < values.size(); ++i) {
      cdf += probabilities[i];
      if (cdf > tau) return values[i];
    }
    return values.back();
  }

  double sample(Rng& rng) const {
    const double u = rng.uniform();
    double cdf = 0.0;
    for (std::size_t i = 0; i + 1 < values.size(); ++i) {
      cdf += probabilities[i];
      if (u < cdf) return values[i];
    }
    return values.back();
  }
};

// One state, one step per episode; each action draws from its own reward
// distribution.
class StochasticRewardEnv final : public Environment {
 public:
  // Arm k pays 1 with probability 0.5 (1 - k/arms), else 0. Arm 0 is the
  // fair Bernoulli(0.5) arm and the unique optimum.
  static std::vector<DiscreteDistribution> default_arms(int arms) {
    if (arms < 2) throw ConfigError("stochastic reward env needs >= 2 arms");
    std::vector<DiscreteDistribution> out;
    for (int k = 0; k < arms; ++k) {
      const double p = 0.5 * (1.0 - static_cast<double>(k) / arms);
      out.push_back({{0.0, 1.0}, {1.0 - p, p}});
    }
    return out;
  }

  StochasticRewardEnv(int arms, std::uint64_t seed) : StochasticRewardEnv(default_arms(arms), seed) {}

  StochasticRewardEnv(std::vector<DiscreteDistribution> arms, std::uint64_t seed)
      : arms_(std::move(arms)), rng_(seed) {
    if (arms_.size() < 2) throw ConfigError("stochastic reward env needs >= 2 arms");
    double best = -std::numeric_limits<double>::infinity(), total = 0.0;
    for (const auto& arm : arms_) {
      arm.validate();
      best = std::max(best, arm.mean());
      total += arm.mean();
    }
    spec_.name = "stochastic";
    spec_.observation_dim = 1;
    spec_.num_actions = static_cast<int>(arms_.size());
    spec_.max_episode_steps = 1;
    spec_.optimal_return = best;
    spec_.random_policy_return = total / static_cast<double>(arms_.size());
  }

  const EnvSpec& spec() const override { return spec_; }
  const std::vector<DiscreteDistribution>& arms() const { return arms_; }

  std::vector<double> reset() override { return {1.0}; }

  StepResult step(int action) override {
    detail::check_action(action, spec_.num_actions);
    StepResult r;
    r.reward = arms_[static_cast<std::size_t>(action)].sample(rng_);
    r.terminal = true;
    r.observation = {1.0};
    return r;
  }

  std::vector<std::vector<double>> probe_observations() const override { return {{1.0}}; }

 private:
  std::vector<DiscreteDistribution> arms_;
  Rng rng_;
  EnvSpec spec_;
};

}  // namespace ndqfn
