#pragma once

#include <cmath>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "ndqfn/envs.hpp"
#include "ndqfn/explore.hpp"
#include "ndqfn/loss.hpp"
#include "ndqfn/net.hpp"
#include "ndqfn/optim.hpp"

namespace ndqfn {

struct AgentConfig {
  double gamma = 0.99;
  int n_step = 3;
  int grid_size = 32;  // N
  int n1 = 32;
  int n2 = 32;
  double kappa = 1.0;
  double learning_rate = 5e-5;
  double adam_epsilon = 3.125e-4;
  int batch_size = 32;
  int buffer_capacity = 50000;
  int warmup = 1000;
  int train_period = 4;
  int sync_period = 500;
  long budget = 100000;
  int eval_period = 1000;
  int eval_episodes = 10;
  double epsilon_train = 0.01;
  double epsilon_eval = 0.001;
  bool double_q = false;
  int embed_dim = 64;
  int hidden_dim = 64;
  int cosine_features = 64;
  Activation increment_activation = Activation::relu;
  Head head = Head::ndqfn;
  double init_gain = 1.0;  // weights and biases ~ U(+-init_gain / sqrt(fan_in))

  void validate() const {
    loss_config().validate();
    if (n_step < 1) throw ConfigError("agent.n_step must be >= 1");
    if (grid_size < 1) throw ConfigError("agent.grid_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("agent.learning_rate must be >= 0");
    if (!(adam_epsilon > 0.0)) throw ConfigError("agent.adam_epsilon must be > 0");
    if (batch_size < 1 || buffer_capacity < 1 || warmup < 0 || train_period < 1 || sync_period < 1 ||
        budget < 0 || eval_period < 1 || eval_episodes < 1) {
      throw ConfigError("agent: sizes and periods must be positive");
    }
    if (!(epsilon_train >= 0.0 && epsilon_train <= 1.0) || !(epsilon_eval >= 0.0 && epsilon_eval <= 1.0)) {
      throw ConfigError("agent: epsilons must lie in [0, 1]");
    }
    if (embed_dim < 1 || hidden_dim < 1 || cosine_features < 1) throw ConfigError("agent: network sizes must be positive");
    if (!(init_gain > 0.0) || !std::isfinite(init_gain)) throw ConfigError("agent.init_gain must be positive");
  }

  LossConfig loss_config() const { return {gamma, kappa, n1, n2, double_q, head}; }

  Architecture architecture(const EnvSpec& env) const {
    return {env.observation_dim, env.num_actions, embed_dim, hidden_dim, cosine_features, increment_activation};
  }
};

// Fixed-capacity ring of transitions with uniform sampling.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
    storage_.reserve(std::min<std::size_t>(capacity, 1 << 16));
  }

  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }
  const NStepTransition& operator[](std::size_t i) const { return storage_[i]; }

  void add(NStepTransition transition) {
    if (storage_.size() < capacity_) {
      storage_.push_back(std::move(transition));
    } else {
      storage_[next_] = std::move(transition);
    }
    next_ = (next_ + 1) % capacity_;
  }

  // Uniform with replacement over filled slots.
  std::vector<NStepTransition> sample(std::size_t count, Rng& rng) const {
    if (storage_.empty()) throw std::logic_error("sampling from an empty replay buffer");
    std::vector<NStepTransition> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(storage_[rng.below(storage_.size())]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<NStepTransition> storage_;
};

// Sliding window that turns single steps into n-step transitions. A terminal
// step flushes every open window with discount 0; a truncated episode flushes
// them with gamma^k so they still bootstrap.
class NStepAssembler {
 public:
  NStepAssembler(int n, double gamma) : n_(n), gamma_(gamma) {}

  std::vector<NStepTransition> push(const std::vector<double>& state, int action, double reward,
                                    const std::vector<double>& next_state, bool terminal, bool truncated) {
    window_.push_back({state, action, reward});
    std::vector<NStepTransition> out;
    if (terminal || truncated) {
      while (!window_.empty()) {
        out.push_back(make(window_.size(), next_state, terminal));
        window_.pop_front();
      }
    } else if (static_cast<int>(window_.size()) == n_) {
      out.push_back(make(window_.size(), next_state, false));
      window_.pop_front();
    }
    return out;
  }

  void clear() { window_.clear(); }

 private:
  struct Entry {
    std::vector<double> state;
    int action;
    double reward;
  };

  NStepTransition make(std::size_t length, const std::vector<double>& next_state, bool terminal) const {
    NStepTransition tr;
    tr.state = window_.front().state;
    tr.action = window_.front().action;
    for (std::size_t k = 0; k < length; ++k) tr.rewards.push_back(window_[k].reward);
    tr.next_state = next_state;
    tr.done = terminal;
    tr.discount_power = terminal ? 0.0 : std::pow(gamma_, static_cast<double>(length));
    return tr;
  }

  int n_;
  double gamma_;
  std::deque<Entry> window_;
};

struct StepRecord {
  long step = 0;
  int action = 0;
  double reward = 0.0;
  bool episode_end = false;
  double episode_return = 0.0;  // running return, final when episode_end
  std::optional<double> loss;
  std::optional<double> predictor_loss;
  double mean_bonus = 0.0;  // mean over actions at the acting state
  bool synced = false;
};

struct EvaluationResult {
  double mean_return = 0.0;
  std::vector<double> returns;
};

// Online, target and predictor networks plus replay and the training loop.
// Online and target share their initialization; the predictor draws from a
// separate seed stream.
class Agent {
 public:
  Agent(AgentConfig config, ExplorationConfig exploration, const EnvSpec& env, std::uint64_t seed)
      : config_((config.validate(), config)),
        exploration_((exploration.validate(), exploration)),
        grid_(config.grid_size),
        online_(init(config.architecture(env), config.init_gain, seed, Stream::online_init)),
        target_(online_),
        predictor_(init(config.architecture(env), config.init_gain, seed, Stream::predictor_init)),
        optimizer_(online_.architecture(), {config.learning_rate, 0.9, 0.999, config.adam_epsilon}),
        predictor_optimizer_(online_.architecture(),
                             {exploration.predictor_learning_rate, 0.9, 0.999, config.adam_epsilon}),
        buffer_(static_cast<std::size_t>(config.buffer_capacity)),
        assembler_(config.n_step, config.gamma),
        action_rng_(seed, Stream::action_selection),
        eval_rng_(seed, Stream::evaluation_policy),
        replay_rng_(seed, Stream::replay),
        fraction_rng_(seed, Stream::fractions),
        predictor_rng_(seed, Stream::predictor_fractions) {
    if (config_.head == Head::iqn && exploration_.strategy != Strategy::none) {
      throw ConfigError("exploration bonuses are defined on the ndqfn head only; use explore.strategy = none with agent.head = iqn");
    }
  }

  const AgentConfig& config() const { return config_; }
  const ExplorationConfig& exploration() const { return exploration_; }
  const QuantileGrid& grid() const { return grid_; }
  const NetworkParams& online() const { return online_; }
  const NetworkParams& target() const { return target_; }
  const NetworkParams& predictor() const { return predictor_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  long steps() const { return steps_; }
  long train_steps() const { return train_steps_; }

  std::vector<double> q_values(std::span<const double> obs) const {
    const Eigen::MatrixXd q = ndqfn::q_values(online_, stack_observations(online_.architecture(), obs), grid_, config_.head);
    return {q.data(), q.data() + q.size()};
  }

  std::vector<double> bonuses(std::span<const double> obs) const {
    return action_bonuses(exploration_, online_, target_, predictor_, obs, grid_, steps_ + 1);
  }

  StepRecord step(Environment& env) {
    if (!observation_) {
      observation_ = env.reset();
      episode_return_ = 0.0;
      assembler_.clear();
    }
    const std::vector<double>& obs = *observation_;
    StepRecord rec;

    const std::vector<double> q = q_values(obs);
    std::vector<double> bonus;
    if (exploration_.strategy != Strategy::none) {
      bonus = bonuses(obs);
      double total = 0.0;
      for (double b : bonus) total += b;
      rec.mean_bonus = total / static_cast<double>(bonus.size());
    }
    rec.action = select_action(q, bonus, exploration_.bonus_rate, config_.epsilon_train, action_rng_);

    StepResult result = env.step(rec.action);
    rec.reward = result.reward;
    episode_return_ += result.reward;
    for (auto& tr : assembler_.push(obs, rec.action, result.reward, result.observation, result.terminal, result.truncated)) {
      buffer_.add(std::move(tr));
    }
    ++steps_;
    rec.step = steps_;
    rec.episode_return = episode_return_;
    if (result.done()) {
      rec.episode_end = true;
      observation_.reset();
    } else {
      observation_ = std::move(result.observation);
    }

    if (static_cast<long>(buffer_.size()) >= config_.warmup && steps_ % config_.train_period == 0) {
      const std::vector<NStepTransition> batch = buffer_.sample(static_cast<std::size_t>(config_.batch_size), replay_rng_);
      rec.loss = train_step(online_, optimizer_, target_, batch, grid_, config_.loss_config(), fraction_rng_);
      if (exploration_.uses_predictor()) {
        rec.predictor_loss = train_predictor(predictor_, predictor_optimizer_, target_, batch, grid_,
                                             config_.loss_config(), predictor_rng_);
      }
      ++train_steps_;
    }
    if (steps_ % config_.sync_period == 0) {
      sync_params(online_, target_);
      rec.synced = true;
    }
    return rec;
  }

  // epsilon_eval-greedy on Q alone, no learning. env is reset per episode.
  EvaluationResult evaluate(Environment& env, int episodes) {
    if (episodes < 1) throw ConfigError("evaluate: need at least one episode");
    EvaluationResult out;
    for (int e = 0; e < episodes; ++e) {
      std::vector<double> obs = env.reset();
      double total = 0.0;
      for (;;) {
        const std::vector<double> q = q_values(obs);
        const int action = select_action(q, {}, 0.0, config_.epsilon_eval, eval_rng_);
        StepResult r = env.step(action);
        total += r.reward;
        if (r.done()) break;
        obs = std::move(r.observation);
      }
      out.returns.push_back(total);
    }
    double sum = 0.0;
    for (double r : out.returns) sum += r;
    out.mean_return = sum / static_cast<double>(out.returns.size());
    return out;
  }

 private:
  static NetworkParams init(const Architecture& arch, double gain, std::uint64_t seed, Stream stream) {
    Rng rng(seed, stream);
    return initialize_params(arch, rng, gain);
  }

  AgentConfig config_;
  ExplorationConfig exploration_;
  QuantileGrid grid_;
  NetworkParams online_;
  NetworkParams target_;
  NetworkParams predictor_;
  Adam optimizer_;
  Adam predictor_optimizer_;
  ReplayBuffer buffer_;
  NStepAssembler assembler_;
  Rng action_rng_;
  Rng eval_rng_;
  Rng replay_rng_;
  Rng fraction_rng_;
  Rng predictor_rng_;
  std::optional<std::vector<double>> observation_;
  double episode_return_ = 0.0;
  long steps_ = 0;
  long train_steps_ = 0;
};

}  // namespace ndqfn
