#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ndqfn/common.hpp"
#include "ndqfn/quantfn.hpp"

namespace ndqfn {

// Output nonlinearity of the increment head. Both are >= 0.
enum class Activation { relu, softplus };

inline std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "softplus"; }

inline Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::relu;
  if (text == "softplus") return Activation::softplus;
  throw ConfigError("unknown activation '" + std::string(text) + "'");
}

struct Architecture {
  int observation_dim = 1;
  int num_actions = 2;
  int embed_dim = 64;
  int hidden_dim = 64;
  int cosine_features = 64;
  Activation increment_activation = Activation::relu;

  void validate() const {
    if (observation_dim < 1 || num_actions < 1 || embed_dim < 1 || hidden_dim < 1 ||
        cosine_features < 1) {
      throw ConfigError("Architecture: every dimension must be positive");
    }
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Parameter blocks of one network. Weight blocks are (out x in).
enum class Block : int {
  psi_weight,
  psi_bias,
  phi_weight,
  phi_bias,
  f_hidden_weight,
  f_hidden_bias,
  f_out_weight,
  f_out_bias,
  g_hidden_weight,
  g_hidden_bias,
  g_out_weight,
  g_out_bias,
  iqn_hidden_weight,
  iqn_hidden_bias,
  iqn_out_weight,
  iqn_out_bias,
};

inline constexpr int kBlockCount = 16;

struct BlockShape {
  std::string_view name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

using ParameterLayout = std::array<BlockShape, kBlockCount>;

inline ParameterLayout make_layout(const Architecture& arch) {
  arch.validate();
  const int d = arch.embed_dim, h = arch.hidden_dim, a = arch.num_actions;
  ParameterLayout layout{{
      {"psi.weight", d, arch.observation_dim},
      {"psi.bias", d, 1},
      {"phi.weight", d, arch.cosine_features},
      {"phi.bias", d, 1},
      {"f.hidden.weight", h, d},
      {"f.hidden.bias", h, 1},
      {"f.out.weight", a, h},
      {"f.out.bias", a, 1},
      {"g.hidden.weight", h, 2 * d},
      {"g.hidden.bias", h, 1},
      {"g.out.weight", a, h},
      {"g.out.bias", a, 1},
      {"iqn.hidden.weight", h, d},
      {"iqn.hidden.bias", h, 1},
      {"iqn.out.weight", a, h},
      {"iqn.out.bias", a, 1},
  }};
  std::size_t offset = 0;
  for (auto& block : layout) {
    block.offset = offset;
    offset += block.size();
  }
  return layout;
}

// Flat storage for every parameter of one network, with typed block views.
// The tag keeps parameters and gradients from being mixed up.
template <typename Tag>
class ParameterArrays {
 public:
  using Matrix = Eigen::Map<Eigen::MatrixXd>;
  using ConstMatrix = Eigen::Map<const Eigen::MatrixXd>;

  explicit ParameterArrays(const Architecture& arch) : arch_(arch), layout_(make_layout(arch)) {
    const auto& last = layout_.back();
    values_.assign(last.offset + last.size(), 0.0);
  }

  const Architecture& architecture() const { return arch_; }
  const ParameterLayout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  const BlockShape& shape(Block b) const { return layout_[static_cast<std::size_t>(b)]; }

  Matrix block(Block b) {
    const auto& s = shape(b);
    return Matrix(values_.data() + s.offset, s.rows, s.cols);
  }
  ConstMatrix block(Block b) const {
    const auto& s = shape(b);
    return ConstMatrix(values_.data() + s.offset, s.rows, s.cols);
  }

  void set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const ParameterArrays& a, const ParameterArrays& b) {
    return a.arch_ == b.arch_ && a.values_ == b.values_;
  }

 private:
  Architecture arch_;
  ParameterLayout layout_;
  std::vector<double> values_;
};

using NetworkParams = ParameterArrays<struct NetworkParamsTag>;
using Gradients = ParameterArrays<struct GradientsTag>;

// Uniform(-gain/sqrt(fan_in), gain/sqrt(fan_in)) for every weight and bias.
inline NetworkParams initialize_params(const Architecture& arch, Rng& rng, double gain = 1.0) {
  NetworkParams params(arch);
  for (int b = 0; b < kBlockCount; b += 2) {
    const auto& weight = params.shape(static_cast<Block>(b));
    const double bound = gain / std::sqrt(static_cast<double>(weight.cols));
    for (int part = 0; part < 2; ++part) {
      const auto& s = params.shape(static_cast<Block>(b + part));
      auto values = params.values().subspan(s.offset, s.size());
      for (double& v : values) v = rng.uniform(-bound, bound);
    }
  }
  return params;
}

inline void sync_params(const NetworkParams& src, NetworkParams& dst) {
  if (!(src.architecture() == dst.architecture())) {
    throw ConfigError("sync_params: architecture mismatch");
  }
  std::copy(src.values().begin(), src.values().end(), dst.values().begin());
}

namespace detail {

inline Eigen::MatrixXd relu(const Eigen::MatrixXd& x) { return x.cwiseMax(0.0); }

// Subgradient 0 at exactly zero.
inline Eigen::MatrixXd relu_mask(const Eigen::MatrixXd& pre) {
  return (pre.array() > 0.0).cast<double>().matrix();
}

inline Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline Eigen::MatrixXd affine(Eigen::Map<const Eigen::MatrixXd> weight, Eigen::Map<const Eigen::MatrixXd> bias,
                              const Eigen::MatrixXd& input) {
  Eigen::MatrixXd out = weight * input;
  out.colwise() += bias.col(0);
  return out;
}

// cos(pi * k * tau) for k = 0 .. n-1, one column per fraction.
inline Eigen::MatrixXd cosine_features(int n, std::span<const double> taus) {
  Eigen::MatrixXd c(n, static_cast<Eigen::Index>(taus.size()));
  for (Eigen::Index col = 0; col < c.cols(); ++col) {
    for (int k = 0; k < n; ++k) c(k, col) = std::cos(std::numbers::pi * k * taus[static_cast<std::size_t>(col)]);
  }
  return c;
}

inline void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite values in ") + what);
}

}  // namespace detail

// Column-stacks a batch of observations, checking their dimension.
inline Eigen::MatrixXd stack_observations(const Architecture& arch,
                                          std::span<const std::vector<double>> observations) {
  Eigen::MatrixXd x(arch.observation_dim, static_cast<Eigen::Index>(observations.size()));
  for (std::size_t b = 0; b < observations.size(); ++b) {
    if (static_cast<int>(observations[b].size()) != arch.observation_dim) {
      throw ConfigError("observation has dimension " + std::to_string(observations[b].size()) +
                        ", network expects " + std::to_string(arch.observation_dim));
    }
    for (int r = 0; r < arch.observation_dim; ++r) x(r, static_cast<Eigen::Index>(b)) = observations[b][r];
  }
  return x;
}

inline Eigen::MatrixXd stack_observations(const Architecture& arch, std::span<const double> observation) {
  std::vector<double> copy(observation.begin(), observation.end());
  return stack_observations(arch, std::span<const std::vector<double>>(&copy, 1));
}

// psi(x) = ReLU(W x + b), a dense stand-in for the convolutional torso.
inline Eigen::VectorXd embed_state(const NetworkParams& params, std::span<const double> observation) {
  const Eigen::MatrixXd x = stack_observations(params.architecture(), observation);
  return detail::relu(detail::affine(params.block(Block::psi_weight), params.block(Block::psi_bias), x)).col(0);
}

// phi_j(tau) = ReLU(sum_k cos(pi k tau) w_kj + b_j).
inline Eigen::VectorXd embed_fraction(const NetworkParams& params, double tau) {
  const Eigen::MatrixXd c = detail::cosine_features(params.architecture().cosine_features, std::span(&tau, 1));
  return detail::relu(detail::affine(params.block(Block::phi_weight), params.block(Block::phi_bias), c)).col(0);
}

// ---------------------------------------------------------------------------
// NDQFN head
// ---------------------------------------------------------------------------

// Activations of one batched forward pass, enough for an exact backward pass.
// Increment columns are ordered sample-major: column b*N + (i-1) holds
// Delta_i of sample b.
struct ForwardTape {
  Eigen::MatrixXd observations;     // obs_dim x B
  Eigen::MatrixXd state_pre;        // d x B
  Eigen::MatrixXd state;            // d x B
  Eigen::MatrixXd cosines;          // n_cos x (N+1)
  Eigen::MatrixXd fraction_pre;     // d x (N+1)
  Eigen::MatrixXd fraction;         // d x (N+1)
  Eigen::MatrixXd baseline_hidden;  // h x B, sigmoid output
  Eigen::MatrixXd product;          // d x BN, psi(x) * phi(p_i)
  Eigen::MatrixXd difference;       // d x N, phi(p_i) - phi(p_{i-1})
  Eigen::MatrixXd increment_hidden_pre;  // h x BN
  Eigen::MatrixXd increment_hidden;      // h x BN
  Eigen::MatrixXd increment_pre;         // A x BN
  int batch = 0;
  int segments = 0;
};

struct QuantileHeads {
  QuantileGrid grid;
  Eigen::MatrixXd baseline;    // A x B
  Eigen::MatrixXd increments;  // A x BN

  int batch() const { return static_cast<int>(baseline.cols()); }
  int num_actions() const { return static_cast<int>(baseline.rows()); }

  PiecewiseQuantileFunction curve(int sample, int action) const {
    const int n = grid.segments();
    std::vector<double> inc(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) inc[static_cast<std::size_t>(i)] = increments(action, sample * n + i);
    return PiecewiseQuantileFunction(grid, baseline(action, sample), std::move(inc));
  }

  std::vector<PiecewiseQuantileFunction> curves(int sample) const {
    std::vector<PiecewiseQuantileFunction> out;
    out.reserve(static_cast<std::size_t>(num_actions()));
    for (int a = 0; a < num_actions(); ++a) out.push_back(curve(sample, a));
    return out;
  }
};

// d(loss)/d(head outputs), shaped like QuantileHeads.
struct HeadGradients {
  Eigen::MatrixXd baseline;
  Eigen::MatrixXd increments;

  static HeadGradients zeros_like(const QuantileHeads& heads) {
    return {Eigen::MatrixXd::Zero(heads.baseline.rows(), heads.baseline.cols()),
            Eigen::MatrixXd::Zero(heads.increments.rows(), heads.increments.cols())};
  }
};

struct QuantileForward {
  QuantileHeads heads;
  ForwardTape tape;
};

inline QuantileForward forward(const NetworkParams& params, const Eigen::MatrixXd& observations,
                               const QuantileGrid& grid) {
  using detail::affine;
  const auto& arch = params.architecture();
  if (observations.rows() != arch.observation_dim) throw ConfigError("forward: observation dimension mismatch");

  const int batch = static_cast<int>(observations.cols());
  const int n = grid.segments();
  const int d = arch.embed_dim;

  ForwardTape t;
  t.batch = batch;
  t.segments = n;
  t.observations = observations;
  t.state_pre = affine(params.block(Block::psi_weight), params.block(Block::psi_bias), observations);
  t.state = detail::relu(t.state_pre);

  t.cosines = detail::cosine_features(arch.cosine_features, grid.points());
  t.fraction_pre = affine(params.block(Block::phi_weight), params.block(Block::phi_bias), t.cosines);
  t.fraction = detail::relu(t.fraction_pre);

  t.baseline_hidden = detail::sigmoid(affine(params.block(Block::f_hidden_weight), params.block(Block::f_hidden_bias), t.state));

  t.difference = t.fraction.rightCols(n) - t.fraction.leftCols(n);
  t.product.resize(d, static_cast<Eigen::Index>(batch) * n);
  for (int b = 0; b < batch; ++b) {
    t.product.middleCols(static_cast<Eigen::Index>(b) * n, n) =
        t.fraction.rightCols(n).array().colwise() * t.state.col(b).array();
  }

  // g's first layer on [product; difference], split so the state-independent
  // difference half is multiplied once per grid rather than once per sample.
  const auto g_hidden = params.block(Block::g_hidden_weight);
  const Eigen::MatrixXd diff_part = g_hidden.rightCols(d) * t.difference;  // h x N
  t.increment_hidden_pre = g_hidden.leftCols(d) * t.product;
  for (int b = 0; b < batch; ++b) {
    t.increment_hidden_pre.middleCols(static_cast<Eigen::Index>(b) * n, n) += diff_part;
  }
  t.increment_hidden_pre.colwise() += params.block(Block::g_hidden_bias).col(0);
  t.increment_hidden = detail::relu(t.increment_hidden_pre);
  t.increment_pre = affine(params.block(Block::g_out_weight), params.block(Block::g_out_bias), t.increment_hidden);

  QuantileHeads heads{grid, affine(params.block(Block::f_out_weight), params.block(Block::f_out_bias), t.baseline_hidden), {}};
  if (arch.increment_activation == Activation::relu) {
    heads.increments = detail::relu(t.increment_pre);
  } else {
    heads.increments = t.increment_pre.unaryExpr([](double v) { return detail::softplus(v); });
  }
  detail::require_finite(heads.baseline, "baseline head");
  detail::require_finite(heads.increments, "increment head");
  return {std::move(heads), std::move(t)};
}

// Per-action curves for a single observation.
inline std::vector<PiecewiseQuantileFunction> forward(const NetworkParams& params,
                                                      std::span<const double> observation,
                                                      const QuantileGrid& grid) {
  return forward(params, stack_observations(params.architecture(), observation), grid).heads.curves(0);
}

// Exact gradients of sum(output_gradients * outputs) with respect to every
// parameter. ReLU uses subgradient 0 at a zero pre-activation.
inline Gradients backward(const NetworkParams& params, const ForwardTape& t, const HeadGradients& grad) {
  const auto& arch = params.architecture();
  const int n = t.segments, batch = t.batch, d = arch.embed_dim;
  if (grad.baseline.rows() != arch.num_actions || grad.baseline.cols() != batch ||
      grad.increments.rows() != arch.num_actions || grad.increments.cols() != static_cast<Eigen::Index>(batch) * n) {
    throw std::invalid_argument("backward: output gradient shape does not match the tape");
  }

  Gradients g(arch);

  // Increment head.
  Eigen::MatrixXd d_inc_pre;
  if (arch.increment_activation == Activation::relu) {
    d_inc_pre = grad.increments.cwiseProduct(detail::relu_mask(t.increment_pre));
  } else {
    d_inc_pre = grad.increments.cwiseProduct(detail::sigmoid(t.increment_pre));
  }
  g.block(Block::g_out_weight) = d_inc_pre * t.increment_hidden.transpose();
  g.block(Block::g_out_bias) = d_inc_pre.rowwise().sum();
  const Eigen::MatrixXd d_hidden =
      (params.block(Block::g_out_weight).transpose() * d_inc_pre).cwiseProduct(detail::relu_mask(t.increment_hidden_pre));
  g.block(Block::g_hidden_bias) = d_hidden.rowwise().sum();

  // Sum of d_hidden over samples, per grid segment: h x N.
  const Eigen::Index h = d_hidden.rows();
  const Eigen::VectorXd segment_sums =
      Eigen::Map<const Eigen::MatrixXd>(d_hidden.data(), h * n, batch).rowwise().sum();
  const Eigen::MatrixXd d_hidden_by_segment = Eigen::Map<const Eigen::MatrixXd>(segment_sums.data(), h, n);

  const auto g_hidden = params.block(Block::g_hidden_weight);
  auto dg_hidden = g.block(Block::g_hidden_weight);
  dg_hidden.leftCols(d) = d_hidden * t.product.transpose();
  dg_hidden.rightCols(d) = d_hidden_by_segment * t.difference.transpose();

  const Eigen::MatrixXd d_product = g_hidden.leftCols(d).transpose() * d_hidden;               // d x BN
  const Eigen::MatrixXd d_difference = g_hidden.rightCols(d).transpose() * d_hidden_by_segment;  // d x N

  Eigen::MatrixXd d_state = Eigen::MatrixXd::Zero(d, batch);
  Eigen::MatrixXd d_fraction = Eigen::MatrixXd::Zero(d, n + 1);
  for (int b = 0; b < batch; ++b) {
    const auto block = d_product.middleCols(static_cast<Eigen::Index>(b) * n, n);
    d_state.col(b) += block.cwiseProduct(t.fraction.rightCols(n)).rowwise().sum();
    d_fraction.rightCols(n) += (block.array().colwise() * t.state.col(b).array()).matrix();
  }
  d_fraction.rightCols(n) += d_difference;
  d_fraction.leftCols(n) -= d_difference;

  // Baseline head.
  g.block(Block::f_out_weight) = grad.baseline * t.baseline_hidden.transpose();
  g.block(Block::f_out_bias) = grad.baseline.rowwise().sum();
  const Eigen::MatrixXd d_base_hidden_pre =
      (params.block(Block::f_out_weight).transpose() * grad.baseline)
          .cwiseProduct((t.baseline_hidden.array() * (1.0 - t.baseline_hidden.array())).matrix());
  g.block(Block::f_hidden_weight) = d_base_hidden_pre * t.state.transpose();
  g.block(Block::f_hidden_bias) = d_base_hidden_pre.rowwise().sum();
  d_state += params.block(Block::f_hidden_weight).transpose() * d_base_hidden_pre;

  // Embeddings.
  const Eigen::MatrixXd d_state_pre = d_state.cwiseProduct(detail::relu_mask(t.state_pre));
  g.block(Block::psi_weight) = d_state_pre * t.observations.transpose();
  g.block(Block::psi_bias) = d_state_pre.rowwise().sum();
  const Eigen::MatrixXd d_fraction_pre = d_fraction.cwiseProduct(detail::relu_mask(t.fraction_pre));
  g.block(Block::phi_weight) = d_fraction_pre * t.cosines.transpose();
  g.block(Block::phi_bias) = d_fraction_pre.rowwise().sum();
  return g;
}

// ---------------------------------------------------------------------------
// Unconstrained IQN-style head, kept as the crossing baseline.
// ---------------------------------------------------------------------------

struct IqnTape {
  Eigen::MatrixXd observations;  // obs_dim x B
  Eigen::MatrixXd state_pre;     // d x B
  Eigen::MatrixXd state;         // d x B
  Eigen::MatrixXd cosines;       // n_cos x BT
  Eigen::MatrixXd fraction_pre;  // d x BT
  Eigen::MatrixXd fraction;      // d x BT
  Eigen::MatrixXd product;       // d x BT
  Eigen::MatrixXd hidden_pre;    // h x BT
  Eigen::MatrixXd hidden;        // h x BT
  int batch = 0;
  int fractions = 0;
};

struct IqnForward {
  Eigen::MatrixXd values;  // A x BT, column b*T + t
  IqnTape tape;
};

// taus holds one column of T fractions per sample.
inline IqnForward forward_iqn(const NetworkParams& params, const Eigen::MatrixXd& observations,
                              const Eigen::MatrixXd& taus) {
  using detail::affine;
  const auto& arch = params.architecture();
  if (observations.rows() != arch.observation_dim) throw ConfigError("forward_iqn: observation dimension mismatch");
  if (taus.cols() != observations.cols()) throw std::invalid_argument("forward_iqn: one fraction column per sample");

  IqnTape t;
  t.batch = static_cast<int>(observations.cols());
  t.fractions = static_cast<int>(taus.rows());
  const Eigen::Index per = t.fractions;

  t.observations = observations;
  t.state_pre = affine(params.block(Block::psi_weight), params.block(Block::psi_bias), observations);
  t.state = detail::relu(t.state_pre);
  t.cosines = detail::cosine_features(arch.cosine_features, std::span<const double>(taus.data(), static_cast<std::size_t>(taus.size())));
  t.fraction_pre = affine(params.block(Block::phi_weight), params.block(Block::phi_bias), t.cosines);
  t.fraction = detail::relu(t.fraction_pre);
  t.product.resize(arch.embed_dim, t.fraction.cols());
  for (int b = 0; b < t.batch; ++b) {
    t.product.middleCols(b * per, per) = t.fraction.middleCols(b * per, per).array().colwise() * t.state.col(b).array();
  }
  t.hidden_pre = affine(params.block(Block::iqn_hidden_weight), params.block(Block::iqn_hidden_bias), t.product);
  t.hidden = detail::relu(t.hidden_pre);
  Eigen::MatrixXd values = affine(params.block(Block::iqn_out_weight), params.block(Block::iqn_out_bias), t.hidden);
  detail::require_finite(values, "iqn head");
  return {std::move(values), std::move(t)};
}

// Per-action, per-fraction values for a single observation: A x T.
inline Eigen::MatrixXd forward_iqn(const NetworkParams& params, std::span<const double> observation,
                                   std::span<const double> taus) {
  Eigen::MatrixXd tau_col(static_cast<Eigen::Index>(taus.size()), 1);
  for (std::size_t i = 0; i < taus.size(); ++i) tau_col(static_cast<Eigen::Index>(i), 0) = taus[i];
  return forward_iqn(params, stack_observations(params.architecture(), observation), tau_col).values;
}

inline Gradients backward_iqn(const NetworkParams& params, const IqnTape& t, const Eigen::MatrixXd& d_values) {
  const auto& arch = params.architecture();
  const Eigen::Index per = t.fractions;
  if (d_values.rows() != arch.num_actions || d_values.cols() != t.batch * per) {
    throw std::invalid_argument("backward_iqn: output gradient shape does not match the tape");
  }
  Gradients g(arch);
  g.block(Block::iqn_out_weight) = d_values * t.hidden.transpose();
  g.block(Block::iqn_out_bias) = d_values.rowwise().sum();
  const Eigen::MatrixXd d_hidden =
      (params.block(Block::iqn_out_weight).transpose() * d_values).cwiseProduct(detail::relu_mask(t.hidden_pre));
  g.block(Block::iqn_hidden_weight) = d_hidden * t.product.transpose();
  g.block(Block::iqn_hidden_bias) = d_hidden.rowwise().sum();
  const Eigen::MatrixXd d_product = params.block(Block::iqn_hidden_weight).transpose() * d_hidden;

  Eigen::MatrixXd d_state(arch.embed_dim, t.batch);
  Eigen::MatrixXd d_fraction(arch.embed_dim, d_product.cols());
  for (int b = 0; b < t.batch; ++b) {
    const auto block = d_product.middleCols(b * per, per);
    d_state.col(b) = block.cwiseProduct(t.fraction.middleCols(b * per, per)).rowwise().sum();
    d_fraction.middleCols(b * per, per) = block.array().colwise() * t.state.col(b).array();
  }
  const Eigen::MatrixXd d_fraction_pre = d_fraction.cwiseProduct(detail::relu_mask(t.fraction_pre));
  g.block(Block::phi_weight) = d_fraction_pre * t.cosines.transpose();
  g.block(Block::phi_bias) = d_fraction_pre.rowwise().sum();
  const Eigen::MatrixXd d_state_pre = d_state.cwiseProduct(detail::relu_mask(t.state_pre));
  g.block(Block::psi_weight) = d_state_pre * t.observations.transpose();
  g.block(Block::psi_bias) = d_state_pre.rowwise().sum();
  return g;
}

}  // namespace ndqfn
