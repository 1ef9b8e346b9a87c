#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ndqfn/net.hpp"
#include "test_support.hpp"

using namespace ndqfn;
using namespace ndqfn::testing;

namespace {

Architecture tiny(Activation act = Activation::relu) { return {3, 2, 8, 6, 5, act}; }

std::vector<double> random_observation(int dim, Rng& rng) {
  std::vector<double> x(static_cast<std::size_t>(dim));
  for (double& v : x) v = rng.uniform();
  return x;
}

double relu(double v) { return v > 0.0 ? v : 0.0; }

// Scalar-loop re-derivation of one NDQFN forward pass.
struct Reference {
  std::vector<double> baseline;                 // per action
  std::vector<std::vector<double>> increments;  // per action, per segment
};

Reference reference_forward(const NetworkParams& p, const std::vector<double>& x, const QuantileGrid& grid) {
  const auto& a = p.architecture();
  const int d = a.embed_dim, h = a.hidden_dim, n = grid.segments();
  auto W = [&](Block b, int r, int c) { return p.block(b)(r, c); };

  std::vector<double> psi(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    double s = W(Block::psi_bias, j, 0);
    for (int k = 0; k < a.observation_dim; ++k) s += W(Block::psi_weight, j, k) * x[static_cast<std::size_t>(k)];
    psi[static_cast<std::size_t>(j)] = relu(s);
  }
  auto phi = [&](double tau) {
    std::vector<double> out(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
      double s = W(Block::phi_bias, j, 0);
      for (int k = 0; k < a.cosine_features; ++k) s += W(Block::phi_weight, j, k) * std::cos(std::numbers::pi * k * tau);
      out[static_cast<std::size_t>(j)] = relu(s);
    }
    return out;
  };

  Reference ref;
  std::vector<double> hidden(static_cast<std::size_t>(h));
  for (int r = 0; r < h; ++r) {
    double s = W(Block::f_hidden_bias, r, 0);
    for (int j = 0; j < d; ++j) s += W(Block::f_hidden_weight, r, j) * psi[static_cast<std::size_t>(j)];
    hidden[static_cast<std::size_t>(r)] = 1.0 / (1.0 + std::exp(-s));
  }
  ref.increments.assign(static_cast<std::size_t>(a.num_actions), {});
  for (int act = 0; act < a.num_actions; ++act) {
    double s = W(Block::f_out_bias, act, 0);
    for (int r = 0; r < h; ++r) s += W(Block::f_out_weight, act, r) * hidden[static_cast<std::size_t>(r)];
    ref.baseline.push_back(s);
  }
  for (int i = 1; i <= n; ++i) {
    const auto cur = phi(grid.point(i)), prev = phi(grid.point(i - 1));
    std::vector<double> input;
    for (int j = 0; j < d; ++j) input.push_back(psi[static_cast<std::size_t>(j)] * cur[static_cast<std::size_t>(j)]);
    for (int j = 0; j < d; ++j) input.push_back(cur[static_cast<std::size_t>(j)] - prev[static_cast<std::size_t>(j)]);
    std::vector<double> g_hidden(static_cast<std::size_t>(h));
    for (int r = 0; r < h; ++r) {
      double s = W(Block::g_hidden_bias, r, 0);
      for (int j = 0; j < 2 * d; ++j) s += W(Block::g_hidden_weight, r, j) * input[static_cast<std::size_t>(j)];
      g_hidden[static_cast<std::size_t>(r)] = relu(s);
    }
    for (int act = 0; act < a.num_actions; ++act) {
      double s = W(Block::g_out_bias, act, 0);
      for (int r = 0; r < h; ++r) s += W(Block::g_out_weight, act, r) * g_hidden[static_cast<std::size_t>(r)];
      const double out = a.increment_activation == Activation::relu ? relu(s) : std::log1p(std::exp(s));
      ref.increments[static_cast<std::size_t>(act)].push_back(out);
    }
  }
  return ref;
}

}  // namespace

TEST(Layout, ShapesAndOffsets) {
  const auto layout = make_layout(tiny());
  EXPECT_EQ(layout[static_cast<int>(Block::psi_weight)].rows, 8);
  EXPECT_EQ(layout[static_cast<int>(Block::psi_weight)].cols, 3);
  EXPECT_EQ(layout[static_cast<int>(Block::g_hidden_weight)].cols, 16);
  EXPECT_EQ(layout[static_cast<int>(Block::f_out_weight)].rows, 2);
  std::size_t offset = 0;
  for (const auto& b : layout) {
    EXPECT_EQ(b.offset, offset);
    offset += b.size();
  }
  EXPECT_THROW(make_layout({0, 2, 8, 8, 8, Activation::relu}), ConfigError);
}

TEST(Init, DeterministicAndBounded) {
  Rng a(1, Stream::online_init), b(1, Stream::online_init), c(1, Stream::predictor_init);
  const auto pa = initialize_params(tiny(), a), pb = initialize_params(tiny(), b), pc = initialize_params(tiny(), c);
  EXPECT_TRUE(pa == pb);
  EXPECT_FALSE(pa == pc);
  for (int blk = 0; blk < kBlockCount; blk += 2) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(pa.shape(static_cast<Block>(blk)).cols));
    for (int part = 0; part < 2; ++part) {
      const auto m = pa.block(static_cast<Block>(blk + part));
      EXPECT_LE(m.cwiseAbs().maxCoeff(), bound);
    }
  }
}

TEST(Init, GainScalesBound) {
  Rng a(2), b(2);
  const auto unit = initialize_params(tiny(), a), scaled = initialize_params(tiny(), b, 3.0);
  for (std::size_t i = 0; i < unit.size(); ++i) EXPECT_NEAR(scaled.values()[i], 3.0 * unit.values()[i], 1e-15);
}

TEST(Sync, CopiesAndChecksArchitecture) {
  Rng rng(3);
  const auto src = initialize_params(tiny(), rng);
  NetworkParams dst(tiny());
  sync_params(src, dst);
  EXPECT_TRUE(src == dst);
  NetworkParams other({4, 2, 8, 6, 5, Activation::relu});
  EXPECT_THROW(sync_params(src, other), ConfigError);
}

TEST(Forward, MatchesScalarReference) {
  Rng rng(4);
  for (auto act : {Activation::relu, Activation::softplus}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto params = initialize_params(tiny(act), rng, 2.0);
      const QuantileGrid grid(1 + static_cast<int>(rng.below(6)));
      const auto x = random_observation(3, rng);
      const auto curves = forward(params, x, grid);
      const Reference ref = reference_forward(params, x, grid);
      for (int a = 0; a < 2; ++a) {
        EXPECT_NEAR(curves[a].baseline(), ref.baseline[a], 1e-12);
        for (int i = 0; i < grid.segments(); ++i) {
          EXPECT_NEAR(curves[a].increments()[i], ref.increments[a][i], 1e-12);
        }
      }
    }
  }
}

TEST(Forward, BatchEqualsSingle) {
  Rng rng(5);
  const auto params = initialize_params(tiny(), rng);
  const QuantileGrid grid(4);
  std::vector<std::vector<double>> xs;
  for (int b = 0; b < 5; ++b) xs.push_back(random_observation(3, rng));
  const QuantileForward batch = forward(params, stack_observations(params.architecture(), xs), grid);
  for (int b = 0; b < 5; ++b) {
    const auto single = forward(params, xs[b], grid);
    for (int a = 0; a < 2; ++a) {
      const auto curve = batch.heads.curve(b, a);
      EXPECT_EQ(curve.baseline(), single[a].baseline());
      for (int i = 0; i < 4; ++i) EXPECT_NEAR(curve.increments()[i], single[a].increments()[i], 1e-14);
    }
  }
}

TEST(Forward, IncrementsNonNegativeAndCurvesMonotone) {
  Rng rng(6);
  for (auto act : {Activation::relu, Activation::softplus}) {
    for (int trial = 0; trial < 50; ++trial) {
      const auto params = initialize_params(tiny(act), rng, 1.0 + 4.0 * rng.uniform());
      const QuantileGrid grid(8);
      const auto curves = forward(params, random_observation(3, rng), grid);
      for (const auto& c : curves) {
        for (double v : c.increments()) EXPECT_GE(v, 0.0);
        double prev = -INFINITY;
        for (int k = 0; k < 200; ++k) {
          const double v = evaluate(c, k / 199.0);
          EXPECT_GE(v, prev);
          prev = v;
        }
      }
    }
  }
}

TEST(Forward, EmbeddingsHaveTheDocumentedForm) {
  Rng rng(7);
  const auto params = initialize_params(tiny(), rng);
  const auto x = random_observation(3, rng);
  const Eigen::VectorXd psi = embed_state(params, x);
  ASSERT_EQ(psi.size(), 8);
  EXPECT_GE(psi.minCoeff(), 0.0);
  const Eigen::VectorXd phi0 = embed_fraction(params, 0.0);
  // At tau = 0 every cosine feature is 1.
  for (int j = 0; j < 8; ++j) {
    const double expected = relu(params.block(Block::phi_weight).row(j).sum() + params.block(Block::phi_bias)(j, 0));
    EXPECT_NEAR(phi0(j), expected, 1e-14);
  }
}

TEST(Forward, RejectsWrongObservationSize) {
  Rng rng(8);
  const auto params = initialize_params(tiny(), rng);
  EXPECT_THROW(forward(params, std::vector<double>{1.0, 2.0}, QuantileGrid(4)), ConfigError);
}

TEST(Forward, NonFiniteIsAHardError) {
  Rng rng(9);
  auto params = initialize_params(tiny(), rng);
  params.block(Block::f_out_bias)(0, 0) = NAN;
  EXPECT_THROW(forward(params, std::vector<double>{0.1, 0.2, 0.3}, QuantileGrid(4)), NumericError);
}

TEST(Backward, MatchesFiniteDifferences) {
  Rng rng(10);
  for (auto act : {Activation::relu, Activation::softplus}) {
    const auto params = initialize_params(tiny(act), rng, 2.0);
    const QuantileGrid grid(4);
    std::vector<std::vector<double>> xs;
    for (int b = 0; b < 3; ++b) xs.push_back(random_observation(3, rng));
    const Eigen::MatrixXd obs = stack_observations(params.architecture(), xs);
    const QuantileForward fwd = forward(params, obs, grid);
    const Eigen::MatrixXd gb = Eigen::MatrixXd::Random(fwd.heads.baseline.rows(), fwd.heads.baseline.cols());
    const Eigen::MatrixXd gi = Eigen::MatrixXd::Random(fwd.heads.increments.rows(), fwd.heads.increments.cols());
    const Gradients analytic = backward(params, fwd.tape, {gb, gi});
    auto objective = [&](const NetworkParams& p) {
      const QuantileHeads h = forward(p, obs, grid).heads;
      return gb.cwiseProduct(h.baseline).sum() + gi.cwiseProduct(h.increments).sum();
    };
    const auto check = finite_difference_check(params, analytic, objective,
                                               [&](const NetworkParams& p) { return activation_pattern(p, obs, grid); });
    EXPECT_GT(check.checked, static_cast<long>(params.size()) * 3 / 4);
    EXPECT_EQ(check.passed, check.checked) << "excluded " << check.excluded;
  }
}

TEST(Backward, ShapeMismatchThrows) {
  Rng rng(11);
  const auto params = initialize_params(tiny(), rng);
  const std::vector<double> x{0.1, 0.2, 0.3};
  const QuantileForward fwd = forward(params, stack_observations(params.architecture(), x), QuantileGrid(4));
  EXPECT_THROW(backward(params, fwd.tape, {Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Zero(2, 4)}),
               std::invalid_argument);
}

TEST(Iqn, ForwardShapeAndBackward) {
  Rng rng(12);
  const auto params = initialize_params(tiny(), rng, 2.0);
  std::vector<std::vector<double>> xs{random_observation(3, rng), random_observation(3, rng)};
  const Eigen::MatrixXd obs = stack_observations(params.architecture(), xs);
  Eigen::MatrixXd taus(4, 2);
  for (Eigen::Index i = 0; i < taus.size(); ++i) taus.data()[i] = rng.uniform_open();
  const IqnForward fwd = forward_iqn(params, obs, taus);
  ASSERT_EQ(fwd.values.rows(), 2);
  ASSERT_EQ(fwd.values.cols(), 8);
  const Eigen::MatrixXd single = forward_iqn(params, xs[1], std::vector<double>{taus(0, 1), taus(1, 1), taus(2, 1), taus(3, 1)});
  for (int t = 0; t < 4; ++t) EXPECT_NEAR(single(0, t), fwd.values(0, 4 + t), 1e-14);

  const Eigen::MatrixXd gv = Eigen::MatrixXd::Random(2, 8);
  const Gradients analytic = backward_iqn(params, fwd.tape, gv);
  auto objective = [&](const NetworkParams& p) { return gv.cwiseProduct(forward_iqn(p, obs, taus).values).sum(); };
  const auto check = finite_difference_check(params, analytic, objective,
                                             [&](const NetworkParams& p) { return iqn_activation_pattern(p, obs, taus); });
  EXPECT_EQ(check.passed, check.checked);
  // The NDQFN-only blocks carry no IQN gradient.
  EXPECT_EQ(analytic.block(Block::g_hidden_weight).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(analytic.block(Block::f_out_bias).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Iqn, CrossesAtRandomInit) {
  Rng rng(13);
  int crossing_inits = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto params = initialize_params({3, 2, 16, 16, 16, Activation::relu}, rng);
    std::vector<double> taus;
    for (int k = 0; k < 200; ++k) taus.push_back(k / 200.0 + 0.0025);
    const Eigen::MatrixXd v = forward_iqn(params, random_observation(3, rng), taus);
    bool crossed = false;
    for (int k = 1; k < 200; ++k) crossed = crossed || v(0, k) < v(0, k - 1);
    crossing_inits += crossed;
  }
  EXPECT_GE(crossing_inits, 15);
}
