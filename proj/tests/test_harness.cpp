#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ndqfn/harness.hpp"

using namespace ndqfn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in, "test.cfg");
}

std::string parse_error(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

ExperimentConfig tiny_run_config() {
  ExperimentConfig c;
  c.env.kind = "chain";
  c.env.length = 6;
  c.agent.embed_dim = c.agent.hidden_dim = c.agent.cosine_features = 8;
  c.agent.grid_size = 4;
  c.agent.n1 = c.agent.n2 = 4;
  c.agent.batch_size = 4;
  c.agent.warmup = 20;
  c.agent.sync_period = 50;
  c.agent.budget = 300;
  c.agent.eval_period = 100;
  c.agent.eval_episodes = 2;
  c.explore.strategy = Strategy::dpe;
  return c;
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("ndqfn_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

}  // namespace

TEST(Config, ParsesKeysCommentsAndWhitespace) {
  const auto c = parse(
      "# comment line\n"
      "env.kind = gridworld\n"
      "  env.size=5   # trailing comment\n"
      "\n"
      "agent.double_q = true\n"
      "explore.strategy = dltv\n"
      "run.seeds = 3, 4,5\n");
  EXPECT_EQ(c.env.kind, "gridworld");
  EXPECT_EQ(c.env.size, 5);
  EXPECT_TRUE(c.agent.double_q);
  EXPECT_EQ(c.explore.strategy, Strategy::dltv);
  EXPECT_EQ(c.run.seeds, (std::vector<std::uint64_t>{3, 4, 5}));
}

TEST(Config, ErrorsCarryTheLineNumber) {
  EXPECT_EQ(parse_error("env.kind = chain\nagent.bogus = 1\n"), "test.cfg:2: unknown key 'agent.bogus'");
  EXPECT_NE(parse_error("\n\nagent.n_step three\n").find("test.cfg:3:"), std::string::npos);
  EXPECT_NE(parse_error("agent.gamma = \n").find("test.cfg:1: empty value"), std::string::npos);
  EXPECT_NE(parse_error("agent.batch_size = 4x\n").find("test.cfg:1:"), std::string::npos);
  EXPECT_NE(parse_error("agent.double_q = maybe\n").find("not a boolean"), std::string::npos);
}

TEST(Config, SemanticValidationAfterParsing) {
  EXPECT_NE(parse_error("env.kind = maze\n").find("env.kind"), std::string::npos);
  EXPECT_NE(parse_error("env.length = 2\n").find("test.cfg"), std::string::npos);
  EXPECT_NE(parse_error("run.stop_on_solve = true\n").find("solve_return"), std::string::npos);
  EXPECT_NE(parse_error("agent.head = iqn\nexplore.strategy = dpe\n").find("iqn"), std::string::npos);
  EXPECT_NO_THROW(parse("agent.head = iqn\n"));
  EXPECT_THROW(load_config("/nonexistent/file.cfg"), ConfigError);
}

TEST(Config, TextRoundTrip) {
  ExperimentConfig c = tiny_run_config();
  c.agent.kappa = 0.01;
  c.agent.learning_rate = 1.0 / 3.0;
  c.agent.increment_activation = Activation::softplus;
  c.run.seeds = {7, 11};
  c.run.solve_return = 0.95;
  const std::string text = config_to_text(c);
  const auto back = parse(text);
  EXPECT_EQ(config_to_text(back), text);
  EXPECT_EQ(back.agent.learning_rate, 1.0 / 3.0);
  EXPECT_EQ(back.agent.increment_activation, Activation::softplus);
  EXPECT_EQ(back.run.seeds, c.run.seeds);
}

TEST(Config, DefaultsRoundTripIncludingNaN) {
  const ExperimentConfig c;
  EXPECT_EQ(config_to_text(parse(config_to_text(c))), config_to_text(c));
}

TEST(Csv, SplitKeepsEmptyCells) {
  EXPECT_EQ(split_csv("1,,3"), (std::vector<std::string>{"1", "", "3"}));
  EXPECT_EQ(split_csv("1,2,"), (std::vector<std::string>{"1", "2", ""}));
}

TEST(Csv, ReadEvalAndFirstSolve) {
  std::istringstream in(eval_header(2) + "\n100,0.5,0,1\n200,0.96,0.92,1\n300,1,1,1\n");
  const auto rows = read_eval_csv(in);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].step, 200);
  EXPECT_EQ(rows[1].returns, (std::vector<double>{0.92, 1.0}));
  EXPECT_EQ(first_solve_step(rows, 0.95), 200);
  EXPECT_EQ(first_solve_step(rows, 2.0), std::nullopt);
  std::istringstream bad("step,loss\n");
  EXPECT_THROW(read_eval_csv(bad), ConfigError);
}

TEST(Csv, MovingAverage) {
  const std::vector<double> v{1, 2, 3, 4, 5};
  EXPECT_EQ(moving_average(v, 1), v);
  EXPECT_EQ(moving_average(v, 2), (std::vector<double>{1, 1.5, 2.5, 3.5, 4.5}));
  EXPECT_EQ(moving_average(v, 10), (std::vector<double>{1, 1.5, 2, 2.5, 3}));
  EXPECT_THROW(moving_average(v, 0), ConfigError);
}

TEST(Crossing, NdqfnNeverCrosses) {
  Rng init(1);
  const Architecture arch{6, 2, 16, 16, 16, Activation::relu};
  const QuantileGrid grid(16);
  ChainEnv env(6, 0.0, 1);
  const auto probes = env.probe_observations();
  for (int trial = 0; trial < 5; ++trial) {
    const auto params = initialize_params(arch, init, 2.0);
    Rng rng(static_cast<std::uint64_t>(trial));
    const CrossingReport report = crossing_report(params, grid, probes, 1000, rng);
    EXPECT_EQ(report.ndqfn.pairs, 2000);
    EXPECT_EQ(report.ndqfn.crossings, 0);
    EXPECT_EQ(report.iqn.pairs, 2000);
  }
  Rng rng(0);
  EXPECT_THROW(crossing_report(initialize_params(arch, init), grid, {}, 10, rng), ConfigError);
}

TEST(Checkpoint, RoundTripsEveryNetwork) {
  Rng rng(3);
  const Architecture arch{5, 3, 8, 8, 8, Activation::softplus};
  const auto a = initialize_params(arch, rng), b = initialize_params(arch, rng);
  std::stringstream buffer;
  write_checkpoint(buffer, {arch, 16, 42, 1234}, {{"online", &a}, {"predictor", &b}});
  const Checkpoint cp = read_checkpoint(buffer);
  EXPECT_TRUE(cp.info.architecture == arch);
  EXPECT_EQ(cp.info.grid_size, 16);
  EXPECT_EQ(cp.info.seed, 42u);
  EXPECT_EQ(cp.info.step, 1234);
  EXPECT_TRUE(cp.network("online") == a);
  EXPECT_TRUE(cp.network("predictor") == b);
  EXPECT_THROW(cp.network("target"), ConfigError);
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::istringstream wrong_magic("not-a-checkpoint\n");
  EXPECT_THROW(read_checkpoint(wrong_magic), ConfigError);
  Rng rng(4);
  const Architecture arch{2, 2, 4, 4, 4, Activation::relu};
  const auto a = initialize_params(arch, rng);
  std::stringstream full;
  write_checkpoint(full, {arch, 4, 1, 0}, {{"online", &a}});
  const std::string text = full.str();
  std::istringstream truncated(text.substr(0, text.size() - 8));
  EXPECT_ANY_THROW(read_checkpoint(truncated));
}

TEST(Runner, WritesArtifactsAndIsDeterministic) {
  TempDir dir("runner");
  const ExperimentConfig c = tiny_run_config();
  const SeedResult first = run_seed(c, 5, dir.path() / "a");
  const SeedResult second = run_seed(c, 5, dir.path() / "b");
  EXPECT_EQ(first.steps, 300);
  for (const char* name : {"train.csv", "eval.csv", "checkpoint.bin", "config.txt"}) {
    ASSERT_TRUE(fs::exists(dir.path() / "a" / name)) << name;
    EXPECT_EQ(slurp(dir.path() / "a" / name), slurp(dir.path() / "b" / name)) << name;
  }
  std::ifstream eval(dir.path() / "a" / "eval.csv");
  EXPECT_EQ(read_eval_csv(eval).size(), 3u);

  std::ifstream train(dir.path() / "a" / "train.csv");
  std::string header;
  std::getline(train, header);
  EXPECT_EQ(header, kTrainHeader);

  // One dump per probe state and action, each with grid_size + 1 points.
  for (int s = 0; s < 6; ++s) {
    for (int a = 0; a < 2; ++a) {
      std::ifstream dump(dir.path() / "a" / "quantiles" /
                         ("state_" + std::to_string(s) + "_action_" + std::to_string(a) + ".csv"));
      ASSERT_TRUE(dump) << s << "," << a;
      const auto points = read_curve(dump);
      ASSERT_EQ(points.size(), 5u);
      for (std::size_t k = 1; k < points.size(); ++k) EXPECT_LE(points[k - 1].value, points[k].value);
    }
  }

  std::ifstream cp_in(dir.path() / "a" / "checkpoint.bin", std::ios::binary);
  const Checkpoint cp = read_checkpoint(cp_in);
  EXPECT_EQ(cp.info.step, 300);
  EXPECT_EQ(cp.info.seed, 5u);
  EXPECT_EQ(cp.networks.size(), 3u);
}

TEST(Runner, DifferentSeedsDiverge) {
  TempDir dir("runner_seeds");
  const ExperimentConfig c = tiny_run_config();
  run_seed(c, 1, dir.path() / "a");
  run_seed(c, 2, dir.path() / "b");
  EXPECT_NE(slurp(dir.path() / "a" / "train.csv"), slurp(dir.path() / "b" / "train.csv"));
}

TEST(Runner, ExperimentSummaryAndStopOnSolve) {
  TempDir dir("experiment");
  ExperimentConfig c = tiny_run_config();
  c.env.kind = "stochastic";
  c.agent.budget = 400;
  c.run.seeds = {1, 2};
  c.run.output = (dir.path() / "out").string();
  c.run.solve_return = -1.0;  // any evaluation counts as solved
  c.run.stop_on_solve = true;
  const auto results = run_experiment(c);
  ASSERT_EQ(results.size(), 2u);
  for (const auto& r : results) {
    EXPECT_EQ(r.first_solve, 100);
    EXPECT_EQ(r.steps, 100);
  }
  std::ifstream summary(dir.path() / "out" / "summary.csv");
  std::string line;
  std::getline(summary, line);
  EXPECT_EQ(line, "seed,steps,first_solve_step,final_eval");
  std::getline(summary, line);
  EXPECT_EQ(line.rfind("1,100,100,", 0), 0u);
  EXPECT_TRUE(fs::exists(dir.path() / "out" / "seed_2" / "eval.csv"));
}
