#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "qsgld/config.hpp"
#include "qsgld/csv.hpp"
#include "qsgld/experiment.hpp"

using namespace qsgld;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("qsgld_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

private:
  fs::path path_;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

int cli_exit(const std::string& args) {
  const std::string cmd = std::string(QSGLD_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kSmallConfig = R"(# two optimizers on a noisy quadratic
epochs = 5
seeds = [0, 1]
collect_errors = true

[objective]
function = "quadratic"
dim = 2
batches = 4
grad_noise = 0.5

[[optimizer]]
algorithm = "qsgld"
lambda = 0.05

[[optimizer]]
algorithm = "sgd"
lambda = 0.05
)";

RunResult sample_run() {
  RunResult r;
  TrajectoryRecord a;
  a.epoch = 0;
  a.train_loss = 0.1 + 0.2;
  a.qp = 602;
  a.grad_norm = 1.0 / 3.0;
  a.error_sum = -0.125;
  a.wall_ms = 7;
  TrajectoryRecord b = a;
  b.epoch = 1;
  b.train_loss = 1e-300;
  b.eval_loss = 2.5;
  b.accuracy = 0.875;
  b.qp.reset();
  b.error_sum.reset();
  r.records = {a, b};
  return r;
}

} // namespace

TEST(Config, ParsesFullExperiment) {
  const auto cfg = experiment_from_document(parse_config_text(kSmallConfig));
  EXPECT_EQ(cfg.epochs, 5);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{0, 1}));
  EXPECT_TRUE(cfg.collect_errors);
  EXPECT_EQ(cfg.objective.batches, 4u);
  EXPECT_DOUBLE_EQ(cfg.objective.grad_noise, 0.5);
  ASSERT_EQ(cfg.optimizers.size(), 2u);
  EXPECT_EQ(cfg.optimizers[0].name, "qsgld");
  EXPECT_EQ(cfg.optimizers[1].config.algorithm, Algorithm::sgd);
  EXPECT_DOUBLE_EQ(cfg.optimizers[1].config.lambda, 0.05);
}

TEST(Config, PowerNotation) {
  const auto cfg = experiment_from_document(parse_config_text("[[optimizer]]\nalgorithm = \"qsgld\"\n"
                                                              "eta_squared = 2^19\n"));
  EXPECT_DOUBLE_EQ(cfg.optimizers[0].config.schedule.eta * cfg.optimizers[0].config.schedule.eta, 524288.0);
}

TEST(Config, ShippedConfigsLoad) {
  for (const auto& entry : fs::directory_iterator(QSGLD_CONFIG_DIR)) {
    EXPECT_NO_THROW(load_experiment(entry.path().string())) << entry.path();
  }
}

TEST(Config, UnknownKeyReportsLine) {
  try {
    experiment_from_document(parse_config_text("epochs = 3\n\n[objective]\nfunktion = \"quadratic\"\n"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 4);
    EXPECT_NE(std::string(e.what()).find("funktion"), std::string::npos);
  }
}

TEST(Config, BadValueReportsLineAndField) {
  try {
    experiment_from_document(parse_config_text("epochs = 3\n[[optimizer]]\nalgorithm = \"qsgld\"\nlambda = -1\n"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_GT(e.line(), 0);
  }
}

TEST(Config, SyntaxErrorReportsLine) {
  try {
    parse_config_text("epochs = 3\nseeds [0]\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 2);
  }
}

TEST(Config, UnknownTableRejected) {
  EXPECT_THROW(experiment_from_document(parse_config_text("[bogus]\nx = 1\n")), ConfigError);
}

TEST(Config, UnknownAlgorithmRejected) {
  EXPECT_THROW(experiment_from_document(parse_config_text("[[optimizer]]\nalgorithm = \"lbfgs\"\n")), ConfigError);
}

TEST(Config, NoOptimizerIsNotRunnable) {
  const auto cfg = experiment_from_document(parse_config_text("epochs = 2\n"));
  EXPECT_THROW(require_runnable(cfg), ConfigError);
}

TEST(Csv, FormatRealRoundTrips) {
  RngStream rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform(-30, 30));
    ASSERT_EQ(std::strtod(format_real(v).c_str(), nullptr), v);
  }
  EXPECT_EQ(format_real(0.405), "0.405");
  EXPECT_EQ(format_real(2.0), "2");
}

TEST(Csv, TrajectoryHeaderContract) {
  std::ostringstream out;
  write_trajectory(out, sample_run());
  std::istringstream in(out.str());
  std::string l1;
  std::string l2;
  std::getline(in, l1);
  std::getline(in, l2);
  EXPECT_EQ(l1, "#schema=1");
  EXPECT_EQ(l2, "epoch,train_loss,eval_loss,accuracy,qp,grad_norm,error_sum,wall_ms");
}

TEST(Csv, TrajectoryRoundTrip) {
  TempDir dir;
  const auto path = dir / "run_seed0.csv";
  const auto run = sample_run();
  write_trajectory_file(path, run);
  const auto back = read_trajectory_file(path);
  ASSERT_EQ(back.records.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.records[i].epoch, run.records[i].epoch);
    EXPECT_EQ(back.records[i].train_loss, run.records[i].train_loss);
    EXPECT_EQ(back.records[i].eval_loss, run.records[i].eval_loss);
    EXPECT_EQ(back.records[i].accuracy, run.records[i].accuracy);
    EXPECT_EQ(back.records[i].qp, run.records[i].qp);
    EXPECT_EQ(back.records[i].grad_norm, run.records[i].grad_norm);
    EXPECT_EQ(back.records[i].error_sum, run.records[i].error_sum);
    EXPECT_EQ(back.records[i].wall_ms, run.records[i].wall_ms);
  }
  EXPECT_FALSE(back.diverged);
}

TEST(Csv, DivergenceTrailer) {
  TempDir dir;
  auto run = sample_run();
  TrajectoryRecord bad;
  bad.epoch = 2;
  bad.diverged = true;
  run.records.push_back(bad);
  run.diverged = true;
  const auto path = dir / "x_seed0.csv";
  write_trajectory_file(path, run);
  EXPECT_NE(slurp(path).find("#diverged,epoch=2"), std::string::npos);
  const auto back = read_trajectory_file(path);
  EXPECT_TRUE(back.diverged);
  EXPECT_EQ(back.records.size(), 2u);
}

TEST(Csv, ErrorSamplesRoundTrip) {
  TempDir dir;
  std::vector<QuantizationErrorSample> s(3);
  s[0] = {-0.2, 4, 0, 0, 0.3, 1};
  s[1] = {0.2, 4, 0, 1, -0.3, -1};
  s[2] = {0.1234567890123, 602, 99, 2, 1.0 / 3.0, 201};
  const auto path = dir / "e.csv";
  write_errors_file(path, s);
  const auto back = read_errors_file(path);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].epsilon_factor, s[i].epsilon_factor);
    EXPECT_EQ(back[i].qp, s[i].qp);
    EXPECT_EQ(back[i].step_index, s[i].step_index);
    EXPECT_EQ(back[i].coord, s[i].coord);
    EXPECT_EQ(back[i].input, s[i].input);
    EXPECT_EQ(back[i].level, s[i].level);
  }
}

TEST(Csv, WrongHeaderIsFormatError) {
  TempDir dir;
  const auto path = dir / "bad.csv";
  spill(path, "#schema=1\nepoch,loss\n0,1\n");
  try {
    read_trajectory_file(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 10u);
  }
}

TEST(Csv, BadNumberReportsRowOffset) {
  TempDir dir;
  const auto path = dir / "bad.csv";
  const std::string head = std::string(kSchemaLine) + "\n" + kTrajectoryHeader + "\n";
  spill(path, head + "0,abc,,,,1,,0\n");
  try {
    read_trajectory_file(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), head.size());
  }
}

TEST(Csv, StripWallTime) {
  const std::string a = "#schema=1\nepoch,x,wall_ms\n0,1.5,12\n1,2,40\n";
  const std::string b = "#schema=1\nepoch,x,wall_ms\n0,1.5,3\n1,2,9\n";
  EXPECT_EQ(strip_wall_time(a), strip_wall_time(b));
}

TEST(Compare, IdenticalRunsGiveIdenticalRows) {
  TempDir dir;
  write_trajectory_file(dir / "a_seed0.csv", sample_run());
  write_trajectory_file(dir / "a_seed1.csv", sample_run());
  const auto rows = compare_runs({dir / "a_seed0.csv", dir / "a_seed1.csv"}, 0.5);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].optimizer, "a");
  EXPECT_EQ(rows[0].runs, 2u);
  EXPECT_EQ(rows[0].median_final_loss, 1e-300);
  ASSERT_TRUE(rows[0].epochs_to_threshold.has_value());
  EXPECT_EQ(*rows[0].epochs_to_threshold, 0.0);
  EXPECT_EQ(summary_csv(compare_runs({dir / "a_seed0.csv"}, 0.5)), summary_csv(compare_runs({dir / "a_seed1.csv"}, 0.5)));
}

TEST(Compare, EmptyListIsUsageError) { EXPECT_THROW(compare_runs({}, 0.1), UsageError); }

TEST(Compare, MedianOfEvenCount) { EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5); }

TEST(Experiment, RunWritesOneCsvPerOptimizerAndSeed) {
  TempDir dir;
  auto cfg = experiment_from_document(parse_config_text(kSmallConfig));
  cfg.output_dir = dir.path().string();
  const auto res = run_experiment(cfg);
  EXPECT_EQ(res.jobs.size(), 4u);
  for (const char* name : {"qsgld_seed0.csv", "qsgld_seed1.csv", "sgd_seed0.csv", "sgd_seed1.csv",
                           "qsgld_seed0_errors.csv"}) {
    EXPECT_TRUE(fs::exists(dir.path() / name)) << name;
  }
  EXPECT_FALSE(fs::exists(dir.path() / "sgd_seed0_errors.csv"));
}

TEST(Experiment, RepeatedRunsAreByteIdentical) {
  TempDir a;
  auto cfg = experiment_from_document(parse_config_text(kSmallConfig));
  cfg.output_dir = (a.path() / "one").string();
  run_experiment(cfg);
  cfg.output_dir = (a.path() / "two").string();
  RunOptions opt;
  opt.threads = 3;
  run_experiment(cfg, opt);
  for (const char* name : {"qsgld_seed0.csv", "sgd_seed1.csv"}) {
    EXPECT_EQ(strip_wall_time(slurp((a.path() / "one" / name).string())),
              strip_wall_time(slurp((a.path() / "two" / name).string())));
  }
  EXPECT_EQ(slurp((a.path() / "one" / "qsgld_seed1_errors.csv").string()),
            slurp((a.path() / "two" / "qsgld_seed1_errors.csv").string()));
}

TEST(Experiment, InitialPointSharedAcrossOptimizers) {
  ObjectiveSpec spec;
  spec.dim = 3;
  EXPECT_EQ(initial_point(spec, 4), initial_point(spec, 4));
  EXPECT_NE(initial_point(spec, 4), initial_point(spec, 5));
}

TEST(Cli, ListDefaultsSucceeds) { EXPECT_EQ(cli_exit("list-defaults"), 0); }

TEST(Cli, MissingSubcommandIsUsage) { EXPECT_EQ(cli_exit(""), 2); }

TEST(Cli, MalformedConfigExitsTwo) {
  TempDir dir;
  spill(dir / "bad.toml", "epochs = three\n");
  EXPECT_EQ(cli_exit("run --config " + (dir / "bad.toml")), 2);
}

TEST(Cli, MissingConfigFileExitsTwo) { EXPECT_EQ(cli_exit("run --config /nonexistent.toml"), 2); }

TEST(Cli, DivergenceExitsThree) {
  TempDir dir;
  spill(dir / "div.toml", "epochs = 50\n[objective]\nfunction = \"quadratic\"\ndim = 1\n"
                          "[[optimizer]]\nalgorithm = \"sgd\"\nlambda = 3.0\n");
  EXPECT_EQ(cli_exit("run --config " + (dir / "div.toml") + " --out " + dir.path().string()), 3);
  EXPECT_NE(slurp(dir / "sgd_seed0.csv").find("#diverged"), std::string::npos);
}

TEST(Cli, RunThenCompareAndDiagnose) {
  TempDir dir;
  spill(dir / "ok.toml", kSmallConfig);
  const auto out = dir.path().string();
  ASSERT_EQ(cli_exit("run --config " + (dir / "ok.toml") + " --out " + out + " --seed 1"), 0);
  EXPECT_TRUE(fs::exists(dir / "qsgld_seed1.csv"));
  EXPECT_FALSE(fs::exists(dir / "qsgld_seed0.csv"));
  EXPECT_EQ(cli_exit("compare " + (dir / "qsgld_seed1.csv") + " " + (dir / "sgd_seed1.csv") + " --out " + out), 0);
  EXPECT_TRUE(fs::exists(dir / "summary.csv"));
  // 5 epochs × 4 batches × 2 coords = 40 samples: below the white-noise minimum
  EXPECT_EQ(cli_exit("diagnose " + (dir / "qsgld_seed1_errors.csv")), 2);
}

TEST(Cli, CompareSchemaMismatchExitsTwo) {
  TempDir dir;
  spill(dir / "x_seed0.csv", "epoch,loss\n");
  EXPECT_EQ(cli_exit("compare " + (dir / "x_seed0.csv")), 2);
}

TEST(Cli, OutputDirFromEnvironment) {
  TempDir dir;
  spill(dir / "ok.toml", kSmallConfig);
  const auto env_dir = (dir.path() / "from_env").string();
  const std::string cmd = std::string(kOutputDirEnv) + "=" + env_dir + " " + QSGLD_CLI_PATH + " run --config " +
                          (dir / "ok.toml") + " --seed 0 >/dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(fs::path(env_dir) / "sgd_seed0.csv"));
}

TEST(Cli, WeakErrorWithTooFewPathsExitsTwo) { EXPECT_EQ(cli_exit("weak-error --limit-samples 10"), 2); }
