#pragma once

// Command-line front end: run, diagnose, weak-error, compare, list-defaults.
// Exit codes: 0 ok, 1 runtime failure, 2 bad config/usage/input, 3 divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "qsgld/config.hpp"
#include "qsgld/csv.hpp"
#include "qsgld/diagnostics.hpp"
#include "qsgld/experiment.hpp"
#include "qsgld/langevin.hpp"

namespace qsgld {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDiverged = 3;

inline nlohmann::json to_json(const WnhReport& r) {
  return {{"n", r.n},
          {"uniform_ks", r.uniform_ks},
          {"mean_z", r.mean_z},
          {"var_ratio", r.var_ratio},
          {"lag1_autocorr", r.lag1_autocorr},
          {"pass", r.pass}};
}

inline nlohmann::json to_json(const CorrelationReport& r) {
  return {{"conditioned_level", r.conditioned_level},
          {"n", r.n},
          {"correlation_estimate", r.correlation_estimate},
          {"stderr", r.stderr_estimate},
          {"predicted", r.predicted},
          {"compensated", r.compensated},
          {"pass", r.pass}};
}

inline nlohmann::json to_json(const WeakErrorReport& r) {
  return {{"test_fn", to_string(r.test_fn)},
          {"lambda_values", r.lambdas},
          {"errors", r.errors},
          {"stderrs", r.stderrs},
          {"estimates", r.estimates},
          {"references", r.references},
          {"qp", r.qps},
          {"fitted_order", r.fitted_order}};
}

namespace detail {

/// --out beats the environment override, which beats the config file.
inline std::string resolve_output_dir(const std::string& flag, const std::string& from_config) {
  if (!flag.empty()) {
    return flag;
  }
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') {
    return env;
  }
  return from_config;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write '" + path.string() + "'");
  }
  out << text;
}

/// Correlation check on harvested samples: pairs at the most frequent qp,
/// error = input − level/qp, conditioned on `level`.
inline std::optional<CorrelationReport> harvested_correlation(const std::vector<QuantizationErrorSample>& samples,
                                                              std::int64_t level, std::string& why) {
  std::map<double, std::size_t> counts;
  for (const auto& s : samples) {
    ++counts[s.qp];
  }
  if (counts.empty()) {
    why = "no samples";
    return std::nullopt;
  }
  const double qp = std::max_element(counts.begin(), counts.end(), [](const auto& a, const auto& b) {
                      return a.second < b.second;
                    })->first;
  std::vector<CorrelationPair> pairs;
  for (const auto& s : samples) {
    if (s.qp == qp && s.level == level) {
      pairs.push_back({s.input, s.input - static_cast<double>(s.level) / qp, s.level});
    }
  }
  if (pairs.size() < kMinCorrelationPairs) {
    why = "only " + std::to_string(pairs.size()) + " samples at level " + std::to_string(level) + " (need " +
          std::to_string(kMinCorrelationPairs) + ")";
    return std::nullopt;
  }
  return correlation_test(pairs, qp, level, false);
}

} // namespace detail

inline int cli(int argc, char** argv) {
  CLI::App app{"qsgld: quantized Langevin optimization experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::optional<std::size_t> limit_samples;
  std::vector<std::string> files;
  std::int64_t level = 0;
  std::optional<std::int64_t> min_step;
  std::optional<double> threshold;

  auto* run_cmd = app.add_subcommand("run", "run an experiment config, writing one CSV per (optimizer, seed)");
  run_cmd->add_option("--config", config_path, "experiment config")->required();
  run_cmd->add_option("--seed", seed, "run only this seed");
  run_cmd->add_option("--out", out_dir, "output directory");
  run_cmd->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  run_cmd->add_option("--limit-samples", limit_samples, "cap on dataset samples");

  auto* diag_cmd = app.add_subcommand("diagnose", "white-noise and correlation checks on error-sample CSVs");
  diag_cmd->add_option("files", files, "error-sample CSVs")->required();
  diag_cmd->add_option("--config", config_path, "config with a [diagnose] table");
  diag_cmd->add_option("--out", out_dir, "write diagnose.json here");
  diag_cmd->add_option("--level", level, "grid level for the correlation check");
  diag_cmd->add_option("--min-step", min_step, "ignore samples before this step");
  diag_cmd->add_option("--limit-samples", limit_samples, "use at most this many samples per file");

  auto* weak_cmd = app.add_subcommand("weak-error", "QSGLD vs Ornstein-Uhlenbeck weak-error scan");
  weak_cmd->add_option("--config", config_path, "config with a [weak_error] table");
  weak_cmd->add_option("--seed", seed, "base seed");
  weak_cmd->add_option("--out", out_dir, "write weak_error.json/.csv here");
  weak_cmd->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  weak_cmd->add_option("--limit-samples", limit_samples, "number of Monte-Carlo paths");

  auto* cmp_cmd = app.add_subcommand("compare", "summarize trajectory CSVs per optimizer");
  cmp_cmd->add_option("files", files, "trajectory CSVs");
  cmp_cmd->add_option("--config", config_path, "config supplying loss_threshold");
  cmp_cmd->add_option("--out", out_dir, "write summary.csv here");
  cmp_cmd->add_option("--threshold", threshold, "loss threshold for epochs-to-threshold");

  app.add_subcommand("list-defaults", "print the recommended hyper-parameters");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (app.got_subcommand("list-defaults")) {
      std::cout << defaults_text();
      return kExitOk;
    }

    if (run_cmd->parsed()) {
      auto cfg = load_experiment(config_path);
      require_runnable(cfg);
      if (seed) {
        cfg.seeds = {*seed};
      }
      cfg.output_dir = detail::resolve_output_dir(out_dir, cfg.output_dir);
      RunOptions opt;
      opt.threads = threads;
      opt.limit_samples = limit_samples;
      const auto res = run_experiment(cfg, opt);
      for (const auto& j : res.jobs) {
        std::cout << j.trajectory_path;
        if (!j.run.records.empty()) {
          std::cout << "  final train_loss=" << format_real(j.run.records.back().train_loss);
        }
        if (j.run.diverged) {
          std::cout << "  DIVERGED: " << j.run.message;
        }
        std::cout << '\n';
      }
      return res.any_diverged ? kExitDiverged : kExitOk;
    }

    if (diag_cmd->parsed()) {
      WnhThresholds th;
      if (!config_path.empty()) {
        th = load_experiment(config_path).wnh;
      }
      if (min_step) {
        th.min_step = *min_step;
      }
      std::vector<QuantizationErrorSample> samples;
      for (const auto& f : files) {
        auto part = read_errors_file(f);
        if (limit_samples && part.size() > *limit_samples) {
          part.resize(*limit_samples);
        }
        samples.insert(samples.end(), part.begin(), part.end());
      }
      nlohmann::json report;
      report["wnh"] = to_json(wnh_test(samples, th));
      std::string why;
      if (const auto corr = detail::harvested_correlation(samples, level, why)) {
        report["correlation"] = to_json(*corr);
      } else {
        report["correlation"] = nullptr;
        report["correlation_skipped"] = why;
      }
      const auto text = report.dump(2);
      std::cout << text << '\n';
      const auto dir = detail::resolve_output_dir(out_dir, "");
      if (!dir.empty()) {
        detail::write_text(std::filesystem::path(dir) / "diagnose.json", text + "\n");
      }
      return kExitOk;
    }

    if (weak_cmd->parsed()) {
      WeakErrorConfig w;
      if (!config_path.empty()) {
        w = load_experiment(config_path).weak_error;
      }
      if (seed) {
        w.seed = *seed;
      }
      if (limit_samples) {
        w.seeds = static_cast<std::int64_t>(*limit_samples);
      }
      w.threads = threads;
      const auto rep = weak_error_scan(w);
      const auto text = to_json(rep).dump(2);
      std::cout << text << '\n';
      const auto dir = detail::resolve_output_dir(out_dir, "");
      if (!dir.empty()) {
        detail::write_text(std::filesystem::path(dir) / "weak_error.json", text + "\n");
        std::string csv = std::string(kSchemaLine) + "\nlambda,qp,estimate,reference,error,stderr\n";
        for (std::size_t i = 0; i < rep.lambdas.size(); ++i) {
          csv += format_real(rep.lambdas[i]) + "," + format_real(rep.qps[i]) + "," + format_real(rep.estimates[i]) +
                 "," + format_real(rep.references[i]) + "," + format_real(rep.errors[i]) + "," +
                 format_real(rep.stderrs[i]) + "\n";
        }
        detail::write_text(std::filesystem::path(dir) / "weak_error.csv", csv);
      }
      return kExitOk;
    }

    if (cmp_cmd->parsed()) {
      double thr = 0.1;
      if (!config_path.empty()) {
        thr = load_experiment(config_path).loss_threshold;
      }
      if (threshold) {
        thr = *threshold;
      }
      const auto rows = compare_runs(files, thr);
      std::cout << summary_text(rows, thr);
      const auto dir = detail::resolve_output_dir(out_dir, "");
      if (!dir.empty()) {
        detail::write_text(std::filesystem::path(dir) / "summary.csv", summary_csv(rows));
      }
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

} // namespace qsgld
