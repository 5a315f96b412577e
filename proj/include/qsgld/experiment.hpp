#pragma once

// Experiment orchestration: objective construction, seeded fan-out of
// (optimizer, seed) jobs over a worker pool, artifact writing and summaries.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "qsgld/config.hpp"
#include "qsgld/csv.hpp"
#include "qsgld/diagnostics.hpp"
#include "qsgld/langevin.hpp"
#include "qsgld/objectives.hpp"
#include "qsgld/optimizers.hpp"

namespace qsgld {

inline constexpr const char* kOutputDirEnv = "QSGLD_OUTPUT_DIR";

/// Data shared read-only by every job of an experiment.
struct ExperimentData {
  std::shared_ptr<const Dataset> train;
  std::shared_ptr<const Dataset> test;
};

inline ExperimentData load_data(const ObjectiveSpec& spec, std::optional<std::size_t> limit = std::nullopt) {
  ExperimentData d;
  if (spec.kind != ObjectiveKind::mlp_classifier) {
    return d;
  }
  if (spec.dataset == DatasetSource::blobs) {
    RngStream rng(spec.data_seed);
    auto train_rng = rng.split(1);
    auto test_rng = rng.split(2);
    const auto p = spec.layers.front();
    const auto n_train = limit ? std::min(*limit, spec.train_n) : spec.train_n;
    const auto n_test = limit ? std::min(*limit, spec.test_n) : spec.test_n;
    d.train = std::make_shared<Dataset>(make_blobs(n_train, train_rng, p));
    d.test = std::make_shared<Dataset>(make_blobs(n_test, test_rng, p));
  } else {
    d.train = std::make_shared<Dataset>(load_idx(spec.train_images, spec.train_labels, limit));
    if (!spec.test_images.empty() && !spec.test_labels.empty()) {
      d.test = std::make_shared<Dataset>(load_idx(spec.test_images, spec.test_labels, limit));
    }
  }
  return d;
}

inline std::unique_ptr<Objective> make_objective(const ObjectiveSpec& spec, const ExperimentData& data) {
  if (spec.kind == ObjectiveKind::analytic) {
    return std::make_unique<AnalyticObjective>(spec.function, spec.dim, spec.batches, spec.grad_noise);
  }
  MlpSpec mlp{spec.layers, spec.activation};
  return std::make_unique<MlpObjective>(mlp, data.train, data.test, spec.batch_size);
}

/// Starting point for a seed; shared by every optimizer with that seed.
inline ParamVector initial_point(const ObjectiveSpec& spec, std::uint64_t seed) {
  RngStream rng = RngStream(seed).split(7);
  if (spec.kind == ObjectiveKind::mlp_classifier) {
    MlpSpec mlp{spec.layers, spec.activation};
    return mlp_init(mlp, rng);
  }
  if (!spec.x0.empty()) {
    return ParamVector(spec.x0);
  }
  ParamVector x(spec.dim);
  for (double& v : x) {
    v = rng.uniform(spec.init_low, spec.init_high);
  }
  return x;
}

/// Compensation half-time in steps: explicit tau0 or a fraction of the run.
inline OptimizerConfig resolve_optimizer(const NamedOptimizer& n, std::int64_t total_steps) {
  auto c = n.config;
  c.compensation.tau0 = n.tau0 ? *n.tau0
                               : static_cast<std::int64_t>(std::llround(n.tau0_fraction * static_cast<double>(total_steps)));
  c.compensation.lambda = c.lambda;
  return c;
}

struct JobResult {
  std::string optimizer;
  std::uint64_t seed = 0;
  std::string trajectory_path;
  std::string errors_path;
  RunResult run;
};

struct ExperimentResult {
  std::vector<JobResult> jobs;
  bool any_diverged = false;
};

inline std::string trajectory_name(const std::string& optimizer, std::uint64_t seed) {
  return optimizer + "_seed" + std::to_string(seed) + ".csv";
}

inline std::string errors_name(const std::string& optimizer, std::uint64_t seed) {
  return optimizer + "_seed" + std::to_string(seed) + "_errors.csv";
}

/// Runs `count` independent jobs on up to `threads` workers; the first
/// exception is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(count)));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) {
      fn(i);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) {
            failure = std::current_exception();
          }
        }
      }
    });
  }
  for (auto& t : pool) {
    t.join();
  }
  if (failure) {
    std::rethrow_exception(failure);
  }
}

struct RunOptions {
  unsigned threads = 1;
  std::optional<std::size_t> limit_samples; // dataset cap
  bool write_files = true;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  require_runnable(cfg);
  const auto data = load_data(cfg.objective, opt.limit_samples);
  if (opt.write_files) {
    std::filesystem::create_directories(cfg.output_dir);
  }

  ExperimentResult result;
  for (const auto& o : cfg.optimizers) {
    for (auto seed : cfg.seeds) {
      JobResult j;
      j.optimizer = o.name;
      j.seed = seed;
      result.jobs.push_back(std::move(j));
    }
  }

  parallel_for(result.jobs.size(), opt.threads, [&](std::size_t idx) {
    auto& job = result.jobs[idx];
    const auto& named = cfg.optimizers[idx / cfg.seeds.size()];
    auto objective = make_objective(cfg.objective, data);
    const auto total = cfg.epochs * static_cast<std::int64_t>(objective->batch_count());
    const auto oc = resolve_optimizer(named, total);
    const auto x0 = initial_point(cfg.objective, job.seed);
    const RngStream rng(job.seed);

    std::unique_ptr<ReservoirSink> sink;
    if (cfg.collect_errors && oc.quantized()) {
      sink = std::make_unique<ReservoirSink>(cfg.error_cap, rng.split(11));
    }
    job.run = run(oc, *objective, x0, cfg.epochs, rng, sink.get());

    if (opt.write_files) {
      const std::filesystem::path dir(cfg.output_dir);
      job.trajectory_path = (dir / trajectory_name(job.optimizer, job.seed)).string();
      write_trajectory_file(job.trajectory_path, job.run);
      if (sink) {
        job.errors_path = (dir / errors_name(job.optimizer, job.seed)).string();
        write_errors_file(job.errors_path, sink->samples());
      }
    }
  });

  if (cfg.sde_reference && cfg.objective.kind == ObjectiveKind::analytic && opt.write_files) {
    const std::filesystem::path dir(cfg.output_dir);
    std::ofstream out(dir / "sde_reference.csv", std::ios::binary);
    out << kSchemaLine << "\nseed,loss,norm\n";
    for (auto seed : cfg.seeds) {
      auto objective = make_objective(cfg.objective, data);
      RngStream rng = RngStream(seed).split(5);
      const auto x = simulate_sde(*cfg.sde_reference, *objective, initial_point(cfg.objective, seed), rng);
      out << seed << ',' << format_real(objective->loss(x)) << ',' << format_real(l2_norm(x)) << '\n';
    }
  }

  for (const auto& j : result.jobs) {
    result.any_diverged = result.any_diverged || j.run.diverged;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Summaries

struct SummaryRow {
  std::string optimizer;
  std::size_t runs = 0;
  double median_final_loss = 0.0;
  std::optional<double> best_accuracy;     // median over runs of the best epoch accuracy
  std::optional<double> epochs_to_threshold; // median over runs that reached it
  std::size_t reached_threshold = 0;
  std::size_t diverged = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) {
    throw UsageError("median of an empty sequence");
  }
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Optimizer label from a `<optimizer>_seed<k>.csv` file name.
inline std::string optimizer_of(const std::string& path) {
  const auto stem = std::filesystem::path(path).stem().string();
  const auto pos = stem.rfind("_seed");
  return pos == std::string::npos ? stem : stem.substr(0, pos);
}

inline std::vector<SummaryRow> compare_runs(const std::vector<std::string>& paths, double loss_threshold = 0.1) {
  if (paths.empty()) {
    throw UsageError("compare: no CSV files given");
  }
  struct Acc {
    std::vector<double> finals, best_acc, hit;
    std::size_t runs = 0, diverged = 0;
  };
  std::vector<std::pair<std::string, Acc>> groups;
  for (const auto& p : paths) {
    const auto run = read_trajectory_file(p);
    const auto name = optimizer_of(p);
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == name; });
    if (it == groups.end()) {
      groups.emplace_back(name, Acc{});
      it = std::prev(groups.end());
    }
    auto& acc = it->second;
    ++acc.runs;
    acc.diverged += run.diverged ? 1 : 0;
    if (run.records.empty()) {
      continue;
    }
    acc.finals.push_back(run.records.back().train_loss);
    std::optional<double> best;
    for (const auto& r : run.records) {
      if (r.accuracy) {
        best = std::max(best.value_or(0.0), *r.accuracy);
      }
    }
    if (best) {
      acc.best_acc.push_back(*best);
    }
    for (const auto& r : run.records) {
      if (r.train_loss <= loss_threshold) {
        acc.hit.push_back(static_cast<double>(r.epoch));
        break;
      }
    }
  }
  std::vector<SummaryRow> rows;
  for (const auto& [name, acc] : groups) {
    SummaryRow row;
    row.optimizer = name;
    row.runs = acc.runs;
    row.diverged = acc.diverged;
    row.median_final_loss = acc.finals.empty() ? std::nan("") : median(acc.finals);
    if (!acc.best_acc.empty()) {
      row.best_accuracy = median(acc.best_acc);
    }
    row.reached_threshold = acc.hit.size();
    if (!acc.hit.empty()) {
      row.epochs_to_threshold = median(acc.hit);
    }
    rows.push_back(row);
  }
  return rows;
}

inline constexpr const char* kSummaryHeader =
    "optimizer,runs,median_final_loss,best_accuracy,epochs_to_threshold,reached_threshold,diverged";

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream out;
  out << kSchemaLine << '\n' << kSummaryHeader << '\n';
  for (const auto& r : rows) {
    out << r.optimizer << ',' << r.runs << ',' << format_real(r.median_final_loss) << ','
        << format_optional(r.best_accuracy) << ',' << format_optional(r.epochs_to_threshold) << ','
        << r.reached_threshold << ',' << r.diverged << '\n';
  }
  return out.str();
}

inline std::string summary_text(const std::vector<SummaryRow>& rows, double loss_threshold) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %5s %16s %10s %14s %9s\n", "optimizer", "runs", "median final", "best acc",
                "epochs<=thr", "diverged");
  out << buf;
  for (const auto& r : rows) {
    const auto acc = r.best_accuracy ? format_real(std::round(*r.best_accuracy * 1e4) / 1e4) : std::string("-");
    const auto ett = r.epochs_to_threshold ? format_real(*r.epochs_to_threshold) + " (" +
                                                 std::to_string(r.reached_threshold) + ")"
                                           : std::string("-");
    std::snprintf(buf, sizeof buf, "%-14s %5zu %16.6g %10s %14s %9zu\n", r.optimizer.c_str(), r.runs,
                  r.median_final_loss, acc.c_str(), ett.c_str(), r.diverged);
    out << buf;
  }
  out << "threshold: train_loss <= " << format_real(loss_threshold) << '\n';
  return out.str();
}

/// Recommended hyper-parameters and library defaults.
inline std::string defaults_text() {
  const OptimizerConfig oc;
  const QuantizationSchedule s;
  const CompensationConfig cc;
  std::ostringstream out;
  out << "quantization schedule\n"
      << "  eta^2            = 2^19 (" << format_real(kDefaultEtaSquared) << ")\n"
      << "  C                = 1/eta^2 (" << format_real(s.big_c) << ")\n"
      << "  b                = " << s.base << '\n'
      << "  kind             = " << to_string(s.kind) << " (Q_p at t_e=0: " << format_real(qp_at(s, 0)) << ")\n"
      << "compensation\n"
      << "  kappa            in {2, 4} (default " << format_real(cc.kappa) << ")\n"
      << "  tau0             = 5-20% of total steps (default 10%)\n"
      << "training\n"
      << "  lambda           = " << format_real(oc.lambda) << '\n'
      << "  epochs           = 200\n"
      << "  batch size       = 100\n"
      << "adam family\n"
      << "  beta1            = " << format_real(oc.beta1) << '\n'
      << "  beta2            = " << format_real(oc.beta2) << '\n'
      << "  eps              = " << format_real(oc.eps) << '\n'
      << "  weight_decay     = " << format_real(oc.weight_decay) << " (adamw)\n"
      << "  psi              = " << format_real(oc.psi) << " (nadam)\n"
      << "diagnostics\n"
      << "  ks threshold     = 0.02\n"
      << "  var tolerance    = 2%\n"
      << "  autocorr         = 0.02\n";
  return out.str();
}

} // namespace qsgld
