#pragma once

// Versioned CSV artifacts: per-run trajectories and quantization-error samples.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "qsgld/error.hpp"
#include "qsgld/optimizers.hpp"
#include "qsgld/quantizer.hpp"

namespace qsgld {

inline constexpr const char* kSchemaLine = "#schema=1";
inline constexpr const char* kTrajectoryHeader = "epoch,train_loss,eval_loss,accuracy,qp,grad_norm,error_sum,wall_ms";
inline constexpr const char* kErrorHeader = "step,coord,qp,epsilon,input,level";

/// Shortest text that reads back to the same double.
inline std::string format_real(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) {
      break;
    }
  }
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_real(*v) : ""; }

inline void write_trajectory(std::ostream& out, const RunResult& run) {
  out << kSchemaLine << '\n' << kTrajectoryHeader << '\n';
  for (const auto& r : run.records) {
    if (r.diverged) {
      continue;
    }
    out << r.epoch << ',' << format_real(r.train_loss) << ',' << format_optional(r.eval_loss) << ','
        << format_optional(r.accuracy) << ',' << format_optional(r.qp) << ',' << format_real(r.grad_norm) << ','
        << format_optional(r.error_sum) << ',' << r.wall_ms << '\n';
  }
  if (run.diverged) {
    const auto epoch = run.records.empty() ? 0 : run.records.back().epoch;
    out << "#diverged,epoch=" << epoch << '\n';
  }
}

inline void write_trajectory_file(const std::string& path, const RunResult& run) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write '" + path + "'");
  }
  write_trajectory(out, run);
}

inline void write_errors(std::ostream& out, std::span<const QuantizationErrorSample> samples) {
  out << kSchemaLine << '\n' << kErrorHeader << '\n';
  for (const auto& s : samples) {
    out << s.step_index << ',' << s.coord << ',' << format_real(s.qp) << ',' << format_real(s.epsilon_factor) << ','
        << format_real(s.input) << ',' << s.level << '\n';
  }
}

inline void write_errors_file(const std::string& path, std::span<const QuantizationErrorSample> samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write '" + path + "'");
  }
  write_errors(out, samples);
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double read_real(const std::string& s, std::size_t offset) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw FormatError("expected a number, got '" + s + "'", offset);
  }
  if (used != s.size()) {
    throw FormatError("expected a number, got '" + s + "'", offset);
  }
  return v;
}

inline std::optional<double> read_optional(const std::string& s, std::size_t offset) {
  if (s.empty()) {
    return std::nullopt;
  }
  return read_real(s, offset);
}

/// Reads the schema and header lines; returns the data lines with offsets.
inline std::vector<std::pair<std::string, std::size_t>> read_table(const std::string& path, const char* header,
                                                                   bool& diverged) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open '" + path + "'", 0);
  }
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line) || line != kSchemaLine) {
    throw FormatError("'" + path + "': missing " + std::string(kSchemaLine) + " line", 0);
  }
  offset += line.size() + 1;
  if (!std::getline(in, line) || line != header) {
    throw FormatError("'" + path + "': header does not match schema 1", offset);
  }
  offset += line.size() + 1;
  std::vector<std::pair<std::string, std::size_t>> rows;
  diverged = false;
  while (std::getline(in, line)) {
    if (line.rfind("#diverged", 0) == 0) {
      diverged = true;
    } else if (!line.empty() && line[0] != '#') {
      rows.emplace_back(line, offset);
    }
    offset += line.size() + 1;
  }
  return rows;
}

} // namespace detail

inline RunResult read_trajectory_file(const std::string& path) {
  RunResult run;
  const auto rows = detail::read_table(path, kTrajectoryHeader, run.diverged);
  for (const auto& [line, off] : rows) {
    const auto f = detail::split_csv(line);
    if (f.size() != 8) {
      throw FormatError("'" + path + "': expected 8 fields", off);
    }
    TrajectoryRecord r;
    r.epoch = static_cast<std::int64_t>(detail::read_real(f[0], off));
    r.train_loss = detail::read_real(f[1], off);
    r.eval_loss = detail::read_optional(f[2], off);
    r.accuracy = detail::read_optional(f[3], off);
    r.qp = detail::read_optional(f[4], off);
    r.grad_norm = detail::read_real(f[5], off);
    r.error_sum = detail::read_optional(f[6], off);
    r.wall_ms = static_cast<std::int64_t>(detail::read_real(f[7], off));
    run.records.push_back(r);
  }
  return run;
}

inline std::vector<QuantizationErrorSample> read_errors_file(const std::string& path) {
  bool diverged = false;
  const auto rows = detail::read_table(path, kErrorHeader, diverged);
  std::vector<QuantizationErrorSample> out;
  out.reserve(rows.size());
  for (const auto& [line, off] : rows) {
    const auto f = detail::split_csv(line);
    if (f.size() != 6) {
      throw FormatError("'" + path + "': expected 6 fields", off);
    }
    QuantizationErrorSample s;
    s.step_index = static_cast<std::int64_t>(detail::read_real(f[0], off));
    s.coord = static_cast<std::uint32_t>(detail::read_real(f[1], off));
    s.qp = detail::read_real(f[2], off);
    s.epsilon_factor = detail::read_real(f[3], off);
    s.input = detail::read_real(f[4], off);
    s.level = static_cast<std::int64_t>(detail::read_real(f[5], off));
    out.push_back(s);
  }
  return out;
}

/// File contents with the wall_ms column blanked, for determinism checks.
inline std::string strip_wall_time(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#' && line != kTrajectoryHeader) {
      const auto pos = line.rfind(',');
      if (pos != std::string::npos) {
        line = line.substr(0, pos + 1);
      }
    }
    out << line << '\n';
  }
  return out.str();
}

} // namespace qsgld
