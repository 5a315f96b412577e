#pragma once

// Experiment configuration in a small TOML subset:
//
//   # comment
//   key = 1.5            numbers (integers, reals, 2^19 style powers)
//   key = "text"         double-quoted strings
//   key = true | false
//   key = [1, 2, 3]      flat arrays of numbers or strings
//   [section]            plain table
//   [[optimizer]]        one entry per optimizer (array of tables)
//
// Unknown keys are rejected so typos surface as line diagnostics.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "qsgld/diagnostics.hpp"
#include "qsgld/error.hpp"
#include "qsgld/langevin.hpp"
#include "qsgld/objectives.hpp"
#include "qsgld/optimizers.hpp"

namespace qsgld {

/// Malformed configuration; line 0 means "not tied to a line".
class ConfigError : public UsageError {
public:
  ConfigError(int line, const std::string& field, const std::string& what)
      : UsageError(format(line, field, what)), line_(line), field_(field) {}

  int line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

private:
  static std::string format(int line, const std::string& field, const std::string& what) {
    std::string out = "config";
    if (line > 0) {
      out += ":" + std::to_string(line);
    }
    if (!field.empty()) {
      out += ": " + field;
    }
    return out + ": " + what;
  }

  int line_;
  std::string field_;
};

struct ConfigValue {
  using Array = std::vector<std::variant<double, std::string>>;
  std::variant<double, std::string, bool, Array> value;
  int line = 0;
};

struct ConfigTable {
  std::string name;
  int line = 0;
  std::map<std::string, ConfigValue> entries;
};

struct ConfigDocument {
  std::vector<ConfigTable> tables; // tables[0] is the root

  std::vector<const ConfigTable*> all(const std::string& name) const {
    std::vector<const ConfigTable*> out;
    for (const auto& t : tables) {
      if (t.name == name) {
        out.push_back(&t);
      }
    }
    return out;
  }

  const ConfigTable* find(const std::string& name) const {
    for (const auto& t : tables) {
      if (t.name == name) {
        return &t;
      }
    }
    return nullptr;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    return "";
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Strips a trailing comment, ignoring '#' inside strings.
inline std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') {
      in_str = !in_str;
    } else if (s[i] == '#' && !in_str) {
      return s.substr(0, i);
    }
  }
  return s;
}

inline double parse_number(const std::string& text, int line, const std::string& key) {
  const auto caret = text.find('^');
  if (caret != std::string::npos) {
    const double b = parse_number(trim(text.substr(0, caret)), line, key);
    const double e = parse_number(trim(text.substr(caret + 1)), line, key);
    return std::pow(b, e);
  }
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ConfigError(line, key, "expected a number, got '" + text + "'");
  }
  if (used != text.size() || !std::isfinite(v)) {
    throw ConfigError(line, key, "expected a number, got '" + text + "'");
  }
  return v;
}

inline std::variant<double, std::string> parse_scalar(const std::string& text, int line, const std::string& key) {
  if (!text.empty() && text.front() == '"') {
    if (text.size() < 2 || text.back() != '"') {
      throw ConfigError(line, key, "unterminated string");
    }
    return text.substr(1, text.size() - 2);
  }
  return parse_number(text, line, key);
}

inline ConfigValue parse_value(const std::string& text, int line, const std::string& key) {
  ConfigValue v;
  v.line = line;
  if (text.empty()) {
    throw ConfigError(line, key, "missing value");
  }
  if (text == "true" || text == "false") {
    v.value = text == "true";
    return v;
  }
  if (text.front() == '[') {
    if (text.back() != ']') {
      throw ConfigError(line, key, "unterminated array");
    }
    ConfigValue::Array arr;
    const auto body = trim(text.substr(1, text.size() - 2));
    if (!body.empty()) {
      std::string item;
      bool in_str = false;
      for (char c : body + ",") {
        if (c == '"') {
          in_str = !in_str;
        }
        if (c == ',' && !in_str) {
          const auto t = trim(item);
          if (t.empty()) {
            throw ConfigError(line, key, "empty array element");
          }
          arr.push_back(parse_scalar(t, line, key));
          item.clear();
        } else {
          item += c;
        }
      }
    }
    v.value = std::move(arr);
    return v;
  }
  auto s = parse_scalar(text, line, key);
  if (const auto* d = std::get_if<double>(&s)) {
    v.value = *d;
  } else {
    v.value = std::get<std::string>(s);
  }
  return v;
}

} // namespace detail

inline ConfigDocument parse_config_text(const std::string& text) {
  ConfigDocument doc;
  doc.tables.push_back({"", 0, {}});
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto s = detail::trim(detail::strip_comment(raw));
    if (s.empty()) {
      continue;
    }
    if (s.front() == '[') {
      const bool array = s.rfind("[[", 0) == 0;
      const std::size_t open = array ? 2 : 1;
      if (s.size() < 2 * open + 1 || s.substr(s.size() - open) != std::string(open, ']')) {
        throw ConfigError(line, "", "malformed table header '" + s + "'");
      }
      const auto name = detail::trim(s.substr(open, s.size() - 2 * open));
      if (name.empty()) {
        throw ConfigError(line, "", "empty table name");
      }
      if (!array && doc.find(name) != nullptr) {
        throw ConfigError(line, name, "table defined twice");
      }
      doc.tables.push_back({name, line, {}});
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(line, "", "expected 'key = value', got '" + s + "'");
    }
    const auto key = detail::trim(s.substr(0, eq));
    if (key.empty()) {
      throw ConfigError(line, "", "missing key");
    }
    auto& table = doc.tables.back();
    if (table.entries.count(key) != 0) {
      throw ConfigError(line, key, "duplicate key");
    }
    table.entries[key] = detail::parse_value(detail::trim(s.substr(eq + 1)), line, key);
  }
  return doc;
}

inline ConfigDocument parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError(0, "", "cannot open '" + path + "'");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Typed access to one table; records which keys were consumed.
class TableReader {
public:
  explicit TableReader(const ConfigTable* t) : table_(t) {}

  bool has(const std::string& key) const { return table_ != nullptr && table_->entries.count(key) != 0; }

  double number(const std::string& key, double fallback) { return opt_number(key).value_or(fallback); }

  std::optional<double> opt_number(const std::string& key) {
    const auto* v = get(key);
    if (v == nullptr) {
      return std::nullopt;
    }
    if (const auto* d = std::get_if<double>(&v->value)) {
      return *d;
    }
    throw ConfigError(v->line, qualified(key), "expected a number");
  }

  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    const auto* v = get(key);
    if (v == nullptr) {
      return fallback;
    }
    const double d = number(key, 0.0);
    if (d != std::floor(d) || std::abs(d) > 9e15) {
      throw ConfigError(v->line, qualified(key), "expected an integer");
    }
    return static_cast<std::int64_t>(d);
  }

  std::string string(const std::string& key, const std::string& fallback) {
    const auto* v = get(key);
    if (v == nullptr) {
      return fallback;
    }
    if (const auto* s = std::get_if<std::string>(&v->value)) {
      return *s;
    }
    throw ConfigError(v->line, qualified(key), "expected a string");
  }

  bool boolean(const std::string& key, bool fallback) {
    const auto* v = get(key);
    if (v == nullptr) {
      return fallback;
    }
    if (const auto* b = std::get_if<bool>(&v->value)) {
      return *b;
    }
    throw ConfigError(v->line, qualified(key), "expected true or false");
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) {
    const auto* v = get(key);
    if (v == nullptr) {
      return fallback;
    }
    const auto* arr = std::get_if<ConfigValue::Array>(&v->value);
    if (arr == nullptr) {
      if (const auto* d = std::get_if<double>(&v->value)) {
        return {*d};
      }
      throw ConfigError(v->line, qualified(key), "expected an array of numbers");
    }
    std::vector<double> out;
    for (const auto& e : *arr) {
      const auto* d = std::get_if<double>(&e);
      if (d == nullptr) {
        throw ConfigError(v->line, qualified(key), "expected an array of numbers");
      }
      out.push_back(*d);
    }
    return out;
  }

  int line_of(const std::string& key) const {
    if (has(key)) {
      return table_->entries.at(key).line;
    }
    return table_ != nullptr ? table_->line : 0;
  }

  std::string qualified(const std::string& key) const {
    return table_ == nullptr || table_->name.empty() ? key : table_->name + "." + key;
  }

  /// Throws on any key that was never read.
  void reject_unknown() const {
    if (table_ == nullptr) {
      return;
    }
    for (const auto& [k, v] : table_->entries) {
      if (used_.count(k) == 0) {
        throw ConfigError(v.line, qualified(k), "unknown key");
      }
    }
  }

private:
  const ConfigValue* get(const std::string& key) {
    used_.insert(key);
    if (!has(key)) {
      return nullptr;
    }
    return &table_->entries.at(key);
  }

  const ConfigTable* table_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Experiment schema

enum class DatasetSource { blobs, idx };

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::analytic;
  // analytic
  AnalyticKind function = AnalyticKind::quadratic;
  std::size_t dim = 2;
  std::size_t batches = 1;
  double grad_noise = 0.0;
  std::vector<double> x0;              // fixed start; empty means random init
  double init_low = -1.0;
  double init_high = 1.0;
  // mlp
  DatasetSource dataset = DatasetSource::blobs;
  std::size_t train_n = 512;
  std::size_t test_n = 512;
  std::vector<std::size_t> layers{2, 16, 2};
  Activation activation = Activation::relu;
  std::size_t batch_size = 32;
  std::uint64_t data_seed = 12345;
  std::string train_images, train_labels, test_images, test_labels;
};

struct NamedOptimizer {
  std::string name;
  OptimizerConfig config;
  std::optional<std::int64_t> tau0;   // explicit, in steps
  double tau0_fraction = 0.1;          // of total steps, used when tau0 is unset
};

struct ExperimentConfig {
  ObjectiveSpec objective;
  std::vector<NamedOptimizer> optimizers;
  std::int64_t epochs = 200;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "out";
  bool collect_errors = false;
  std::size_t error_cap = 1000000;
  std::optional<SdeConfig> sde_reference;
  WeakErrorConfig weak_error;
  WnhThresholds wnh;
  double loss_threshold = 0.1; // compare: epochs-to-threshold
};

namespace detail {

inline OptimizerConfig read_optimizer(TableReader& t, NamedOptimizer& out) {
  OptimizerConfig c;
  const auto algo = t.string("algorithm", "");
  if (algo.empty()) {
    throw ConfigError(t.line_of("algorithm"), t.qualified("algorithm"), "missing");
  }
  try {
    c.algorithm = algorithm_from_string(algo);
  } catch (const UsageError& e) {
    throw ConfigError(t.line_of("algorithm"), t.qualified("algorithm"), e.what());
  }
  out.name = t.string("name", algo);
  c.lambda = t.number("lambda", c.lambda);
  c.beta1 = t.number("beta1", c.beta1);
  c.beta2 = t.number("beta2", c.beta2);
  c.eps = t.number("eps", c.eps);
  c.weight_decay = t.number("weight_decay", c.weight_decay);
  c.psi = t.number("psi", c.psi);

  const auto kind = t.string("schedule", to_string(c.schedule.kind));
  try {
    c.schedule.kind = schedule_kind_from_string(kind);
  } catch (const UsageError& e) {
    throw ConfigError(t.line_of("schedule"), t.qualified("schedule"), e.what());
  }
  if (t.has("eta") && t.has("eta_squared")) {
    throw ConfigError(t.line_of("eta"), t.qualified("eta"), "give eta or eta_squared, not both");
  }
  c.schedule.eta = t.number("eta", c.schedule.eta);
  if (const auto e2 = t.opt_number("eta_squared")) {
    c.schedule.eta = std::sqrt(*e2);
  }
  c.schedule.base = static_cast<int>(t.integer("base", c.schedule.base));
  c.schedule.big_c = t.number("big_c", c.schedule.big_c);
  c.schedule.log_base = t.number("log_base", c.schedule.log_base);

  c.compensation.enabled = t.boolean("compensation", c.compensation.enabled);
  c.compensation.kappa = t.number("kappa", c.compensation.kappa);
  if (t.has("tau0")) {
    out.tau0 = t.integer("tau0", 0);
  }
  out.tau0_fraction = t.number("tau0_fraction", out.tau0_fraction);
  if (!(out.tau0_fraction >= 0.0 && out.tau0_fraction <= 1.0)) {
    throw ConfigError(t.line_of("tau0_fraction"), t.qualified("tau0_fraction"), "must lie in [0, 1]");
  }
  c.compensation.lambda = c.lambda;
  try {
    c.validate();
  } catch (const UsageError& e) {
    throw ConfigError(t.line_of("algorithm"), t.qualified("algorithm"), e.what());
  }
  return c;
}

inline void read_objective(TableReader& t, ObjectiveSpec& o) {
  const auto kind = t.string("kind", "analytic");
  if (kind == "analytic") {
    o.kind = ObjectiveKind::analytic;
  } else if (kind == "mlp") {
    o.kind = ObjectiveKind::mlp_classifier;
  } else {
    throw ConfigError(t.line_of("kind"), t.qualified("kind"), "expected \"analytic\" or \"mlp\"");
  }
  const auto fn = t.string("function", to_string(o.function));
  try {
    o.function = analytic_kind_from_string(fn);
  } catch (const UsageError& e) {
    throw ConfigError(t.line_of("function"), t.qualified("function"), e.what());
  }
  const auto positive = [&](const std::string& key, std::int64_t fallback) {
    const auto v = t.integer(key, fallback);
    if (v < 1) {
      throw ConfigError(t.line_of(key), t.qualified(key), "must be positive");
    }
    return static_cast<std::size_t>(v);
  };
  o.dim = positive("dim", static_cast<std::int64_t>(o.dim));
  o.batches = positive("batches", static_cast<std::int64_t>(o.batches));
  o.grad_noise = t.number("grad_noise", o.grad_noise);
  if (!(o.grad_noise >= 0.0)) {
    throw ConfigError(t.line_of("grad_noise"), t.qualified("grad_noise"), "must be non-negative");
  }
  o.x0 = t.numbers("x0", {});
  if (!o.x0.empty() && o.x0.size() != o.dim) {
    throw ConfigError(t.line_of("x0"), t.qualified("x0"), "length must equal dim");
  }
  o.init_low = t.number("init_low", o.init_low);
  o.init_high = t.number("init_high", o.init_high);
  if (!(o.init_high > o.init_low)) {
    throw ConfigError(t.line_of("init_high"), t.qualified("init_high"), "must exceed init_low");
  }

  const auto ds = t.string("dataset", "blobs");
  if (ds == "blobs") {
    o.dataset = DatasetSource::blobs;
  } else if (ds == "idx") {
    o.dataset = DatasetSource::idx;
  } else {
    throw ConfigError(t.line_of("dataset"), t.qualified("dataset"), "expected \"blobs\" or \"idx\"");
  }
  o.train_n = positive("train_n", static_cast<std::int64_t>(o.train_n));
  o.test_n = positive("test_n", static_cast<std::int64_t>(o.test_n));
  const auto widths = t.numbers("layers", {});
  if (!widths.empty()) {
    o.layers.clear();
    for (double w : widths) {
      if (w < 1 || w != std::floor(w)) {
        throw ConfigError(t.line_of("layers"), t.qualified("layers"), "widths must be positive integers");
      }
      o.layers.push_back(static_cast<std::size_t>(w));
    }
    if (o.layers.size() < 2) {
      throw ConfigError(t.line_of("layers"), t.qualified("layers"), "need input and output widths");
    }
  }
  const auto act = t.string("activation", "relu");
  if (act == "relu") {
    o.activation = Activation::relu;
  } else if (act == "tanh") {
    o.activation = Activation::tanh;
  } else {
    throw ConfigError(t.line_of("activation"), t.qualified("activation"), "expected \"relu\" or \"tanh\"");
  }
  o.batch_size = positive("batch_size", static_cast<std::int64_t>(o.batch_size));
  o.data_seed = static_cast<std::uint64_t>(t.integer("data_seed", static_cast<std::int64_t>(o.data_seed)));
  o.train_images = t.string("train_images", "");
  o.train_labels = t.string("train_labels", "");
  o.test_images = t.string("test_images", "");
  o.test_labels = t.string("test_labels", "");
  if (o.kind == ObjectiveKind::mlp_classifier && o.dataset == DatasetSource::idx &&
      (o.train_images.empty() || o.train_labels.empty())) {
    throw ConfigError(t.line_of("dataset"), t.qualified("train_images"), "idx dataset needs train_images and train_labels");
  }
}

} // namespace detail

inline ExperimentConfig experiment_from_document(const ConfigDocument& doc) {
  ExperimentConfig cfg;
  std::set<std::string> known{"", "objective", "optimizer", "sde", "weak_error", "diagnose"};
  for (const auto& t : doc.tables) {
    if (known.count(t.name) == 0) {
      throw ConfigError(t.line, t.name, "unknown table");
    }
  }

  TableReader root(doc.find(""));
  cfg.epochs = root.integer("epochs", cfg.epochs);
  if (cfg.epochs < 1) {
    throw ConfigError(root.line_of("epochs"), "epochs", "must be >= 1");
  }
  const auto seeds = root.numbers("seeds", {0.0});
  if (seeds.empty()) {
    throw ConfigError(root.line_of("seeds"), "seeds", "need at least one seed");
  }
  cfg.seeds.clear();
  for (double s : seeds) {
    if (s < 0 || s != std::floor(s)) {
      throw ConfigError(root.line_of("seeds"), "seeds", "seeds must be non-negative integers");
    }
    cfg.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  cfg.output_dir = root.string("output_dir", cfg.output_dir);
  cfg.collect_errors = root.boolean("collect_errors", cfg.collect_errors);
  const auto cap = root.integer("error_cap", static_cast<std::int64_t>(cfg.error_cap));
  if (cap < 1) {
    throw ConfigError(root.line_of("error_cap"), "error_cap", "must be positive");
  }
  cfg.error_cap = static_cast<std::size_t>(cap);
  cfg.loss_threshold = root.number("loss_threshold", cfg.loss_threshold);
  root.reject_unknown();

  TableReader obj(doc.find("objective"));
  detail::read_objective(obj, cfg.objective);
  obj.reject_unknown();

  for (const auto* t : doc.all("optimizer")) {
    TableReader r(t);
    NamedOptimizer n;
    n.config = detail::read_optimizer(r, n);
    r.reject_unknown();
    for (const auto& other : cfg.optimizers) {
      if (other.name == n.name) {
        throw ConfigError(t->line, "optimizer.name", "duplicate optimizer name '" + n.name + "'");
      }
    }
    cfg.optimizers.push_back(std::move(n));
  }

  if (const auto* t = doc.find("sde")) {
    TableReader r(t);
    SdeConfig s;
    s.cq = r.number("cq", s.cq);
    s.dt = r.number("dt", s.dt);
    s.horizon = r.number("horizon", s.horizon);
    r.reject_unknown();
    try {
      s.validate();
    } catch (const UsageError& e) {
      throw ConfigError(t->line, "sde", e.what());
    }
    cfg.sde_reference = s;
  }

  if (const auto* t = doc.find("weak_error")) {
    TableReader r(t);
    auto& w = cfg.weak_error;
    w.lambdas = r.numbers("lambdas", w.lambdas);
    w.seeds = r.integer("seeds", w.seeds);
    w.horizon = r.number("horizon", w.horizon);
    w.cq = r.number("cq", w.cq);
    w.x0 = r.number("x0", w.x0);
    w.dither = r.number("dither", w.dither);
    try {
      w.test_fn = test_function_from_string(r.string("test_fn", to_string(w.test_fn)));
    } catch (const UsageError& e) {
      throw ConfigError(r.line_of("test_fn"), "weak_error.test_fn", e.what());
    }
    r.reject_unknown();
  }

  if (const auto* t = doc.find("diagnose")) {
    TableReader r(t);
    auto& w = cfg.wnh;
    w.ks = r.number("ks", w.ks);
    w.mean_z = r.number("mean_z", w.mean_z);
    w.var_tolerance = r.number("var_tolerance", w.var_tolerance);
    w.autocorr = r.number("autocorr", w.autocorr);
    w.min_step = r.integer("min_step", w.min_step);
    r.reject_unknown();
  }
  return cfg;
}

/// Run-time validation of the parsed experiment (needs at least one optimizer).
inline void require_runnable(const ExperimentConfig& cfg) {
  if (cfg.optimizers.empty()) {
    throw ConfigError(0, "optimizer", "need at least one [[optimizer]] table");
  }
}

inline ExperimentConfig load_experiment(const std::string& path) {
  return experiment_from_document(parse_config_file(path));
}

} // namespace qsgld
