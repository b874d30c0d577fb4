#pragma once

// Experiment harness: strict JSON configuration, per-run pipelines for the
// standard / learned / PAC-Bayes methods, a resumable job queue, and the
// budget table, report and certificate emitters used by the CLI.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "pacconf/bounds.hpp"
#include "pacconf/data.hpp"
#include "pacconf/error.hpp"
#include "pacconf/nn.hpp"
#include "pacconf/optimizer.hpp"
#include "pacconf/predictor.hpp"
#include "pacconf/score.hpp"
#include "pacconf/tasks.hpp"

namespace pacconf {

using nlohmann::json;

// --- Enum spellings ---------------------------------------------------------------

inline std::string to_string(PriorMode m) {
  switch (m) {
    case PriorMode::fixed: return "fixed";
    case PriorMode::tune_mean: return "tune_mean";
    case PriorMode::tune_mean_var: return "tune_mean_var";
  }
  return "";
}
inline std::string to_string(StepRule r) { return r == StepRule::sgd ? "sgd" : "adam"; }
inline std::string to_string(RegressionLoss l) { return l == RegressionLoss::log_radius ? "log_radius" : "log_u_tau"; }
inline std::string to_string(IcpBound b) { return b == IcpBound::vovk2a ? "vovk2a" : "vovk2b"; }

namespace detail {

template <class E>
E enum_from(const std::string& s, std::initializer_list<E> all, const char* what) {
  for (E e : all) {
    if (to_string(e) == s) return e;
  }
  throw ParseError(std::string("unknown ") + what + " '" + s + "'");
}

/// Reads fields from a JSON object and rejects keys nobody asked for.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ParseError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ParseError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  void get(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  template <class E>
  void get_enum(const char* key, E& out, std::initializer_list<E> all) {
    std::string s;
    get(key, s);
    if (!s.empty()) out = enum_from(s, all, key);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ParseError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

// --- Configuration -------------------------------------------------------------------

enum class TaskKind { regression, classification };
enum class Method { standard, learned_2a, learned_2b, pacbayes };

inline std::string to_string(TaskKind t) { return t == TaskKind::regression ? "regression" : "classification"; }
inline std::string to_string(Method m) {
  switch (m) {
    case Method::standard: return "standard";
    case Method::learned_2a: return "learned_2a";
    case Method::learned_2b: return "learned_2b";
    case Method::pacbayes: return "pacbayes";
  }
  return "";
}
inline Method method_from_string(const std::string& s) {
  return detail::enum_from(s, {Method::standard, Method::learned_2a, Method::learned_2b, Method::pacbayes}, "method");
}

struct RegressionSettings {
  long n_train = 100;
  long base_steps = 3000;
  double base_learning_rate = 1e-2;
  std::vector<long> u_hidden{128, 128};
  double gate_init = -2.0;
};

struct ClassificationSettings {
  ClassificationSource source;
  long n_train = 7000;
  std::vector<long> hidden{256, 128};
  long base_steps = 3000;
  double base_learning_rate = 1e-3;
  long base_minibatch = 128;
};

struct ExperimentConfig {
  TaskKind task = TaskKind::regression;
  std::vector<Method> methods{Method::standard};
  std::vector<long> n_cal{1000};
  std::vector<double> data_splits{0.5};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  long n_test = 10000;
  IcpBound standard_bound = IcpBound::vovk2a;
  OptimConfig optim;
  RegressionSettings regression;
  ClassificationSettings classification;
  std::string output_dir = "results";
  std::string cache_dir;  ///< empty: "<output_dir>/cache"
  bool write_predictors = true;
};

/// Task-dependent defaults applied before the user's values.
inline void apply_task_defaults(ExperimentConfig& c) {
  if (c.task == TaskKind::regression) {
    c.optim.outer_iterations = 7;
    c.optim.prior_variance_scale = 0.02;
    c.optim.alpha_hat_grid = {0.8};
  } else {
    c.optim.outer_iterations = 10;
    c.optim.prior_variance_scale = 0.01;
    c.optim.prior_mode = PriorMode::tune_mean_var;
    c.optim.alpha_hat_grid = {0.2, 0.35, 0.5, 0.65, 0.8};
  }
}

inline void read_optim(detail::StrictObject& o, OptimConfig& c) {
  o.get("alpha", c.alpha);
  o.get("delta", c.delta);
  o.get("alpha_hat_grid", c.alpha_hat_grid);
  o.get("alpha_hat_grid_relative", c.alpha_hat_grid_relative);
  o.get("inner_steps", c.inner_steps);
  o.get("outer_iterations", c.outer_iterations);
  o.get("prior_steps", c.prior_steps);
  o.get("learned_steps", c.learned_steps);
  o.get("learning_rate", c.learning_rate);
  o.get_enum("step_rule", c.step_rule, {StepRule::sgd, StepRule::adam});
  o.get("minibatch", c.minibatch);
  o.get("theta_samples", c.theta_samples);
  o.get("rho_init", c.rho_init);
  o.get("rho_growth", c.rho_growth);
  o.get("set_size_temperature", c.set_size_temperature);
  o.get("soft_sort_temperature", c.soft_sort_temperature);
  o.get_enum("prior_mode", c.prior_mode, {PriorMode::fixed, PriorMode::tune_mean, PriorMode::tune_mean_var});
  o.get("prior_variance_scale", c.prior_variance_scale);
  o.get_enum("regression_loss", c.regression_loss, {RegressionLoss::log_radius, RegressionLoss::log_u_tau});
  o.get("predictor_samples", c.predictor_samples);
  o.get("eval_every", c.eval_every);
  o.get("log_every", c.log_every);
  o.get("efficiency_scale", c.efficiency_scale);
  o.get("beta", c.beta);
  o.get("l_tau", c.l_tau);
}

inline json optim_to_json(const OptimConfig& c) {
  json j{{"alpha", c.alpha},
         {"delta", c.delta},
         {"alpha_hat_grid", c.alpha_hat_grid},
         {"alpha_hat_grid_relative", c.alpha_hat_grid_relative},
         {"inner_steps", c.inner_steps},
         {"outer_iterations", c.outer_iterations},
         {"prior_steps", c.prior_steps},
         {"learned_steps", c.learned_steps},
         {"learning_rate", c.learning_rate},
         {"step_rule", to_string(c.step_rule)},
         {"minibatch", c.minibatch},
         {"theta_samples", c.theta_samples},
         {"rho_init", c.rho_init},
         {"rho_growth", c.rho_growth},
         {"set_size_temperature", c.set_size_temperature},
         {"soft_sort_temperature", c.soft_sort_temperature},
         {"prior_mode", to_string(c.prior_mode)},
         {"prior_variance_scale", c.prior_variance_scale},
         {"regression_loss", to_string(c.regression_loss)},
         {"predictor_samples", c.predictor_samples},
         {"eval_every", c.eval_every},
         {"log_every", c.log_every},
         {"efficiency_scale", c.efficiency_scale}};
  if (c.beta) j["beta"] = *c.beta;
  if (c.l_tau) j["l_tau"] = *c.l_tau;
  return j;
}

namespace detail {

/// Accepts either a scalar or a list.
template <class T>
std::vector<T> scalar_or_list(const json& j, const char* key) {
  try {
    if (j.is_array()) return j.get<std::vector<T>>();
    return {j.get<T>()};
  } catch (const json::exception& e) {
    throw ParseError(std::string(key) + ": " + e.what());
  }
}

}  // namespace detail

/// Parses a configuration. `method`, `n_cal`, `data_split` and `seeds` take a
/// value or a list; lists span the sweep grid. Unknown keys are errors.
inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  detail::StrictObject o(j, "config");
  std::string task = "regression";
  o.get("task", task);
  c.task = detail::enum_from(task, {TaskKind::regression, TaskKind::classification}, "task");
  apply_task_defaults(c);

  if (const json* m = o.child("method")) {
    c.methods.clear();
    for (const auto& s : detail::scalar_or_list<std::string>(*m, "method")) c.methods.push_back(method_from_string(s));
  }
  if (const json* v = o.child("n_cal")) c.n_cal = detail::scalar_or_list<long>(*v, "n_cal");
  if (const json* v = o.child("data_split")) c.data_splits = detail::scalar_or_list<double>(*v, "data_split");
  if (const json* v = o.child("seeds")) c.seeds = detail::scalar_or_list<std::uint64_t>(*v, "seeds");
  o.get("n_test", c.n_test);
  o.get_enum("standard_bound", c.standard_bound, {IcpBound::vovk2a, IcpBound::vovk2b});
  o.get("output_dir", c.output_dir);
  o.get("cache_dir", c.cache_dir);
  o.get("write_predictors", c.write_predictors);
  read_optim(o, c.optim);

  if (const json* r = o.child("regression")) {
    detail::StrictObject ro(*r, "regression");
    ro.get("n_train", c.regression.n_train);
    ro.get("base_steps", c.regression.base_steps);
    ro.get("base_learning_rate", c.regression.base_learning_rate);
    ro.get("u_hidden", c.regression.u_hidden);
    ro.get("gate_init", c.regression.gate_init);
    ro.finish();
  }
  if (const json* cl = o.child("classification")) {
    detail::StrictObject co(*cl, "classification");
    auto& s = c.classification;
    co.get("train_images", s.source.train_images);
    co.get("train_labels", s.source.train_labels);
    co.get("test_images", s.source.test_images);
    co.get("test_labels", s.source.test_labels);
    co.get("side", s.source.side);
    co.get("synthetic_seed", s.source.synthetic_seed);
    co.get("max_degrees", s.source.corruption.max_degrees);
    co.get("noise_std", s.source.corruption.noise_std);
    co.get("n_train", s.n_train);
    co.get("hidden", s.hidden);
    co.get("base_steps", s.base_steps);
    co.get("base_learning_rate", s.base_learning_rate);
    co.get("base_minibatch", s.base_minibatch);
    co.finish();
  }
  o.finish();

  // Validation before any computation.
  if (c.methods.empty() || c.n_cal.empty() || c.data_splits.empty() || c.seeds.empty()) {
    throw ParseError("config: method, n_cal, data_split and seeds must be nonempty");
  }
  for (long n : c.n_cal) {
    if (n < 2) throw ParseError("config: n_cal must be >= 2");
  }
  for (double s : c.data_splits) {
    if (s < 0.0 || s >= 1.0) throw ParseError("config: data_split must lie in [0, 1)");
  }
  if (c.n_test < 1) throw ParseError("config: n_test must be >= 1");
  try {
    c.optim.validate();
  } catch (const DomainError& e) {
    throw ParseError(e.what());
  }
  if (c.task == TaskKind::classification) {
    const auto& src = c.classification.source;
    const bool any = !src.train_images.empty() || !src.train_labels.empty() || !src.test_images.empty() ||
                     !src.test_labels.empty();
    const bool all = !src.train_images.empty() && !src.train_labels.empty() && !src.test_images.empty() &&
                     !src.test_labels.empty();
    if (any && !all) throw ParseError("config: give all four IDX paths or none");
  }
  return c;
}

/// Canonical form of the settings that determine results (output locations
/// and sweep lists excluded, so every run of a sweep shares one hash).
inline json canonical_settings(const ExperimentConfig& c) {
  json j = optim_to_json(c.optim);
  j["task"] = to_string(c.task);
  j["n_test"] = c.n_test;
  j["standard_bound"] = to_string(c.standard_bound);
  if (c.task == TaskKind::regression) {
    j["regression"] = {{"n_train", c.regression.n_train},
                       {"base_steps", c.regression.base_steps},
                       {"base_learning_rate", c.regression.base_learning_rate},
                       {"u_hidden", c.regression.u_hidden},
                       {"gate_init", c.regression.gate_init}};
  } else {
    const auto& s = c.classification;
    j["classification"] = {{"train_images", s.source.train_images}, {"train_labels", s.source.train_labels},
                           {"test_images", s.source.test_images},   {"test_labels", s.source.test_labels},
                           {"side", s.source.side},                 {"synthetic_seed", s.source.synthetic_seed},
                           {"max_degrees", s.source.corruption.max_degrees},
                           {"noise_std", s.source.corruption.noise_std},
                           {"n_train", s.n_train},                  {"hidden", s.hidden},
                           {"base_steps", s.base_steps},            {"base_learning_rate", s.base_learning_rate},
                           {"base_minibatch", s.base_minibatch}};
  }
  return j;
}

inline json config_to_json(const ExperimentConfig& c) {
  json j = canonical_settings(c);
  std::vector<std::string> methods;
  for (Method m : c.methods) methods.push_back(to_string(m));
  j["method"] = methods;
  j["n_cal"] = c.n_cal;
  j["data_split"] = c.data_splits;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["cache_dir"] = c.cache_dir;
  j["write_predictors"] = c.write_predictors;
  return j;
}

/// FNV-1a over the canonical JSON text, as 16 hex digits.
inline std::string hash_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string config_hash(const ExperimentConfig& c) { return hash_hex(canonical_settings(c).dump()); }

/// Applies "a.b.c=value" overrides; values parse as JSON when possible and
/// fall back to plain strings.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ParseError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ParseError("override '" + assignment + "' has an empty key");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    json& next = (*node)[key];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ParseError("override '" + assignment + "': '" + key + "' is not an object");
    node = &next;
    start = dot + 1;
  }
}

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw Error("cannot open config '" + p.string() + "'");
  try {
    return json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

// --- Runs ------------------------------------------------------------------------------

struct RunKey {
  Method method = Method::standard;
  long n_cal = 0;
  double data_split = 0.5;
  std::uint64_t seed = 0;
};

struct RunRecord {
  std::string config_hash;
  std::string method;
  std::string task;
  long n_cal = 0;
  double data_split = 0.0;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  double delta = 0.0;
  double alpha_hat = kNaN;
  long n_tune = 0;
  long n_calib = 0;
  double coverage_rate = kNaN;
  double mean_efficiency = kNaN;
  long n_test = 0;
  double kl_qp = kNaN;
  double kl_budget = kNaN;
  double coverage_bound = kNaN;
  double efficiency_bound = kNaN;
  std::string status;
  double wall_clock_s = 0.0;
};

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{
      "config_hash", "method",         "task",         "n_cal",         "data_split",       "seed",   "alpha",
      "delta",       "alpha_hat",      "n_tune",       "n_calib",       "coverage_rate",    "mean_efficiency",
      "n_test",      "kl_qp",          "kl_budget",    "coverage_bound", "efficiency_bound", "status", "wall_clock_s"};
  return cols;
}

namespace detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline double parse_double(const std::string& s) {
  if (s.empty()) return kNaN;
  if (s == "inf") return kInf;
  if (s == "-inf") return -kInf;
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw ParseError("bad number '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw ParseError("bad number '" + s + "'");
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open '" + tmp.string() + "' for writing");
    os << content;
    if (!os) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::string csv_header() {
  std::string s;
  for (const auto& c : csv_columns()) s += (s.empty() ? "" : ",") + c;
  return s;
}

inline std::string to_csv_row(const RunRecord& r) {
  using detail::fmt;
  std::ostringstream os;
  os << r.config_hash << ',' << r.method << ',' << r.task << ',' << r.n_cal << ',' << fmt(r.data_split) << ','
     << r.seed << ',' << fmt(r.alpha) << ',' << fmt(r.delta) << ',' << fmt(r.alpha_hat) << ',' << r.n_tune << ','
     << r.n_calib << ',' << fmt(r.coverage_rate) << ',' << fmt(r.mean_efficiency) << ',' << r.n_test << ','
     << fmt(r.kl_qp) << ',' << fmt(r.kl_budget) << ',' << fmt(r.coverage_bound) << ',' << fmt(r.efficiency_bound)
     << ',' << r.status << ',' << std::fixed << std::setprecision(3) << r.wall_clock_s;
  return os.str();
}

inline RunRecord from_csv_row(const std::string& line) {
  const auto f = detail::split_csv_line(line);
  if (f.size() != csv_columns().size()) throw ParseError("results row has " + std::to_string(f.size()) + " fields");
  using detail::parse_double;
  RunRecord r;
  try {
    r.config_hash = f[0];
    r.method = f[1];
    r.task = f[2];
    r.n_cal = std::stol(f[3]);
    r.data_split = parse_double(f[4]);
    r.seed = std::stoull(f[5]);
    r.alpha = parse_double(f[6]);
    r.delta = parse_double(f[7]);
    r.alpha_hat = parse_double(f[8]);
    r.n_tune = std::stol(f[9]);
    r.n_calib = std::stol(f[10]);
    r.coverage_rate = parse_double(f[11]);
    r.mean_efficiency = parse_double(f[12]);
    r.n_test = std::stol(f[13]);
    r.kl_qp = parse_double(f[14]);
    r.kl_budget = parse_double(f[15]);
    r.coverage_bound = parse_double(f[16]);
    r.efficiency_bound = parse_double(f[17]);
    r.status = f[18];
    r.wall_clock_s = parse_double(f[19]);
  } catch (const std::logic_error&) {
    throw ParseError("malformed results row: " + line);
  }
  return r;
}

inline std::vector<RunRecord> read_results_csv(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw Error("cannot open results '" + p.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line != csv_header()) throw ParseError(p.string() + ": unexpected header");
  std::vector<RunRecord> out;
  while (std::getline(is, line)) {
    if (!line.empty()) out.push_back(from_csv_row(line));
  }
  return out;
}

/// Shared, seed-independent inputs of a sweep (pretrained classifier).
struct SharedInputs {
  std::optional<ParamVector> classifier;
};

inline Arch classifier_arch(const ExperimentConfig& c) {
  const long d = c.classification.source.side * c.classification.source.side;
  std::vector<long> sizes{d};
  for (long h : c.classification.hidden) sizes.push_back(h);
  sizes.push_back(10);
  return Arch{sizes, Activation::relu, Activation::identity, Head::identity};
}

inline std::filesystem::path cache_root(const ExperimentConfig& c) {
  return c.cache_dir.empty() ? std::filesystem::path(c.output_dir) / "cache" : std::filesystem::path(c.cache_dir);
}

/// Pretrains (or loads from cache) everything shared across runs.
inline SharedInputs prepare_shared(const ExperimentConfig& c) {
  SharedInputs s;
  if (c.task != TaskKind::classification) return s;
  const auto& cs = c.classification;
  const Arch arch = classifier_arch(c);
  json key = canonical_settings(c)["classification"];
  key["kind"] = "base_classifier";
  const auto path = cache_root(c) / ("classifier_" + hash_hex(key.dump()) + ".bin");
  s.classifier = cached<ParamVector>(
      path, [&](const std::filesystem::path& p) { return load_params(arch, p); },
      [](const ParamVector& v, const std::filesystem::path& p) { save_params(v, p); },
      [&] {
        ClassificationTask t = make_classification_task(cs.source, cs.n_train, 1, 1, 0);
        TrainConfig tc{cs.base_steps, cs.base_learning_rate, StepRule::adam, cs.base_minibatch};
        return train_base_classifier(t.train, arch, tc, static_cast<std::uint64_t>(cs.source.synthetic_seed));
      });
  return s;
}

/// Everything a run produces beyond its CSV row.
struct RunArtifacts {
  RunRecord record;
  std::optional<CalibratedPredictor> predictor;
  std::vector<CurveRow> curve;
  std::vector<GridRun> grid;
};

/// Score models and initial theta for one seed of a task.
struct TaskInstance {
  Dataset cal;
  Dataset test;
  ScoreModel fixed_model;  ///< score used by standard ICP
  ScoreModel model;        ///< trainable score
  ParamVector theta_init;
};

inline TaskInstance make_task_instance(const ExperimentConfig& c, const SharedInputs& shared, long n_cal,
                                       std::uint64_t seed) {
  TaskInstance ti;
  if (c.task == TaskKind::regression) {
    const auto& rs = c.regression;
    RegressionTask t = gen_regression(rs.n_train, n_cal, c.n_test, seed);
    const Arch base_arch = regression_base_arch();
    TrainConfig tc{rs.base_steps, rs.base_learning_rate, StepRule::adam, 0};
    ParamVector base = train_base_regressor(t, tc, seed, base_arch);
    std::vector<long> u_sizes{1};
    for (long h : rs.u_hidden) u_sizes.push_back(h);
    u_sizes.push_back(1);
    const Arch u_arch{u_sizes, Activation::tanh, Activation::identity, Head::identity};
    ti.fixed_model = ScoreModel::regression_residual(base_arch, base);
    ti.model = ScoreModel::regression_scaled(base_arch, base, u_arch);
    Rng rng = make_rng({seed, stream::prior_init});
    const ParamVector u0 = init_mlp(u_arch, rng);
    Vec theta(ti.model.theta_layout()->size());
    theta.head(u0.size()) = u0.values;
    theta(theta.size() - 1) = rs.gate_init;
    ti.theta_init = ParamVector(ti.model.theta_layout(), std::move(theta));
    ti.cal = std::move(t.cal);
    ti.test = std::move(t.test);
  } else {
    if (!shared.classifier) throw Error("classification run without a pretrained classifier");
    const auto& cs = c.classification;
    ClassificationTask t = make_classification_task(cs.source, 1, n_cal, c.n_test, seed);
    ti.model = ScoreModel::classification(classifier_arch(c), *shared.classifier);
    ti.fixed_model = ti.model;
    ti.theta_init = *shared.classifier;
    ti.cal = std::move(t.cal);
    ti.test = std::move(t.test);
  }
  return ti;
}

/// Executes one (method, n_cal, split, seed) cell. Infeasible guarantees are
/// reported through the status field rather than thrown.
inline RunArtifacts run_single(const ExperimentConfig& c, const SharedInputs& shared, const RunKey& key) {
  const auto start = std::chrono::steady_clock::now();
  RunArtifacts out;
  RunRecord& r = out.record;
  r.config_hash = config_hash(c);
  r.method = to_string(key.method);
  r.task = to_string(c.task);
  r.n_cal = key.n_cal;
  r.data_split = key.method == Method::standard ? 0.0 : key.data_split;
  r.seed = key.seed;
  r.alpha = c.optim.alpha;
  r.delta = c.optim.delta;
  r.status = "ok";
  const std::uint64_t seed = key.seed;
  const OptimConfig& oc = c.optim;
  try {
    TaskInstance ti = make_task_instance(c, shared, key.n_cal, seed);
    r.n_test = ti.test.size();
    const auto certify_fixed = [&](double alpha_hat, long n) {
      r.kl_qp = 0.0;
      r.kl_budget = kl_budget(oc.alpha, alpha_hat, oc.delta, n);
      r.coverage_bound = coverage_upper_bound(BoundInputs{oc.alpha, alpha_hat, oc.delta, n, 0.0}).upper_bound;
    };

    CalibratedPredictor pred;
    if (key.method == Method::standard) {
      const BaselineResult b =
          standard_baseline(ti.fixed_model, ti.fixed_model.default_theta(), ti.cal, oc.alpha, oc.delta, c.standard_bound);
      pred = b.predictor;
      r.alpha_hat = b.alpha_hat;
      r.n_calib = ti.cal.size();
      certify_fixed(b.alpha_hat, r.n_calib);
    } else {
      Rng split_rng = make_rng({seed, stream::split, static_cast<std::uint64_t>(key.n_cal)});
      const SplitData parts = random_split(ti.cal, key.data_split, split_rng);
      r.n_tune = parts.first.size();
      r.n_calib = parts.second.size();
      OptimConfig run_oc = oc;
      run_oc.data_split = key.data_split;
      if (key.method == Method::pacbayes) {
        const DiagGaussian prior0 = DiagGaussian::fan_in_scaled(ti.theta_init, oc.prior_variance_scale);
        PacBayesResult pb = alpha_hat_grid_search(prior0, ti.model, parts.first, parts.second, run_oc, seed);
        out.grid = pb.runs;
        if (pb.fallback) {
          const BaselineResult b = standard_baseline(ti.fixed_model, ti.fixed_model.default_theta(), ti.cal, oc.alpha,
                                                     oc.delta, c.standard_bound);
          pred = b.predictor;
          r.alpha_hat = b.alpha_hat;
          r.n_tune = 0;
          r.n_calib = ti.cal.size();
          certify_fixed(b.alpha_hat, r.n_calib);
          r.status = "fallback_standard";
        } else {
          pred = std::move(pb.predictor);
          out.curve = std::move(pb.curve);
          r.alpha_hat = pb.alpha_hat;
          r.kl_qp = pb.kl;
          r.kl_budget = pb.budget;
          r.coverage_bound = pb.coverage.upper_bound;
          r.efficiency_bound = pb.efficiency.upper_bound;
          if (!(pb.kl <= pb.budget + 1e-6)) r.status = "constraint_violated";
        }
      } else {
        const IcpBound bound = key.method == Method::learned_2a ? IcpBound::vovk2a : IcpBound::vovk2b;
        const BaselineResult b = learned_baseline(ti.model, ti.theta_init, parts.first, parts.second, run_oc, bound, seed);
        pred = b.predictor;
        r.alpha_hat = b.alpha_hat;
        certify_fixed(b.alpha_hat, r.n_calib);
      }
    }
    const EvalMetrics m = evaluate(pred, ti.test, seed);
    r.coverage_rate = m.coverage_rate;
    r.mean_efficiency = m.mean_efficiency;
    out.predictor = std::move(pred);
  } catch (const InfeasibleError& e) {
    r.status = "infeasible";
  } catch (const std::exception& e) {
    r.status = std::string("error");
    out.predictor.reset();
    std::cerr << "run " << r.method << " n_cal=" << r.n_cal << " seed=" << r.seed << " failed: " << e.what() << "\n";
  }
  r.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// --- Sweep orchestration ------------------------------------------------------------

inline std::vector<RunKey> expand_runs(const ExperimentConfig& c) {
  std::vector<RunKey> keys;
  for (Method m : c.methods) {
    for (long n : c.n_cal) {
      // The standard method ignores the split; run it once per (n, seed).
      const std::vector<double> splits = m == Method::standard ? std::vector<double>{0.0} : c.data_splits;
      for (double s : splits) {
        for (std::uint64_t seed : c.seeds) keys.push_back(RunKey{m, n, s, seed});
      }
    }
  }
  return keys;
}

inline std::string run_id(const RunKey& k) {
  std::ostringstream os;
  os << to_string(k.method) << "_n" << k.n_cal << "_split" << detail::fmt(k.method == Method::standard ? 0.0 : k.data_split)
     << "_seed" << k.seed;
  return os.str();
}

inline std::string curve_csv(const std::vector<CurveRow>& curve) {
  std::ostringstream os;
  os << "round,step,loss,kl,lambda,rho\n" << std::setprecision(10);
  for (const auto& row : curve) {
    os << row.round << ',' << row.step << ',' << row.loss << ',' << row.kl << ',' << row.lambda << ',' << row.rho
       << '\n';
  }
  return os.str();
}

struct SweepSummary {
  std::vector<RunRecord> records;
  long executed = 0;
  long skipped = 0;
  long failed = 0;
};

/// Runs every cell of the sweep through a job queue with `workers` threads.
/// Each run writes `<output>/runs/<hash>/<id>.csv` atomically; cells whose
/// file already exists are read back instead of recomputed. The combined
/// table is written to `<output>/results.csv` together with manifest.json.
inline SweepSummary run_sweep(const ExperimentConfig& c, unsigned workers = 1, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  const std::string hash = config_hash(c);
  const fs::path out_root(c.output_dir);
  const fs::path run_dir = out_root / "runs" / hash;
  fs::create_directories(run_dir);
  const std::vector<RunKey> keys = expand_runs(c);

  std::vector<std::optional<RunRecord>> results(keys.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const fs::path row_path = run_dir / (run_id(keys[i]) + ".csv");
    if (fs::exists(row_path)) {
      const auto rows = read_results_csv(row_path);
      if (rows.size() == 1) {
        results[i] = rows.front();
        continue;
      }
    }
    todo.push_back(i);
  }

  SweepSummary summary;
  summary.skipped = static_cast<long>(keys.size() - todo.size());
  if (!todo.empty()) {
    const SharedInputs shared = prepare_shared(c);
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    const auto worker = [&] {
      while (true) {
        const std::size_t j = next.fetch_add(1);
        if (j >= todo.size()) return;
        const std::size_t i = todo[j];
        RunArtifacts a = run_single(c, shared, keys[i]);
        const std::string id = run_id(keys[i]);
        if (!a.curve.empty()) detail::write_atomic(run_dir / (id + "_curve.csv"), curve_csv(a.curve));
        if (a.predictor && c.write_predictors) save_predictor(*a.predictor, run_dir / (id + ".pred"));
        detail::write_atomic(run_dir / (id + ".csv"), csv_header() + "\n" + to_csv_row(a.record) + "\n");
        if (log) {
          std::lock_guard<std::mutex> lock(log_mutex);
          *log << id << ": status=" << a.record.status << " coverage=" << detail::fmt(a.record.coverage_rate)
               << " efficiency=" << detail::fmt(a.record.mean_efficiency) << " (" << std::fixed
               << std::setprecision(1) << a.record.wall_clock_s << "s)\n";
          log->unsetf(std::ios::fixed);
        }
        results[i] = a.record;
      }
    };
    const unsigned n_threads = std::max(1U, std::min<unsigned>(workers, static_cast<unsigned>(todo.size())));
    std::vector<std::thread> threads;
    for (unsigned t = 1; t < n_threads; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    summary.executed = static_cast<long>(todo.size());
  }

  std::string table = csv_header() + "\n";
  for (const auto& r : results) {
    summary.records.push_back(*r);
    if (r->status == "error" || r->status == "constraint_violated") ++summary.failed;
    table += to_csv_row(*r) + "\n";
  }
  detail::write_atomic(out_root / "results.csv", table);
  json manifest{{"config_hash", hash}, {"config", config_to_json(c)}, {"runs", keys.size()}, {"failed", summary.failed}};
  detail::write_atomic(out_root / "manifest.json", manifest.dump(2) + "\n");
  return summary;
}

// --- Budget table ---------------------------------------------------------------------

struct BudgetRow {
  long n = 0;
  double alpha_hat = 0.0;
  double kl_budget = 0.0;
  double vovk2a = kNaN;  ///< per-N markers, repeated on every row
  double vovk2b = kNaN;
  double zero_crossing = kNaN;
};

/// kl_budget over an (N, alpha_hat) grid with the ICP boundary markers.
inline std::vector<BudgetRow> budget_table(double alpha, double delta, const std::vector<long>& n_list,
                                           const std::vector<double>& alpha_hat_grid) {
  std::vector<BudgetRow> rows;
  for (long n : n_list) {
    double v2a = kNaN;
    double v2b = kNaN;
    double zero = kNaN;
    try {
      v2a = vovk_2a_alpha_hat(alpha, delta, n);
    } catch (const InfeasibleError&) {
    }
    try {
      v2b = vovk_2b_alpha_hat(alpha, delta, n);
    } catch (const InfeasibleError&) {
    }
    try {
      zero = budget_zero_alpha_hat(alpha, delta, n);
    } catch (const InfeasibleError&) {
    }
    for (double a : alpha_hat_grid) {
      BudgetRow r{n, a, kNaN, v2a, v2b, zero};
      try {
        r.kl_budget = kl_budget(alpha, a, delta, n);
      } catch (const Error&) {
        // alpha_hat too small for this N: no certifiable rank
      }
      rows.push_back(r);
    }
  }
  return rows;
}

inline std::string budget_csv(const std::vector<BudgetRow>& rows) {
  using detail::fmt;
  std::string s = "n,alpha_hat,kl_budget,vovk2a_alpha_hat,vovk2b_alpha_hat,budget_zero_alpha_hat\n";
  for (const auto& r : rows) {
    s += std::to_string(r.n) + "," + fmt(r.alpha_hat) + "," + fmt(r.kl_budget) + "," + fmt(r.vovk2a) + "," +
         fmt(r.vovk2b) + "," + fmt(r.zero_crossing) + "\n";
  }
  return s;
}

// --- Report ----------------------------------------------------------------------------

/// Coverage below this level is outside the 95% binomial interval of a
/// (1 - alpha)-coverage predictor tested on n points.
inline double coverage_violation_threshold(double alpha, long n_test) {
  return (1.0 - alpha) - 1.96 * std::sqrt(alpha * (1.0 - alpha) / static_cast<double>(n_test));
}

inline bool coverage_violation(const RunRecord& r) {
  return !std::isnan(r.coverage_rate) && r.coverage_rate < coverage_violation_threshold(r.alpha, r.n_test);
}

struct MeanStd {
  double mean = kNaN;
  double std = kNaN;  ///< sample standard deviation (0 for one value)
  long count = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  m.count = static_cast<long>(v.size());
  if (v.empty()) return m;
  // Sorting first makes the result independent of input order.
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  double sum = 0.0;
  for (double x : s) sum += x;
  m.mean = sum / static_cast<double>(s.size());
  double ss = 0.0;
  for (double x : s) ss += (x - m.mean) * (x - m.mean);
  m.std = s.size() > 1 ? std::sqrt(ss / static_cast<double>(s.size() - 1)) : 0.0;
  return m;
}

struct ReportCell {
  std::string task;
  std::string method;
  long n_cal = 0;
  double data_split = 0.0;
  MeanStd coverage;
  MeanStd efficiency;
  long runs = 0;
  long violations = 0;
  long not_ok = 0;
  /// Efficiency relative to standard ICP at the same (task, n_cal):
  /// mean over seeds of the per-seed ratio, and ratio of the seed means.
  double relative_per_seed = kNaN;
  double relative_pooled = kNaN;
};

inline std::vector<ReportCell> build_report(const std::vector<RunRecord>& runs) {
  if (runs.empty()) throw DomainError("report: no runs");
  using CellKey = std::tuple<std::string, std::string, long, double>;
  std::map<CellKey, std::vector<const RunRecord*>> cells;
  std::map<std::tuple<std::string, long, std::uint64_t>, double> standard_eff;
  for (const auto& r : runs) {
    cells[{r.task, r.method, r.n_cal, r.data_split}].push_back(&r);
    if (r.method == "standard" && !std::isnan(r.mean_efficiency)) standard_eff[{r.task, r.n_cal, r.seed}] = r.mean_efficiency;
  }
  std::vector<ReportCell> out;
  for (const auto& [key, members] : cells) {
    ReportCell cell;
    std::tie(cell.task, cell.method, cell.n_cal, cell.data_split) = key;
    std::vector<double> cov, eff, ratios, std_effs;
    for (const RunRecord* r : members) {
      ++cell.runs;
      if (r->status != "ok") ++cell.not_ok;
      if (coverage_violation(*r)) ++cell.violations;
      if (!std::isnan(r->coverage_rate)) cov.push_back(r->coverage_rate);
      if (!std::isnan(r->mean_efficiency)) {
        eff.push_back(r->mean_efficiency);
        const auto it = standard_eff.find({r->task, r->n_cal, r->seed});
        if (it != standard_eff.end()) {
          ratios.push_back(r->mean_efficiency / it->second);
          std_effs.push_back(it->second);
        }
      }
    }
    cell.coverage = mean_std(cov);
    cell.efficiency = mean_std(eff);
    if (!ratios.empty()) {
      cell.relative_per_seed = mean_std(ratios).mean;
      std::vector<double> matched;
      for (const RunRecord* r : members) {
        if (!std::isnan(r->mean_efficiency) && standard_eff.count({r->task, r->n_cal, r->seed})) {
          matched.push_back(r->mean_efficiency);
        }
      }
      cell.relative_pooled = mean_std(matched).mean / mean_std(std_effs).mean;
    }
    out.push_back(cell);
  }
  return out;
}

inline std::string report_csv(const std::vector<ReportCell>& cells) {
  using detail::fmt;
  std::string s =
      "task,method,n_cal,data_split,runs,coverage_mean,coverage_std,efficiency_mean,efficiency_std,"
      "relative_efficiency_per_seed,relative_efficiency_pooled,coverage_violations,non_ok_runs\n";
  for (const auto& c : cells) {
    s += c.task + "," + c.method + "," + std::to_string(c.n_cal) + "," + fmt(c.data_split) + "," +
         std::to_string(c.runs) + "," + fmt(c.coverage.mean) + "," + fmt(c.coverage.std) + "," +
         fmt(c.efficiency.mean) + "," + fmt(c.efficiency.std) + "," + fmt(c.relative_per_seed) + "," +
         fmt(c.relative_pooled) + "," + std::to_string(c.violations) + "," + std::to_string(c.not_ok) + "\n";
  }
  return s;
}

inline json report_json(const std::vector<ReportCell>& cells) {
  const auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json arr = json::array();
  for (const auto& c : cells) {
    arr.push_back({{"task", c.task},
                   {"method", c.method},
                   {"n_cal", c.n_cal},
                   {"data_split", c.data_split},
                   {"runs", c.runs},
                   {"coverage", {{"mean", num(c.coverage.mean)}, {"std", num(c.coverage.std)}}},
                   {"efficiency", {{"mean", num(c.efficiency.mean)}, {"std", num(c.efficiency.std)}}},
                   {"relative_efficiency", {{"per_seed", num(c.relative_per_seed)}, {"pooled", num(c.relative_pooled)}}},
                   {"coverage_violations", c.violations},
                   {"non_ok_runs", c.not_ok}});
  }
  return json{{"cells", arr}};
}

// --- Certificates from a saved predictor ----------------------------------------------

struct CertificateReport {
  CoverageCertificate coverage;
  EfficiencyCertificate efficiency;
};

inline CertificateReport certify(const CertificateInputs& in) {
  CertificateReport r;
  r.coverage = coverage_upper_bound(BoundInputs{in.alpha, in.alpha_hat, in.delta, in.n, in.kl_qp});
  r.efficiency = efficiency_upper_bound(in.empirical_efficiency, in.kl_qp, in.beta, in.l_tau, in.n, in.gamma);
  return r;
}

inline json certificate_json(const CertificateInputs& in, const CertificateReport& r) {
  return json{{"inputs", in},
              {"coverage", {{"upper_bound", r.coverage.upper_bound},
                            {"empirical_rate", r.coverage.empirical_rate},
                            {"kl_radius", r.coverage.kl_radius}}},
              {"efficiency", {{"upper_bound", r.efficiency.upper_bound},
                              {"empirical_mean", r.efficiency.empirical_mean},
                              {"lipschitz_term", r.efficiency.lipschitz_term},
                              {"kl_term", r.efficiency.kl_term}}}};
}

}  // namespace pacconf
