#pragma once

// Batch front end: run configuration, the five run modes and the JSON report.

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mqsel/csv.hpp"
#include "mqsel/error.hpp"
#include "mqsel/model.hpp"
#include "mqsel/selection.hpp"
#include "mqsel/simbench.hpp"
#include "mqsel/solver.hpp"

namespace mqsel {

using Json = nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";
/// Bumped whenever the report layout changes.
inline constexpr int kReportRevision = 1;

enum class RunMode { fit, select, simulate, predict, split_study };

inline std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::fit: return "fit";
    case RunMode::select: return "select";
    case RunMode::simulate: return "simulate";
    case RunMode::predict: return "predict";
    case RunMode::split_study: return "split-study";
  }
  return "select";
}

/// Flat dotted-key settings, as read from a config file and the command line.
using Settings = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_number(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  double v = 0.0;
  const char* b = t.data();
  const char* e = t.data() + t.size();
  if (b != e && *b == '+') ++b;
  const auto [ptr, ec] = std::from_chars(b, e, v);
  require(!t.empty() && ec == std::errc() && ptr == e && std::isfinite(v), ErrorCode::InvalidConfig,
          key + ": '" + text + "' is not a finite number");
  return v;
}

/// "a/b" or a decimal.
inline double to_fraction(const std::string& key, const std::string& text) {
  const auto slash = text.find('/');
  if (slash == std::string::npos) return to_number(key, text);
  const double den = to_number(key, text.substr(slash + 1));
  require(den != 0.0, ErrorCode::InvalidConfig, key + ": zero denominator in '" + text + "'");
  return to_number(key, text.substr(0, slash)) / den;
}

inline std::size_t to_count(const std::string& key, const std::string& text) {
  const double v = to_number(key, text);
  require(v >= 0.0 && v == std::floor(v) && v < 1e15, ErrorCode::InvalidConfig,
          key + ": '" + text + "' is not a nonnegative integer");
  return static_cast<std::size_t>(v);
}

inline bool to_bool(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t.empty() || t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  fail(ErrorCode::InvalidConfig, key + ": '" + text + "' is not a boolean");
}

inline std::vector<double> to_numbers(const std::string& key, const std::string& text) {
  std::vector<double> out;
  for (const auto& item : split_list(text)) out.push_back(to_fraction(key, item));
  return out;
}

/// Orders experiment labels numerically when both are integers.
inline bool label_less(const std::string& a, const std::string& b) {
  const bool na = !a.empty() && a.find_first_not_of("0123456789") == std::string::npos;
  const bool nb = !b.empty() && b.find_first_not_of("0123456789") == std::string::npos;
  if (na && nb && a.size() != b.size()) return a.size() < b.size();
  return a < b;
}

inline void flatten_into(const Json& node, const std::string& prefix, Settings& out) {
  if (node.is_object()) {
    for (const auto& [key, value] : node.items()) flatten_into(value, prefix.empty() ? key : prefix + "." + key, out);
    return;
  }
  require(!prefix.empty(), ErrorCode::InvalidConfig, "config file must hold an object");
  if (node.is_array()) {
    std::string joined;
    for (const auto& item : node) {
      require(!item.is_object() && !item.is_array(), ErrorCode::InvalidConfig, prefix + ": nested lists not allowed");
      joined += (joined.empty() ? "" : ",") + (item.is_string() ? item.get<std::string>() : item.dump());
    }
    out[prefix] = joined;
  } else if (node.is_string()) {
    out[prefix] = node.get<std::string>();
  } else if (node.is_null()) {
    out.erase(prefix);
  } else {
    out[prefix] = node.dump();
  }
}

}  // namespace detail

/// Nested JSON object flattened to dotted keys; lists become comma-joined.
inline Settings flatten_config(const Json& config) {
  Settings out;
  detail::flatten_into(config, "", out);
  return out;
}

inline Settings read_config_file(const std::string& path) {
  const auto text = read_text_file(path);
  Json parsed;
  try {
    parsed = Json::parse(text);
  } catch (const Json::parse_error& e) {
    detail::fail(ErrorCode::InvalidConfig, path + ": " + e.what());
  }
  return flatten_config(parsed);
}

struct RunConfig {
  RunMode mode = RunMode::select;
  /// (label, path) per experiment, in label order.
  std::vector<std::pair<std::string, std::string>> data;
  /// Held-out files for predict mode, labelled like `data`.
  std::vector<std::pair<std::string, std::string>> holdout;
  std::string response = "y";
  std::vector<double> quantiles = QuantileGrid::equally_spaced(6).levels();
  PenaltyFamily family = PenaltyFamily::scad;
  std::optional<double> lambda;
  std::vector<double> lambda_grid;
  std::size_t grid_points = 50;
  double grid_ratio = 1e-3;
  std::optional<double> shape_a;
  double T_divisor = 3.0;
  std::optional<std::size_t> dn;
  std::uint64_t seed = 1;
  bool standardize = true;
  std::vector<double> weights;
  std::string out = "-";
  std::optional<std::size_t> screen_top;
  std::string echo_dir;
  std::string preset = "table1";
  std::size_t sim_p = 100;
  std::optional<std::size_t> sim_n;
  std::size_t replications = 1;
  std::vector<std::string> methods{"DI", "CA-2/6", "CA-3/6"};
  std::optional<std::size_t> train;
  std::optional<std::size_t> validate_size;
  std::size_t repetitions = 50;

  double shape() const { return shape_a.value_or(default_shape(family)); }
  PenaltySpec penalty(double lam) const { return {family, lam, shape(), weights}; }

  static RunConfig from_settings(const Settings& s) {
    using detail::to_count;
    using detail::to_number;
    RunConfig c;
    for (const auto& [key, value] : s) {
      if (key == "mode") {
        if (value == "fit") c.mode = RunMode::fit;
        else if (value == "select") c.mode = RunMode::select;
        else if (value == "simulate") c.mode = RunMode::simulate;
        else if (value == "predict") c.mode = RunMode::predict;
        else if (value == "split-study") c.mode = RunMode::split_study;
        else detail::fail(ErrorCode::InvalidConfig, "mode: unknown mode '" + value + "'");
      } else if (key.rfind("data.", 0) == 0 && key.size() > 5) {
        c.data.emplace_back(key.substr(5), value);
      } else if (key.rfind("holdout.", 0) == 0 && key.size() > 8) {
        c.holdout.emplace_back(key.substr(8), value);
      } else if (key == "response") {
        c.response = value;
      } else if (key == "quantiles") {
        // "grid:D" is shorthand for m / D, m = 1..D-1.
        if (value.rfind("grid:", 0) == 0) {
          const auto d = to_count(key, value.substr(5));
          detail::require(d >= 2, ErrorCode::InvalidConfig, "quantiles: grid denominator must be >= 2");
          c.quantiles = QuantileGrid::equally_spaced(static_cast<int>(d)).levels();
        } else {
          c.quantiles = detail::to_numbers(key, value);
        }
      } else if (key == "penalty.family") {
        try {
          c.family = parse_penalty_family(value);
        } catch (const Error& e) {
          detail::fail(ErrorCode::InvalidConfig, std::string("penalty.family: ") + e.what());
        }
      } else if (key == "penalty.lambda") {
        c.lambda = to_number(key, value);
      } else if (key == "penalty.lambda-grid") {
        c.lambda_grid = detail::to_numbers(key, value);
      } else if (key == "penalty.grid-points") {
        c.grid_points = to_count(key, value);
      } else if (key == "penalty.grid-ratio") {
        c.grid_ratio = to_number(key, value);
      } else if (key == "penalty.a") {
        c.shape_a = to_number(key, value);
      } else if (key == "mqbic.T-divisor") {
        c.T_divisor = to_number(key, value);
      } else if (key == "mqbic.dn") {
        c.dn = to_count(key, value);
      } else if (key == "seed") {
        const auto t = detail::trim(value);
        std::uint64_t v = 0;
        const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
        detail::require(!t.empty() && ec == std::errc() && ptr == t.data() + t.size(), ErrorCode::InvalidConfig,
                        "seed: '" + value + "' is not an unsigned integer");
        c.seed = v;
      } else if (key == "standardize") {
        c.standardize = detail::to_bool(key, value);
      } else if (key == "weights") {
        c.weights = detail::to_numbers(key, value);
      } else if (key == "out") {
        c.out = value;
      } else if (key == "screen.top") {
        c.screen_top = to_count(key, value);
      } else if (key == "echo.dir") {
        c.echo_dir = value;
      } else if (key == "simulate.preset") {
        c.preset = value;
      } else if (key == "simulate.p") {
        c.sim_p = to_count(key, value);
      } else if (key == "simulate.n") {
        c.sim_n = to_count(key, value);
      } else if (key == "simulate.replications") {
        c.replications = to_count(key, value);
      } else if (key == "simulate.methods") {
        c.methods = detail::split_list(value);
      } else if (key == "split.train") {
        c.train = to_count(key, value);
      } else if (key == "split.validate") {
        c.validate_size = to_count(key, value);
      } else if (key == "split.repetitions") {
        c.repetitions = to_count(key, value);
      } else {
        detail::fail(ErrorCode::InvalidConfig, "unknown setting '" + key + "'");
      }
    }
    auto by_label = [](const auto& a, const auto& b) { return detail::label_less(a.first, b.first); };
    std::sort(c.data.begin(), c.data.end(), by_label);
    std::sort(c.holdout.begin(), c.holdout.end(), by_label);
    c.validate();
    return c;
  }

  void validate() const {
    using detail::require;
    const auto bad = ErrorCode::InvalidConfig;
    if (mode != RunMode::simulate) require(!data.empty(), bad, "at least one --data.<k>=path is required");
    for (const auto& [label, path] : data) require(!path.empty(), bad, "data." + label + ": empty path");
    if (mode == RunMode::predict) {
      require(holdout.size() == data.size(), bad, "predict needs one --holdout.<k> per --data.<k>");
      for (std::size_t k = 0; k < data.size(); ++k) {
        require(holdout[k].first == data[k].first, bad, "holdout label '" + holdout[k].first + "' has no data file");
        require(!holdout[k].second.empty(), bad, "holdout." + holdout[k].first + ": empty path");
      }
    }
    if (mode == RunMode::fit) require(lambda.has_value(), bad, "fit needs --penalty.lambda");
    if (lambda) require(*lambda >= 0.0, bad, "penalty.lambda must be >= 0");
    require(!response.empty(), bad, "response column name is empty");
    require(!quantiles.empty(), bad, "quantiles: at least one level is required");
    require(grid_points >= 1 && grid_ratio > 0.0 && grid_ratio < 1.0, bad, "lambda grid needs points >= 1, ratio in (0,1)");
    for (double l : lambda_grid) require(l >= 0.0, bad, "penalty.lambda-grid values must be >= 0");
    require(T_divisor > 0.0, bad, "mqbic.T-divisor must be positive");
    if (dn) require(*dn >= 1, bad, "mqbic.dn must be >= 1");
    require(!out.empty(), bad, "out: empty path");
    if (screen_top) require(*screen_top >= 1, bad, "screen.top must be >= 1");
    require(replications >= 1, bad, "simulate.replications must be >= 1");
    require(!methods.empty(), bad, "simulate.methods is empty");
    require(repetitions >= 1, bad, "split.repetitions must be >= 1");
  }

  /// Effective settings with every default resolved, nested by dotted key.
  Json to_json() const {
    Json j;
    j["mode"] = to_string(mode);
    j["data"] = Json::object();
    for (const auto& [label, path] : data) j["data"][label] = path;
    j["holdout"] = Json::object();
    for (const auto& [label, path] : holdout) j["holdout"][label] = path;
    j["response"] = response;
    j["quantiles"] = quantiles;
    j["penalty"] = {{"family", to_string(family)},
                    {"lambda", lambda ? Json(*lambda) : Json(nullptr)},
                    {"lambda-grid", lambda_grid},
                    {"grid-points", grid_points},
                    {"grid-ratio", grid_ratio},
                    {"a", shape()}};
    j["mqbic"] = {{"T-divisor", T_divisor}, {"dn", dn ? Json(*dn) : Json(nullptr)}};
    j["seed"] = seed;
    j["standardize"] = standardize;
    j["weights"] = weights;
    j["out"] = out;
    j["screen"] = {{"top", screen_top ? Json(*screen_top) : Json(nullptr)}};
    j["echo"] = {{"dir", echo_dir}};
    j["simulate"] = {{"preset", preset},
                     {"p", sim_p},
                     {"n", sim_n ? Json(*sim_n) : Json(nullptr)},
                     {"replications", replications},
                     {"methods", methods}};
    j["split"] = {{"train", train ? Json(*train) : Json(nullptr)},
                  {"validate", validate_size ? Json(*validate_size) : Json(nullptr)},
                  {"repetitions", repetitions}};
    return j;
  }
};

/// Every dotted key accepted on the command line besides data.<k> / holdout.<k>.
inline const std::vector<std::string>& known_setting_keys() {
  static const std::vector<std::string> keys{
      "mode",          "response",         "quantiles",           "penalty.family",    "penalty.lambda",
      "penalty.lambda-grid", "penalty.grid-points", "penalty.grid-ratio", "penalty.a", "mqbic.T-divisor",
      "mqbic.dn",      "seed",             "standardize",         "weights",           "out",
      "screen.top",    "echo.dir",         "simulate.preset",     "simulate.p",        "simulate.n",
      "simulate.replications", "simulate.methods", "split.train", "split.validate", "split.repetitions"};
  return keys;
}

/// Settings from `--config file` overlaid with every `--key=value` flag.
inline Settings parse_command_line(int argc, const char* const* argv) {
  CLI::App app{"Multi-experiment multi-quantile variable selection"};
  app.allow_extras();
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (nested keys)");
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  for (const auto& key : known_setting_keys()) {
    auto* opt = app.add_option("--" + key, values[key]);
    if (key == "standardize") opt->expected(0, 1);
    options[key] = opt;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    throw;
  } catch (const CLI::ParseError& e) {
    detail::fail(ErrorCode::InvalidConfig, e.what());
  }
  Settings s = config_path.empty() ? Settings{} : read_config_file(config_path);
  for (const auto& [key, opt] : options) {
    if (opt->count() > 0) s[key] = values[key];
  }
  const auto extras = app.remaining();
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& tok = extras[i];
    const bool dynamic = tok.rfind("--data.", 0) == 0 || tok.rfind("--holdout.", 0) == 0;
    detail::require(dynamic, ErrorCode::InvalidConfig, "unrecognised argument '" + tok + "'");
    const auto eq = tok.find('=');
    if (eq != std::string::npos) {
      s[tok.substr(2, eq - 2)] = tok.substr(eq + 1);
    } else {
      detail::require(i + 1 < extras.size(), ErrorCode::InvalidConfig, tok + " needs a path");
      s[tok.substr(2)] = extras[++i];
    }
  }
  return s;
}

namespace detail {

inline Json version_json() {
  return {{"tool", "mqsel"}, {"version", kToolVersion}, {"revision", kReportRevision}};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline Json names_of(const std::vector<std::size_t>& idx, const std::vector<std::string>& names) {
  Json out = Json::array();
  for (auto j : idx) out.push_back(names.at(j));
  return out;
}

inline Json coefficients_json(const CoefficientTensor& c, const QuantileGrid& grid,
                              const std::vector<std::string>& labels) {
  Json out = Json::array();
  for (std::size_t k = 0; k < c.num_experiments(); ++k) {
    Json per = Json::array();
    for (std::size_t m = 0; m < c.num_quantiles(); ++m) {
      std::vector<double> slopes(c.num_predictors());
      for (std::size_t j = 0; j < slopes.size(); ++j) slopes[j] = c.slope(k, m, j);
      per.push_back({{"tau", grid[m]}, {"intercept", c.intercept(k, m)}, {"slopes", slopes}});
    }
    out.push_back({{"experiment", labels.at(k)}, {"quantiles", per}});
  }
  return out;
}

inline Json fit_json(const FitResult& fit, const PenaltySpec& penalty, const MultiExperimentDataset& data,
                     const QuantileGrid& grid, const std::vector<std::string>& labels) {
  const auto active = active_set(fit.coefficients);
  Json j;
  j["penalty"] = {{"family", to_string(penalty.family)},
                  {"lambda", penalty.lambda},
                  {"a", penalty.shape_a},
                  {"weights", penalty.experiment_weights}};
  j["objective_value"] = fit.objective_value;
  j["working_objective"] = fit.working_objective;
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  j["predictors"] = data.predictor_names();
  j["selected"] = names_of(active, data.predictor_names());
  j["selected_indices"] = active;
  j["coefficients"] = coefficients_json(fit.coefficients, grid, labels);
  if (fit.standardized_coefficients) {
    j["standardized_coefficients"] = coefficients_json(*fit.standardized_coefficients, grid, labels);
  }
  return j;
}

inline Json mqbic_table_json(const SelectionReport& r) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    const auto& c = r.candidates[i];
    rows.push_back({{"lambda", c.lambda ? Json(*c.lambda) : Json(nullptr)},
                    {"model_size", c.criterion.model_size},
                    {"pooled_check_loss", c.criterion.loss_sum},
                    {"log_loss", c.criterion.log_loss},
                    {"size_term", c.criterion.size_term},
                    {"mqbic", c.criterion.value},
                    {"converged", c.converged},
                    {"chosen", i == r.chosen_index}});
  }
  return rows;
}

inline Json metrics_json(const Metrics& m) { return {{"psr", m.psr}, {"fdr", m.fdr}, {"ae", m.ae}}; }

inline Json mean_sd_json(const std::vector<double>& v) {
  double mean = 0.0, var = 0.0;
  for (double x : v) mean += x / static_cast<double>(v.size());
  if (v.size() > 1) {
    for (double x : v) var += (x - mean) * (x - mean) / static_cast<double>(v.size() - 1);
  }
  return {{"mean", mean}, {"sd", std::sqrt(var)}};
}

/// Loaded data plus the experiment labels and the screening outcome.
struct LoadedData {
  MultiExperimentDataset data;
  std::vector<std::string> labels;
  Json screening;
};

inline LoadedData load_data(const RunConfig& c) {
  std::vector<std::string> paths, labels;
  for (const auto& [label, path] : c.data) {
    labels.push_back(label);
    paths.push_back(path);
  }
  auto data = ingest_csv(paths, c.response);
  Json screening = nullptr;
  if (c.screen_top) {
    const auto keep = screen_by_correlation(data, *c.screen_top);
    screening = {{"top", *c.screen_top}, {"kept", names_of(keep, data.predictor_names())}};
    data = select_predictors(data, keep);
  }
  return {std::move(data), std::move(labels), std::move(screening)};
}

inline MqbicConfig mqbic_config(const RunConfig& c, const MultiExperimentDataset& data) {
  const std::size_t p = data.num_predictors();
  return {default_T(std::max<std::size_t>(p, 2), c.T_divisor),
          c.dn.value_or(MqbicConfig::default_max_model_size(data.average_sample_size()))};
}

inline SolverConfig solver_config(const RunConfig& c) {
  SolverConfig s;
  s.standardize = c.standardize;
  return s;
}

inline std::vector<double> lambda_grid_for(const RunConfig& c, const MultiExperimentDataset& data,
                                           const QuantileGrid& grid, std::span<const double> weights) {
  if (!c.lambda_grid.empty()) return c.lambda_grid;
  return default_lambda_grid(data, grid, weights, c.standardize, c.grid_points, c.grid_ratio);
}

struct Trained {
  FitResult fit;
  PenaltySpec penalty;
  std::optional<SelectionReport> selection;
};

/// fit_penalized at the configured lambda, or select_lambda when none is set.
inline Trained train(const RunConfig& c, const MultiExperimentDataset& data, const QuantileGrid& grid) {
  const auto solver = solver_config(c);
  if (c.lambda) {
    auto pen = c.penalty(*c.lambda);
    return {fit_penalized(data, grid, pen, solver), pen, std::nullopt};
  }
  auto base = c.penalty(0.0);
  auto report = select_lambda(data, grid, base, lambda_grid_for(c, data, grid, c.weights), mqbic_config(c, data), solver);
  base.lambda = report.chosen_lambda.value_or(0.0);
  auto fit = report.refit;
  return {std::move(fit), base, std::move(report)};
}

inline Json selection_json(const SelectionReport& r, const MultiExperimentDataset& data, const MqbicConfig& mq) {
  return {{"chosen_lambda", r.chosen_lambda.value_or(0.0)},
          {"selected", names_of(r.selected_predictors, data.predictor_names())},
          {"T", mq.T},
          {"n", data.average_sample_size()},
          {"mqbic_table", mqbic_table_json(r)},
          {"excluded_zero_loss", r.excluded_zero_loss}};
}

/// Separate analysis of each experiment on the full quantile grid, with the
/// union of the selected sets; coefficients assembled into one K x M tensor.
struct SeparateFit {
  std::vector<std::size_t> selected;
  CoefficientTensor coefficients;
};

inline SeparateFit separate_analysis(const RunConfig& c, const MultiExperimentDataset& data, const QuantileGrid& grid) {
  const std::size_t K = data.num_experiments();
  const std::size_t M = grid.size();
  const std::size_t p = data.num_predictors();
  SeparateFit out{{}, CoefficientTensor(K, M, p)};
  std::set<std::size_t> chosen;
  for (std::size_t k = 0; k < K; ++k) {
    const auto sub = data.select_experiments({k});
    PenaltySpec base{c.family, 0.0, c.shape(), {}};
    auto report = select_lambda(sub, grid, base, lambda_grid_for(c, sub, grid, {}), mqbic_config(c, sub),
                                solver_config(c));
    chosen.insert(report.selected_predictors.begin(), report.selected_predictors.end());
    for (std::size_t m = 0; m < M; ++m) {
      out.coefficients.intercept(k, m) = report.refit.coefficients.intercept(0, m);
      for (std::size_t j = 0; j < p; ++j) out.coefficients.slope(k, m, j) = report.refit.coefficients.slope(0, m, j);
    }
  }
  out.selected.assign(chosen.begin(), chosen.end());
  return out;
}

inline void echo_data(const RunConfig& c, const LoadedData& loaded, Json& diagnostics) {
  if (c.echo_dir.empty()) return;
  std::filesystem::create_directories(c.echo_dir);
  Json written = Json::array();
  for (std::size_t k = 0; k < loaded.labels.size(); ++k) {
    const auto path = (std::filesystem::path(c.echo_dir) / (loaded.labels[k] + ".csv")).string();
    write_experiment_csv(path, loaded.data, k, c.response);
    written.push_back(path);
  }
  diagnostics["data_echo"] = written;
}

inline Json run_simulate(const RunConfig& c, Json& diagnostics) {
  auto scenario = SimScenario::preset(c.preset, c.sim_p, c.seed);
  if (c.sim_n) scenario.n = *c.sim_n;
  scenario.quantiles = QuantileGrid(c.quantiles);
  StudyConfig study;
  study.family = c.family;
  study.shape_a = c.shape_a;
  study.T_divisor = c.T_divisor;
  study.lambda_grid = c.lambda_grid;
  study.lambda_points = c.grid_points;
  study.lambda_ratio = c.grid_ratio;
  study.solver = solver_config(c);
  std::vector<Method> methods;
  for (const auto& m : c.methods) methods.push_back(Method::parse(m));
  const auto report = run_study(scenario, c.replications, methods, study);

  Json results;
  results["scenario"] = {{"name", scenario.name},
                         {"n", scenario.n},
                         {"p", scenario.p},
                         {"K", scenario.K},
                         {"quantiles", scenario.quantiles.levels()},
                         {"grouping", to_string(scenario.grouping)},
                         {"error_family", to_string(scenario.error_family)},
                         {"seed", scenario.seed}};
  results["T"] = report.T;
  results["replications"] = report.replications;
  results["replication_seeds"] = report.replication_seeds;
  Json methods_json = Json::array();
  for (const auto& s : report.methods) {
    Json reps = Json::array();
    for (std::size_t r = 0; r < s.replications.size(); ++r) {
      auto m = metrics_json(s.replications[r]);
      m["selected"] = s.selected[r];
      m["chosen_lambda"] = s.chosen_lambda[r];
      reps.push_back(m);
    }
    methods_json.push_back(
        {{"label", s.label}, {"mean", metrics_json(s.mean)}, {"sd", metrics_json(s.sd)}, {"per_replication", reps}});
  }
  results["methods"] = methods_json;
  diagnostics["note"] = "sd is the sample standard deviation over replications (0 for one replication)";
  return results;
}

inline Json run_split_study(const RunConfig& c, const LoadedData& loaded, const QuantileGrid& grid) {
  const auto& data = loaded.data;
  const std::size_t K = data.num_experiments();
  std::vector<std::size_t> n_train(K), n_valid(K);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t n = data.sample_size(k);
    std::size_t tr = c.train.value_or(n == 32 ? 24 : static_cast<std::size_t>(std::llround(0.75 * static_cast<double>(n))));
    std::size_t va = c.validate_size.value_or(n == 32 && !c.train ? 8 : n - std::min(tr, n));
    require(tr >= 2 && va >= 1 && tr + va <= n, ErrorCode::InvalidConfig,
            "experiment " + loaded.labels[k] + ": cannot split " + std::to_string(n) + " rows into " +
                std::to_string(tr) + " training and " + std::to_string(va) + " validation rows");
    n_train[k] = tr;
    n_valid[k] = va;
  }

  // Full-data model sizes.
  const auto di_full = train(c, data, grid);
  const auto ca_full = separate_analysis(c, data, grid);

  Rng rng(c.seed);
  std::vector<double> di_size, di_pe, ca_size, ca_pe;
  Json reps = Json::array();
  for (std::size_t r = 0; r < c.repetitions; ++r) {
    std::vector<Experiment> tr_ex, va_ex;
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t n = data.sample_size(k);
      std::vector<std::size_t> perm(n);
      for (std::size_t i = 0; i < n; ++i) perm[i] = i;
      for (std::size_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i + 1));
        std::swap(perm[i], perm[std::min(j, i)]);
      }
      std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train[k]));
      std::vector<std::size_t> b(perm.begin() + static_cast<std::ptrdiff_t>(n_train[k]),
                                 perm.begin() + static_cast<std::ptrdiff_t>(n_train[k] + n_valid[k]));
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      tr_ex.push_back(select_rows(data.experiment(k), a));
      va_ex.push_back(select_rows(data.experiment(k), b));
    }
    const auto tr_data = MultiExperimentDataset::validate(std::move(tr_ex), data.predictor_names());
    const auto va_data = MultiExperimentDataset::validate(std::move(va_ex), data.predictor_names());
    const auto di = train(c, tr_data, grid);
    const auto ca = separate_analysis(c, tr_data, grid);
    di_size.push_back(static_cast<double>(active_set(di.fit.coefficients).size()));
    di_pe.push_back(prediction_error(va_data, grid, di.fit.coefficients).total);
    ca_size.push_back(static_cast<double>(ca.selected.size()));
    ca_pe.push_back(prediction_error(va_data, grid, ca.coefficients).total);
    reps.push_back({{"DI", {{"model_size", di_size.back()}, {"prediction_error", di_pe.back()}}},
                    {"CA", {{"model_size", ca_size.back()}, {"prediction_error", ca_pe.back()}}}});
  }
  const auto di_sel = active_set(di_full.fit.coefficients);
  Json methods = Json::array();
  methods.push_back({{"label", "DI"},
                     {"full_data_model_size", di_sel.size()},
                     {"full_data_selected", names_of(di_sel, data.predictor_names())},
                     {"model_size", mean_sd_json(di_size)},
                     {"prediction_error", mean_sd_json(di_pe)}});
  methods.push_back({{"label", "CA"},
                     {"full_data_model_size", ca_full.selected.size()},
                     {"full_data_selected", names_of(ca_full.selected, data.predictor_names())},
                     {"model_size", mean_sd_json(ca_size)},
                     {"prediction_error", mean_sd_json(ca_pe)}});
  return {{"train_sizes", n_train},
          {"validate_sizes", n_valid},
          {"repetitions", c.repetitions},
          {"penalty_family", to_string(c.family)},
          {"methods", methods},
          {"per_repetition", reps}};
}

}  // namespace detail

/// Executes one run and returns the report document
/// {config, results, diagnostics, version}.
inline Json run(const RunConfig& c) {
  c.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Json results = Json::object();
  Json diagnostics = Json::object();
  Json timings = Json::object();

  if (c.mode == RunMode::simulate) {
    results = detail::run_simulate(c, diagnostics);
  } else {
    const auto t_load = std::chrono::steady_clock::now();
    const auto loaded = detail::load_data(c);
    timings["ingest_seconds"] = detail::seconds_since(t_load);
    const auto& data = loaded.data;
    const QuantileGrid grid(c.quantiles);
    if (!c.weights.empty()) c.penalty(0.0).validate(data.num_experiments());
    results["experiments"] = loaded.labels;
    results["sample_sizes"] = Json::array();
    for (std::size_t k = 0; k < data.num_experiments(); ++k) results["sample_sizes"].push_back(data.sample_size(k));
    results["num_predictors"] = data.num_predictors();
    if (!loaded.screening.is_null()) results["screening"] = loaded.screening;
    detail::echo_data(c, loaded, diagnostics);

    const auto t_fit = std::chrono::steady_clock::now();
    if (c.mode == RunMode::fit || c.mode == RunMode::select || c.mode == RunMode::predict) {
      const auto trained = detail::train(c, data, grid);
      results["fit"] = detail::fit_json(trained.fit, trained.penalty, data, grid, loaded.labels);
      if (trained.selection) results["selection"] = detail::selection_json(*trained.selection, data, detail::mqbic_config(c, data));
      diagnostics["objective_history"] = trained.fit.objective_history;
      diagnostics["converged"] = trained.fit.converged;
      if (c.mode == RunMode::predict) {
        std::vector<std::string> paths;
        for (const auto& [label, path] : c.holdout) paths.push_back(path);
        const auto holdout = ingest_csv(paths, c.response, data.predictor_names());
        const auto err = prediction_error(holdout, grid, trained.fit.coefficients);
        Json preds = Json::array();
        for (std::size_t k = 0; k < holdout.num_experiments(); ++k) {
          Json per = Json::array();
          for (std::size_t m = 0; m < grid.size(); ++m) {
            const Eigen::VectorXd yhat = predict(trained.fit.coefficients, holdout.experiment(k).design, k, m);
            per.push_back({{"tau", grid[m]}, {"values", std::vector<double>(yhat.data(), yhat.data() + yhat.size())}});
          }
          preds.push_back({{"experiment", loaded.labels[k]}, {"quantiles", per}});
        }
        Json per_exp = Json::object();
        for (std::size_t k = 0; k < holdout.num_experiments(); ++k) per_exp[loaded.labels[k]] = err.per_experiment[k];
        results["prediction_error"] = {{"per_experiment", per_exp}, {"total", err.total}};
        results["predictions"] = preds;
      }
    } else {
      results = {{"experiments", results["experiments"]},
                 {"sample_sizes", results["sample_sizes"]},
                 {"num_predictors", results["num_predictors"]},
                 {"split_study", detail::run_split_study(c, loaded, grid)}};
      if (!loaded.screening.is_null()) results["screening"] = loaded.screening;
    }
    timings["fit_seconds"] = detail::seconds_since(t_fit);
  }
  timings["total_seconds"] = detail::seconds_since(t0);
  diagnostics["timings"] = timings;
  return {{"config", c.to_json()}, {"results", results}, {"diagnostics", diagnostics}, {"version", detail::version_json()}};
}

/// Machine-readable failure document.
inline Json error_report(const std::string& code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}, {"version", detail::version_json()}};
}

namespace detail {

inline bool write_document(const std::string& out, const Json& doc) {
  const auto text = doc.dump(2) + "\n";
  if (out == "-") {
    std::cout << text << std::flush;
    return static_cast<bool>(std::cout);
  }
  std::ofstream f(out, std::ios::binary);
  f << text;
  return static_cast<bool>(f);
}

}  // namespace detail

/// Whole-program entry: 0 on success, 2 on a reported error, 3 on an
/// unexpected failure. The report (or the error object) goes to --out.
inline int cli_main(int argc, const char* const* argv) {
  std::string out = "-";
  try {
    const auto settings = parse_command_line(argc, argv);
    if (const auto it = settings.find("out"); it != settings.end() && !it->second.empty()) out = it->second;
    const auto config = RunConfig::from_settings(settings);
    const auto report = run(config);
    if (!detail::write_document(config.out, report)) {
      std::cerr << "mqsel: cannot write report to '" << config.out << "'\n";
      return 2;
    }
    return 0;
  } catch (const CLI::CallForHelp&) {
    std::cout << "usage: mqsel_cli [--config file.json] --mode fit|select|simulate|predict|split-study\n"
                 "                  --data.<k>=file.csv ... [--holdout.<k>=file.csv ...] [--<dotted.key>=value ...]\n"
                 "keys:";
    for (const auto& key : known_setting_keys()) std::cout << " " << key;
    std::cout << "\n";
    return 0;
  } catch (const Error& e) {
    const auto doc = error_report(std::string(to_string(e.code())), e.what());
    std::cerr << "mqsel: " << e.what() << "\n";
    if (!detail::write_document(out, doc)) std::cerr << doc.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    const auto doc = error_report("InternalError", e.what());
    std::cerr << "mqsel: " << e.what() << "\n";
    if (!detail::write_document(out, doc)) std::cerr << doc.dump() << "\n";
    return 3;
  }
}

}  // namespace mqsel
