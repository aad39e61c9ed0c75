#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mqsel/error.hpp"
#include "mqsel/model.hpp"
#include "mqsel/selection.hpp"
#include "mqsel/solver.hpp"

namespace mqsel {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed of replication `index` derived from a scenario seed.
inline std::uint64_t replication_seed(std::uint64_t scenario_seed, std::uint64_t index) noexcept {
  return splitmix64(scenario_seed ^ splitmix64(index + 1));
}

/// mt19937_64 seeded through splitmix64, with uniforms built from the top 53
/// bits and normals from the Marsaglia polar method so that draws do not
/// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (spare_) {
      const double v = *spare_;
      spare_.reset();
      return v;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    return u * f;
  }

  double chi_square(int dof) {
    double total = 0.0;
    for (int i = 0; i < dof; ++i) {
      const double z = normal();
      total += z * z;
    }
    return total;
  }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

enum class Grouping { complete, incomplete };
enum class ErrorFamily { normal, t3 };

inline std::string to_string(Grouping g) { return g == Grouping::complete ? "complete" : "incomplete"; }
inline std::string to_string(ErrorFamily f) { return f == ErrorFamily::normal ? "normal" : "t3"; }

/// Heteroscedastic multi-experiment design:
///   X'_ki ~ N(0, Sigma_X) with (Sigma_X)_ij = ar_rho^|i-j|,
///   X_ki,h = Phi(X'_ki,h) for the hetero column h of experiment k,
///   Y_ki = X_ki . alpha_k + hetero_scale * xi_ki * X_ki,h,
/// where (xi_1i, ..., xi_Ki) is normal or multivariate t_3 with unit
/// diagonal and error_cross_corr off the diagonal (scale matrix for t_3).
/// Indices are 0-based.
struct SimScenario {
  std::string name = "custom";
  std::size_t n = 100;
  std::size_t p = 100;
  std::size_t K = 2;
  QuantileGrid quantiles = QuantileGrid::equally_spaced(6);
  Grouping grouping = Grouping::complete;
  ErrorFamily error_family = ErrorFamily::normal;
  double error_cross_corr = 0.7;
  double ar_rho = 0.5;
  std::vector<std::pair<std::size_t, std::size_t>> nonzero_spec;
  double coef_low = 0.05;
  double coef_high = 1.0;
  std::vector<std::size_t> hetero_column;
  double hetero_scale = 0.7;
  std::uint64_t seed = 1;

  Eigen::MatrixXd error_scale_matrix() const {
    const auto k = static_cast<Eigen::Index>(K);
    Eigen::MatrixXd s = Eigen::MatrixXd::Constant(k, k, error_cross_corr);
    s.diagonal().setOnes();
    return s;
  }

  void validate() const {
    using detail::require;
    const auto bad = ErrorCode::InvalidScenario;
    require(n >= 2 && p >= 1 && K >= 1, bad, "need n >= 2, p >= 1, K >= 1");
    require(ar_rho >= 0.0 && ar_rho < 1.0, bad, "ar_rho must lie in [0,1)");
    require(std::abs(error_cross_corr) < 1.0, bad, "|error_cross_corr| must be < 1");
    require(coef_low <= coef_high, bad, "coef_low must not exceed coef_high");
    require(hetero_column.size() == K, bad, "one hetero column per experiment is required");
    for (auto h : hetero_column) require(h < p, bad, "hetero column out of range");
    for (const auto& [k, j] : nonzero_spec) require(k < K && j < p, bad, "nonzero slot out of range");
    require(Eigen::LLT<Eigen::MatrixXd>(error_scale_matrix()).info() == Eigen::Success, bad,
            "error correlation matrix is not positive definite");
  }

  /// Complete grouping: predictors 1, 6, 12, 15, 20 (1-based) active in both
  /// experiments; predictor 3 drives the heteroscedasticity.
  static SimScenario table1(std::size_t p = 100, std::uint64_t seed = 1) {
    SimScenario s;
    s.name = "table1";
    s.p = p;
    s.grouping = Grouping::complete;
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t j : {1, 6, 12, 15, 20}) s.nonzero_spec.emplace_back(k, j - 1);
    s.hetero_column = {2, 2};
    s.seed = seed;
    return s;
  }

  /// Incomplete grouping: experiment 1 active at 4, 6, 9, 12, 15, 20 with
  /// hetero column 1; experiment 2 active at 1, 6, 12, 15, 20, 25 with hetero
  /// column 3 (1-based).
  static SimScenario table2(std::size_t p = 100, std::uint64_t seed = 1) {
    SimScenario s;
    s.name = "table2";
    s.p = p;
    s.grouping = Grouping::incomplete;
    for (std::size_t j : {4, 6, 9, 12, 15, 20}) s.nonzero_spec.emplace_back(0, j - 1);
    for (std::size_t j : {1, 6, 12, 15, 20, 25}) s.nonzero_spec.emplace_back(1, j - 1);
    s.hetero_column = {0, 2};
    s.seed = seed;
    return s;
  }

  /// table2 with bivariate t_3 errors.
  static SimScenario table3(std::size_t p = 100, std::uint64_t seed = 1) {
    auto s = table2(p, seed);
    s.name = "table3";
    s.error_family = ErrorFamily::t3;
    return s;
  }

  static SimScenario preset(const std::string& name, std::size_t p = 100, std::uint64_t seed = 1) {
    if (name == "table1") return table1(p, seed);
    if (name == "table2") return table2(p, seed);
    if (name == "table3") return table3(p, seed);
    detail::fail(ErrorCode::InvalidScenario, "unknown preset '" + name + "'");
  }
};

struct GeneratedData {
  MultiExperimentDataset data;
  /// Mean-model slopes alpha, K x p.
  Eigen::MatrixXd mean_slopes;
  /// Conditional-quantile slopes at every level of the scenario grid.
  CoefficientTensor truth;
  std::vector<std::size_t> true_active;
  /// Covariates before the Phi transform, one n x p matrix per experiment.
  std::vector<Eigen::MatrixXd> latent;
  /// Error draws, n x K.
  Eigen::MatrixXd errors;
};

/// Quantile function of one error margin.
inline double error_quantile(ErrorFamily family, double tau) {
  if (family == ErrorFamily::normal) return boost::math::quantile(boost::math::normal_distribution<double>(), tau);
  return boost::math::quantile(boost::math::students_t_distribution<double>(3.0), tau);
}

/// Slopes of the conditional tau-quantile: alpha_k plus hetero_scale * F^{-1}(tau)
/// in the hetero column (the column is positive, so the error shifts it).
inline CoefficientTensor true_quantile_coefficients(const SimScenario& s, const Eigen::MatrixXd& alpha,
                                                    const QuantileGrid& grid) {
  CoefficientTensor t(s.K, grid.size(), s.p);
  for (std::size_t k = 0; k < s.K; ++k) {
    for (std::size_t m = 0; m < grid.size(); ++m) {
      for (std::size_t j = 0; j < s.p; ++j) t.slope(k, m, j) = alpha(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
      t.slope(k, m, s.hetero_column[k]) += s.hetero_scale * error_quantile(s.error_family, grid[m]);
    }
  }
  return t;
}

inline GeneratedData generate(const SimScenario& s) {
  s.validate();
  Rng rng(s.seed);
  const auto n = static_cast<Eigen::Index>(s.n);
  const auto p = static_cast<Eigen::Index>(s.p);
  const auto K = static_cast<Eigen::Index>(s.K);

  Eigen::MatrixXd alpha = Eigen::MatrixXd::Zero(K, p);
  for (const auto& [k, j] : s.nonzero_spec) {
    alpha(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = rng.uniform(s.coef_low, s.coef_high);
  }

  const double innovation = std::sqrt(1.0 - s.ar_rho * s.ar_rho);
  std::vector<Eigen::MatrixXd> latent;
  for (Eigen::Index k = 0; k < K; ++k) {
    Eigen::MatrixXd X(n, p);
    for (Eigen::Index i = 0; i < n; ++i) {
      X(i, 0) = rng.normal();
      for (Eigen::Index j = 1; j < p; ++j) X(i, j) = s.ar_rho * X(i, j - 1) + innovation * rng.normal();
    }
    latent.push_back(std::move(X));
  }

  const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(s.error_scale_matrix()).matrixL();
  Eigen::MatrixXd errors(n, K);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd z(K);
    for (Eigen::Index k = 0; k < K; ++k) z(k) = rng.normal();
    Eigen::VectorXd xi = chol * z;
    if (s.error_family == ErrorFamily::t3) xi *= std::sqrt(3.0 / rng.chi_square(3));
    errors.row(i) = xi.transpose();
  }

  std::vector<Experiment> experiments;
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto h = static_cast<Eigen::Index>(s.hetero_column[static_cast<std::size_t>(k)]);
    Experiment e{Eigen::VectorXd(n), latent[static_cast<std::size_t>(k)]};
    for (Eigen::Index i = 0; i < n; ++i) e.design(i, h) = standard_normal_cdf(e.design(i, h));
    e.response = e.design * alpha.row(k).transpose();
    e.response.array() += s.hetero_scale * errors.col(k).array() * e.design.col(h).array();
    experiments.push_back(std::move(e));
  }

  auto truth = true_quantile_coefficients(s, alpha, s.quantiles);
  auto active = active_set(truth, 0.0);
  return GeneratedData{MultiExperimentDataset::validate(std::move(experiments)), std::move(alpha), std::move(truth),
                       std::move(active), std::move(latent), std::move(errors)};
}

struct Metrics {
  double psr = 0.0;
  double fdr = 0.0;
  double ae = 0.0;
};

/// PSR = |A_hat & A| / |A|, FDR = |A_hat & A^c| / |A^c|, AE = (KM)^{-1} ||theta_hat - theta*||_1 (slopes).
inline Metrics psr_fdr_ae(const std::vector<std::size_t>& true_active, const std::vector<std::size_t>& est_active,
                          const CoefficientTensor& true_coefs, const CoefficientTensor& est_coefs, std::size_t p) {
  using detail::require;
  const std::set<std::size_t> truth(true_active.begin(), true_active.end());
  const std::set<std::size_t> est(est_active.begin(), est_active.end());
  for (auto j : truth) require(j < p, ErrorCode::IndexOutOfRange, "true active index out of range");
  for (auto j : est) require(j < p, ErrorCode::IndexOutOfRange, "estimated active index out of range");
  require(!truth.empty(), ErrorCode::DegenerateDenominator, "true active set is empty");
  require(truth.size() < p, ErrorCode::DegenerateDenominator, "true inactive set is empty");
  require(true_coefs.same_shape(est_coefs) && true_coefs.num_predictors() == p, ErrorCode::DimensionMismatch,
          "coefficient tensors differ in shape");
  std::size_t hits = 0;
  std::size_t false_hits = 0;
  for (auto j : est) (truth.count(j) ? hits : false_hits)++;
  Metrics out;
  out.psr = static_cast<double>(hits) / static_cast<double>(truth.size());
  out.fdr = static_cast<double>(false_hits) / static_cast<double>(p - truth.size());
  double l1 = 0.0;
  for (std::size_t i = 0; i < true_coefs.slopes().size(); ++i) l1 += std::abs(true_coefs.slopes()[i] - est_coefs.slopes()[i]);
  out.ae = l1 / static_cast<double>(true_coefs.num_experiments() * true_coefs.num_quantiles());
  return out;
}

struct Method {
  enum class Kind { data_integration, combined_analysis };
  Kind kind = Kind::data_integration;
  double tau = 0.5;
  std::string label = "DI";

  static Method di() { return {}; }
  static Method ca(double tau, std::string label) { return {Kind::combined_analysis, tau, std::move(label)}; }

  /// "DI", or "CA-a/b" / "CA-(a/b)" / "CA-0.5".
  static Method parse(std::string text) {
    if (text == "DI") return di();
    detail::require(text.rfind("CA-", 0) == 0, ErrorCode::InvalidConfig, "unknown method '" + text + "'");
    std::string body = text.substr(3);
    if (!body.empty() && body.front() == '(' && body.back() == ')') body = body.substr(1, body.size() - 2);
    double tau = 0.0;
    try {
      const auto slash = body.find('/');
      if (slash == std::string::npos) {
        tau = std::stod(body);
      } else {
        tau = std::stod(body.substr(0, slash)) / std::stod(body.substr(slash + 1));
      }
    } catch (const std::exception&) {
      detail::fail(ErrorCode::InvalidConfig, "cannot parse quantile in method '" + text + "'");
    }
    detail::require(tau > 0.0 && tau < 1.0, ErrorCode::InvalidConfig, "method quantile outside (0,1)");
    return ca(tau, "CA-(" + body + ")");
  }
};

struct StudyConfig {
  PenaltyFamily family = PenaltyFamily::scad;
  std::optional<double> shape_a;
  double T_divisor = 3.0;
  /// Explicit lambda grid; when empty each fit uses its default geometric grid.
  std::vector<double> lambda_grid;
  std::size_t lambda_points = 50;
  double lambda_ratio = 1e-3;
  SolverConfig solver;

  PenaltySpec base_penalty() const { return {family, 0.0, shape_a.value_or(default_shape(family)), {}}; }
};

struct MethodSummary {
  std::string label;
  std::vector<Metrics> replications;
  std::vector<std::vector<std::size_t>> selected;
  std::vector<double> chosen_lambda;
  Metrics mean;
  Metrics sd;
};

struct StudyReport {
  std::string scenario;
  std::uint64_t seed = 0;
  std::size_t replications = 0;
  double T = 0.0;
  std::vector<std::uint64_t> replication_seeds;
  std::vector<MethodSummary> methods;
};

namespace detail {

inline void summarize(MethodSummary& s) {
  const auto r = static_cast<double>(s.replications.size());
  Metrics mean, var;
  for (const auto& m : s.replications) {
    mean.psr += m.psr / r;
    mean.fdr += m.fdr / r;
    mean.ae += m.ae / r;
  }
  if (s.replications.size() > 1) {
    for (const auto& m : s.replications) {
      var.psr += (m.psr - mean.psr) * (m.psr - mean.psr) / (r - 1);
      var.fdr += (m.fdr - mean.fdr) * (m.fdr - mean.fdr) / (r - 1);
      var.ae += (m.ae - mean.ae) * (m.ae - mean.ae) / (r - 1);
    }
  }
  s.mean = mean;
  s.sd = {std::sqrt(var.psr), std::sqrt(var.fdr), std::sqrt(var.ae)};
}

}  // namespace detail

/// Outcome of one method on one generated data set.
struct MethodOutcome {
  Metrics metrics;
  std::vector<std::size_t> selected;
  double chosen_lambda = 0.0;
};

inline MethodOutcome run_method(const Method& method, const SimScenario& scenario, const GeneratedData& gen,
                                const StudyConfig& config) {
  const auto& data = gen.data;
  MqbicConfig mq{default_T(scenario.p, config.T_divisor), scenario.p};
  const auto base = config.base_penalty();
  MethodOutcome out;
  if (method.kind == Method::Kind::data_integration) {
    auto grid = config.lambda_grid.empty()
                    ? default_lambda_grid(data, scenario.quantiles, {}, config.solver.standardize, config.lambda_points,
                                          config.lambda_ratio)
                    : config.lambda_grid;
    auto report = select_lambda(data, scenario.quantiles, base, std::move(grid), mq, config.solver);
    out.metrics = psr_fdr_ae(gen.true_active, report.selected_predictors, gen.truth, report.refit.coefficients, scenario.p);
    out.selected = report.selected_predictors;
    out.chosen_lambda = report.chosen_lambda.value_or(0.0);
  } else {
    const QuantileGrid single({method.tau});
    auto report = combined_analysis(data, method.tau, base, config.lambda_grid, mq, config.solver,
                                    config.lambda_points, config.lambda_ratio);
    const auto truth = true_quantile_coefficients(scenario, gen.mean_slopes, single);
    out.metrics = psr_fdr_ae(gen.true_active, report.selected_predictors, truth, report.coefficients, scenario.p);
    out.selected = report.selected_predictors;
    out.chosen_lambda = report.per_experiment.front().chosen_lambda.value_or(0.0);
  }
  return out;
}

/// Seeded Monte-Carlo study; replication r uses replication_seed(scenario.seed, r).
inline StudyReport run_study(const SimScenario& scenario, std::size_t replications, const std::vector<Method>& methods,
                             const StudyConfig& config = {}) {
  scenario.validate();
  detail::require(replications >= 1, ErrorCode::InvalidInput, "at least one replication is required");
  detail::require(!methods.empty(), ErrorCode::InvalidInput, "at least one method is required");
  StudyReport report;
  report.scenario = scenario.name;
  report.seed = scenario.seed;
  report.replications = replications;
  report.T = default_T(scenario.p, config.T_divisor);
  for (const auto& m : methods) report.methods.push_back(MethodSummary{m.label, {}, {}, {}, {}, {}});
  for (std::size_t r = 0; r < replications; ++r) {
    SimScenario rep = scenario;
    rep.seed = replication_seed(scenario.seed, r);
    report.replication_seeds.push_back(rep.seed);
    const auto gen = generate(rep);
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      MethodOutcome outcome;
      try {
        outcome = run_method(methods[mi], rep, gen, config);
      } catch (const Error& err) {
        throw Error(err.code(), std::string("replication ") + std::to_string(r) + ": " + err.what());
      }
      auto& summary = report.methods[mi];
      summary.replications.push_back(outcome.metrics);
      summary.selected.push_back(std::move(outcome.selected));
      summary.chosen_lambda.push_back(outcome.chosen_lambda);
    }
  }
  for (auto& s : report.methods) detail::summarize(s);
  return report;
}

}  // namespace mqsel
