#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mqsel/error.hpp"

namespace mqsel {

/// One experiment: responses of length n_k and an n_k x p design.
struct Experiment {
  Eigen::VectorXd response;
  Eigen::MatrixXd design;

  bool operator==(const Experiment& other) const {
    return response.size() == other.response.size() && design.rows() == other.design.rows() &&
           design.cols() == other.design.cols() && response == other.response && design == other.design;
  }
};

/// K experiments measured on a shared predictor set. Sample sizes may differ.
/// Only constructible through validate(), so every instance satisfies the
/// shape and finiteness invariants.
class MultiExperimentDataset {
 public:
  static MultiExperimentDataset validate(std::vector<Experiment> experiments,
                                         std::vector<std::string> predictor_names = {}) {
    using detail::require;
    require(!experiments.empty(), ErrorCode::EmptyInput, "at least one experiment is required");
    const auto p = experiments.front().design.cols();
    for (std::size_t k = 0; k < experiments.size(); ++k) {
      const auto& e = experiments[k];
      const std::string where = "experiment " + std::to_string(k);
      require(e.design.cols() == p, ErrorCode::DimensionMismatch,
              where + " has " + std::to_string(e.design.cols()) + " predictors, expected " + std::to_string(p));
      require(e.design.rows() == e.response.size(), ErrorCode::DimensionMismatch,
              where + ": design has " + std::to_string(e.design.rows()) + " rows but " +
                  std::to_string(e.response.size()) + " responses");
      require(e.response.size() > 0, ErrorCode::EmptyInput, where + " has no observations");
      require(e.response.allFinite(), ErrorCode::NonFiniteValue, where + ": non-finite response");
      require(e.design.allFinite(), ErrorCode::NonFiniteValue, where + ": non-finite design entry");
    }
    if (predictor_names.empty()) {
      predictor_names.reserve(static_cast<std::size_t>(p));
      for (Eigen::Index j = 0; j < p; ++j) predictor_names.push_back("x" + std::to_string(j + 1));
    }
    require(predictor_names.size() == static_cast<std::size_t>(p), ErrorCode::DimensionMismatch,
            "predictor name count does not match design width");
    return MultiExperimentDataset(std::move(experiments), std::move(predictor_names));
  }

  std::size_t num_experiments() const noexcept { return experiments_.size(); }
  std::size_t num_predictors() const noexcept { return names_.size(); }
  std::size_t sample_size(std::size_t k) const { return static_cast<std::size_t>(experiments_.at(k).response.size()); }
  std::size_t total_observations() const noexcept {
    std::size_t total = 0;
    for (const auto& e : experiments_) total += static_cast<std::size_t>(e.response.size());
    return total;
  }
  /// Per-experiment sample size used by the information criterion; the mean
  /// over experiments, which is n itself when all experiments have n rows.
  double average_sample_size() const noexcept {
    return static_cast<double>(total_observations()) / static_cast<double>(experiments_.size());
  }

  const Experiment& experiment(std::size_t k) const { return experiments_.at(k); }
  const std::vector<Experiment>& experiments() const noexcept { return experiments_; }
  const std::vector<std::string>& predictor_names() const noexcept { return names_; }

  MultiExperimentDataset select_experiments(const std::vector<std::size_t>& keep) const {
    std::vector<Experiment> out;
    out.reserve(keep.size());
    for (auto k : keep) {
      detail::require(k < experiments_.size(), ErrorCode::IndexOutOfRange, "experiment index out of range");
      out.push_back(experiments_[k]);
    }
    return validate(std::move(out), names_);
  }

  bool operator==(const MultiExperimentDataset& other) const {
    return names_ == other.names_ && experiments_ == other.experiments_;
  }

 private:
  MultiExperimentDataset(std::vector<Experiment> experiments, std::vector<std::string> names)
      : experiments_(std::move(experiments)), names_(std::move(names)) {}

  std::vector<Experiment> experiments_;
  std::vector<std::string> names_;
};

/// Strictly increasing quantile levels in (0, 1).
class QuantileGrid {
 public:
  explicit QuantileGrid(std::vector<double> levels) : levels_(std::move(levels)) {
    detail::require(!levels_.empty(), ErrorCode::EmptyInput, "quantile grid is empty");
    for (std::size_t m = 0; m < levels_.size(); ++m) {
      const double tau = levels_[m];
      detail::require(std::isfinite(tau) && tau > 0.0 && tau < 1.0, ErrorCode::InvalidQuantile,
                      "quantile level " + std::to_string(tau) + " outside (0,1)");
      if (m > 0) {
        detail::require(tau > levels_[m - 1], ErrorCode::InvalidQuantile, "quantile levels must be strictly increasing");
      }
    }
  }

  /// tau_m = m / denominator for m = 1..denominator-1.
  static QuantileGrid equally_spaced(int denominator) {
    detail::require(denominator >= 2, ErrorCode::InvalidInput, "denominator must be at least 2");
    std::vector<double> levels;
    for (int m = 1; m < denominator; ++m) levels.push_back(static_cast<double>(m) / denominator);
    return QuantileGrid(std::move(levels));
  }

  std::size_t size() const noexcept { return levels_.size(); }
  double operator[](std::size_t m) const { return levels_.at(m); }
  const std::vector<double>& levels() const noexcept { return levels_; }
  bool operator==(const QuantileGrid& other) const = default;

 private:
  std::vector<double> levels_;
};

/// Slopes indexed (experiment k, quantile m, predictor j) plus one free
/// intercept per (k, m). Group j is the KM-vector of slopes for predictor j.
class CoefficientTensor {
 public:
  CoefficientTensor() = default;
  CoefficientTensor(std::size_t experiments, std::size_t quantiles, std::size_t predictors)
      : K_(experiments),
        M_(quantiles),
        p_(predictors),
        slopes_(experiments * quantiles * predictors, 0.0),
        intercepts_(experiments * quantiles, 0.0) {}

  std::size_t num_experiments() const noexcept { return K_; }
  std::size_t num_quantiles() const noexcept { return M_; }
  std::size_t num_predictors() const noexcept { return p_; }

  double& slope(std::size_t k, std::size_t m, std::size_t j) { return slopes_[index(k, m, j)]; }
  double slope(std::size_t k, std::size_t m, std::size_t j) const { return slopes_[index(k, m, j)]; }
  double& intercept(std::size_t k, std::size_t m) { return intercepts_[block(k, m)]; }
  double intercept(std::size_t k, std::size_t m) const { return intercepts_[block(k, m)]; }

  /// Sum over (k, m) of |slope(k, m, j)|.
  double group_l1(std::size_t j) const {
    double total = 0.0;
    for (std::size_t b = 0; b < K_ * M_; ++b) total += std::abs(slopes_[b * p_ + j]);
    return total;
  }

  const std::vector<double>& slopes() const noexcept { return slopes_; }
  const std::vector<double>& intercepts() const noexcept { return intercepts_; }

  bool same_shape(const CoefficientTensor& other) const noexcept {
    return K_ == other.K_ && M_ == other.M_ && p_ == other.p_;
  }
  bool operator==(const CoefficientTensor& other) const = default;

 private:
  std::size_t block(std::size_t k, std::size_t m) const {
    detail::require(k < K_ && m < M_, ErrorCode::IndexOutOfRange, "coefficient block index out of range");
    return k * M_ + m;
  }
  std::size_t index(std::size_t k, std::size_t m, std::size_t j) const {
    detail::require(j < p_, ErrorCode::IndexOutOfRange, "predictor index out of range");
    return block(k, m) * p_ + j;
  }

  std::size_t K_ = 0;
  std::size_t M_ = 0;
  std::size_t p_ = 0;
  std::vector<double> slopes_;
  std::vector<double> intercepts_;
};

enum class PenaltyFamily { none, scad, mcp };

inline std::string to_string(PenaltyFamily family) {
  switch (family) {
    case PenaltyFamily::none: return "none";
    case PenaltyFamily::scad: return "scad";
    case PenaltyFamily::mcp: return "mcp";
  }
  return "none";
}

inline PenaltyFamily parse_penalty_family(const std::string& name) {
  if (name == "none") return PenaltyFamily::none;
  if (name == "scad" || name == "SCAD") return PenaltyFamily::scad;
  if (name == "mcp" || name == "MCP") return PenaltyFamily::mcp;
  detail::fail(ErrorCode::InvalidPenalty, "unknown penalty family '" + name + "'");
}

inline double default_shape(PenaltyFamily family) noexcept {
  return family == PenaltyFamily::mcp ? 3.0 : 3.7;
}

struct PenaltySpec {
  PenaltyFamily family = PenaltyFamily::scad;
  double lambda = 0.0;
  double shape_a = 3.7;
  /// Empty means every experiment has weight 1.
  std::vector<double> experiment_weights;

  static PenaltySpec none() { return {PenaltyFamily::none, 0.0, 3.7, {}}; }
  static PenaltySpec scad(double lambda, double a = 3.7) { return {PenaltyFamily::scad, lambda, a, {}}; }
  static PenaltySpec mcp(double lambda, double a = 3.0) { return {PenaltyFamily::mcp, lambda, a, {}}; }

  double weight(std::size_t k) const { return experiment_weights.empty() ? 1.0 : experiment_weights.at(k); }

  void validate(std::size_t experiments) const {
    using detail::require;
    require(std::isfinite(lambda) && lambda >= 0.0, ErrorCode::InvalidPenalty, "lambda must be finite and >= 0");
    if (family == PenaltyFamily::scad) require(shape_a > 2.0, ErrorCode::InvalidPenalty, "SCAD requires a > 2");
    if (family == PenaltyFamily::mcp) require(shape_a > 1.0, ErrorCode::InvalidPenalty, "MCP requires a > 1");
    if (!experiment_weights.empty()) {
      require(experiment_weights.size() == experiments, ErrorCode::DimensionMismatch,
              "one weight per experiment is required");
      bool any_positive = false;
      for (double w : experiment_weights) {
        require(std::isfinite(w) && w >= 0.0, ErrorCode::InvalidPenalty, "experiment weights must be >= 0");
        any_positive = any_positive || w > 0.0;
      }
      require(any_positive, ErrorCode::InvalidPenalty, "experiment weights must not all be zero");
    }
  }
};

struct FitResult {
  /// Coefficients on the scale of the input data.
  CoefficientTensor coefficients;
  /// Penalized objective evaluated at `coefficients` on the input data.
  double objective_value = 0.0;
  /// residuals[k * M + m][i] = Y_ki - intercept(k,m) - X_ki . slopes(k,m,.)
  std::vector<Eigen::VectorXd> residuals;
  int iterations = 0;
  bool converged = false;
  /// Objective of the working (possibly standardized) problem after each outer step.
  std::vector<double> objective_history;
  /// Set when the fit ran on standardized covariates.
  std::optional<CoefficientTensor> standardized_coefficients;
  double working_objective = 0.0;

  double residual(std::size_t k, std::size_t m, std::size_t i) const {
    return residuals.at(k * coefficients.num_quantiles() + m)(static_cast<Eigen::Index>(i));
  }
};

inline constexpr double kActiveTolerance = 1e-8;

/// Predictors whose group L1 norm exceeds tol. Intercepts never count.
inline std::vector<std::size_t> active_set(const CoefficientTensor& coefs, double tol = kActiveTolerance) {
  std::vector<std::size_t> active;
  for (std::size_t j = 0; j < coefs.num_predictors(); ++j) {
    if (coefs.group_l1(j) > tol) active.push_back(j);
  }
  return active;
}

namespace detail {

inline void check_shapes(const MultiExperimentDataset& data, const QuantileGrid& grid, const CoefficientTensor& coefs) {
  require(coefs.num_experiments() == data.num_experiments() && coefs.num_quantiles() == grid.size() &&
              coefs.num_predictors() == data.num_predictors(),
          ErrorCode::DimensionMismatch, "coefficient tensor does not match dataset and quantile grid");
}

inline Eigen::VectorXd slope_vector(const CoefficientTensor& coefs, std::size_t k, std::size_t m) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(coefs.num_predictors()));
  for (std::size_t j = 0; j < coefs.num_predictors(); ++j) v(static_cast<Eigen::Index>(j)) = coefs.slope(k, m, j);
  return v;
}

}  // namespace detail

inline std::vector<Eigen::VectorXd> compute_residuals(const MultiExperimentDataset& data, const QuantileGrid& grid,
                                                      const CoefficientTensor& coefs) {
  detail::check_shapes(data, grid, coefs);
  std::vector<Eigen::VectorXd> out;
  out.reserve(data.num_experiments() * grid.size());
  for (std::size_t k = 0; k < data.num_experiments(); ++k) {
    const auto& e = data.experiment(k);
    for (std::size_t m = 0; m < grid.size(); ++m) {
      Eigen::VectorXd r = e.response - e.design * detail::slope_vector(coefs, k, m);
      r.array() -= coefs.intercept(k, m);
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace mqsel
