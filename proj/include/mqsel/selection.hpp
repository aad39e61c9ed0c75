#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "mqsel/error.hpp"
#include "mqsel/loss.hpp"
#include "mqsel/model.hpp"
#include "mqsel/solver.hpp"

namespace mqsel {

struct MqbicConfig {
  /// Multiplier of the model-size term.
  double T = 1.0;
  /// Largest model size considered by subset search.
  std::size_t max_model_size = 1;

  void validate() const {
    detail::require(std::isfinite(T) && T > 0.0, ErrorCode::InvalidInput, "T must be positive");
    detail::require(max_model_size >= 1, ErrorCode::InvalidInput, "max model size must be >= 1");
  }

  /// floor(n / (4 log n)), at least 1.
  static std::size_t default_max_model_size(double n) {
    if (n <= 1.0) return 1;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(n / (4.0 * std::log(n)))));
  }
};

/// log(p) / divisor.
inline double default_T(std::size_t p, double divisor = 3.0) {
  detail::require(p >= 2 && divisor > 0.0 && std::isfinite(divisor), ErrorCode::InvalidInput,
                  "default_T needs p >= 2 and a positive divisor");
  return std::log(static_cast<double>(p)) / divisor;
}

/// log(loss_sum) + (2n)^{-1} |D| T log n, with both addends kept.
struct MqbicValue {
  double loss_sum = 0.0;
  double log_loss = 0.0;
  double size_term = 0.0;
  double value = 0.0;
  std::size_t model_size = 0;
};

inline MqbicValue mqbic_from_loss(double loss_sum, std::size_t model_size, double n, double T) {
  detail::require(std::isfinite(loss_sum) && loss_sum >= 0.0, ErrorCode::InvalidInput, "loss must be finite");
  detail::require(loss_sum > 0.0, ErrorCode::ZeroLoss, "pooled check loss is zero (exact interpolation)");
  MqbicValue v;
  v.loss_sum = loss_sum;
  v.model_size = model_size;
  v.log_loss = std::log(loss_sum);
  v.size_term = static_cast<double>(model_size) * T * std::log(n) / (2.0 * n);
  v.value = v.log_loss + v.size_term;
  return v;
}

/// Information criterion of a submodel: unpenalized per-(k, m) fits on the
/// support, pooled raw check loss, plus the size term.
inline MqbicValue mqbic(const MultiExperimentDataset& data, const QuantileGrid& grid,
                        const std::vector<std::size_t>& support, const MqbicConfig& config,
                        const SolverConfig& solver = {}, FitResult* fit_out = nullptr) {
  config.validate();
  std::set<std::size_t> unique(support.begin(), support.end());
  detail::require(unique.size() <= config.max_model_size, ErrorCode::SupportTooLarge,
                  "support of size " + std::to_string(unique.size()) + " exceeds the model size bound");
  auto fit = fit_unpenalized(data, grid, support, solver);
  const double loss = raw_check_sum(grid, fit.residuals, data.num_experiments());
  auto value = mqbic_from_loss(loss, unique.size(), data.average_sample_size(), config.T);
  if (fit_out) *fit_out = std::move(fit);
  return value;
}

struct Candidate {
  std::optional<double> lambda;
  std::vector<std::size_t> support;
  MqbicValue criterion;
  bool converged = true;
};

struct SelectionReport {
  std::optional<double> chosen_lambda;
  std::vector<std::size_t> selected_predictors;
  std::vector<Candidate> candidates;
  std::size_t chosen_index = 0;
  FitResult refit;
  /// Lambdas whose penalized fit interpolated the data exactly.
  std::vector<double> excluded_zero_loss;
};

namespace detail {

/// Strict ordering used to pick the winner: criterion, then model size, then lambda.
inline bool better_candidate(const Candidate& a, const Candidate& b) {
  const double scale = std::max(1.0, std::max(std::abs(a.criterion.value), std::abs(b.criterion.value)));
  if (std::abs(a.criterion.value - b.criterion.value) > 1e-12 * scale) return a.criterion.value < b.criterion.value;
  if (a.criterion.model_size != b.criterion.model_size) return a.criterion.model_size < b.criterion.model_size;
  return a.lambda.value_or(0.0) < b.lambda.value_or(0.0);
}

}  // namespace detail

/// Geometric grid of `points` values from lambda_max down to ratio * lambda_max.
inline std::vector<double> default_lambda_grid(const MultiExperimentDataset& data, const QuantileGrid& grid,
                                               std::span<const double> weights = {}, bool standardize = true,
                                               std::size_t points = 50, double ratio = 1e-3) {
  detail::require(points >= 1 && ratio > 0.0 && ratio < 1.0, ErrorCode::InvalidInput, "bad lambda grid parameters");
  const double top = lambda_max(data, grid, weights, standardize);
  std::vector<double> out;
  out.reserve(points);
  for (std::size_t i = 0; i < points; ++i) {
    const double frac = points == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(points - 1);
    out.push_back(top * std::pow(ratio, frac));
  }
  return out;
}

/// Penalized fits along `lambda_grid` (see fit_path), each scored
/// by the criterion evaluated at the penalized fit itself with D_lambda its
/// active set. The family, shape and experiment weights come from `base`.
inline SelectionReport select_lambda(const MultiExperimentDataset& data, const QuantileGrid& grid,
                                     const PenaltySpec& base, std::vector<double> lambda_grid,
                                     const MqbicConfig& config, const SolverConfig& solver = {}) {
  config.validate();
  detail::require(!lambda_grid.empty(), ErrorCode::EmptyGrid, "lambda grid is empty");
  for (double l : lambda_grid) {
    detail::require(std::isfinite(l) && l >= 0.0, ErrorCode::InvalidPenalty, "lambda values must be >= 0");
  }
  std::sort(lambda_grid.begin(), lambda_grid.end(), std::greater<>());
  lambda_grid.erase(std::unique(lambda_grid.begin(), lambda_grid.end()), lambda_grid.end());

  const double n = data.average_sample_size();
  SelectionReport report;
  auto fits = fit_path(data, grid, base, lambda_grid, solver);
  std::optional<Candidate> best;
  std::size_t best_fit = 0;
  for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
    const double lambda = lambda_grid[i];
    const auto& fit = fits[i];
    const double loss = raw_check_sum(grid, fit.residuals, data.num_experiments(), base.experiment_weights);
    if (!(loss > 0.0)) {
      report.excluded_zero_loss.push_back(lambda);
      continue;
    }
    Candidate c;
    c.lambda = lambda;
    c.support = active_set(fit.coefficients);
    c.criterion = mqbic_from_loss(loss, c.support.size(), n, config.T);
    c.converged = fit.converged;
    report.candidates.push_back(c);
    if (!best || detail::better_candidate(c, *best)) {
      best = c;
      best_fit = i;
      report.chosen_index = report.candidates.size() - 1;
    }
  }
  detail::require(best.has_value(), ErrorCode::ZeroLoss, "every lambda produced an exact interpolation");
  report.chosen_lambda = best->lambda;
  report.selected_predictors = best->support;
  report.refit = std::move(fits[best_fit]);
  return report;
}

/// Scores every candidate subset with the criterion (refitting unpenalized on
/// each) and returns the minimizer.
inline SelectionReport exhaustive_search(const MultiExperimentDataset& data, const QuantileGrid& grid,
                                         const std::vector<std::vector<std::size_t>>& candidates,
                                         const MqbicConfig& config, const SolverConfig& solver = {}) {
  config.validate();
  detail::require(!candidates.empty(), ErrorCode::CandidateListEmpty, "no candidate models");
  SelectionReport report;
  std::optional<Candidate> best;
  // Fitted coefficients by support; a candidate starts from the fit of its
  // support without the largest index when that was evaluated earlier.
  std::map<std::vector<std::size_t>, CoefficientTensor> fitted;
  for (const auto& raw : candidates) {
    std::vector<std::size_t> support(raw);
    std::sort(support.begin(), support.end());
    support.erase(std::unique(support.begin(), support.end()), support.end());
    Candidate c;
    c.support = support;
    FitResult fit;
    SolverConfig cfg = solver;
    if (!cfg.warm_start && !support.empty()) {
      const std::vector<std::size_t> parent(support.begin(), support.end() - 1);
      if (const auto it = fitted.find(parent); it != fitted.end()) cfg.warm_start = it->second;
    }
    c.criterion = mqbic(data, grid, support, config, cfg, &fit);
    c.converged = fit.converged;
    fitted.emplace(support, std::move(fit.coefficients));
    report.candidates.push_back(c);
    if (!best || detail::better_candidate(c, *best)) {
      best = c;
      report.chosen_index = report.candidates.size() - 1;
    }
  }
  report.selected_predictors = best->support;
  report.refit = fit_unpenalized(data, grid, best->support, solver);
  return report;
}

/// All subsets of {0..p-1} with at most max_size elements, by size then
/// lexicographically. Refuses to produce more than `limit` subsets.
inline std::vector<std::vector<std::size_t>> subsets_up_to(std::size_t p, std::size_t max_size,
                                                         std::size_t limit = 2'000'000) {
  max_size = std::min(max_size, p);
  double count = 0.0;
  double binom = 1.0;
  for (std::size_t s = 0; s <= max_size; ++s) {
    count += binom;
    binom = binom * static_cast<double>(p - s) / static_cast<double>(s + 1);
  }
  detail::require(count <= static_cast<double>(limit), ErrorCode::ProblemTooLarge, "too many candidate subsets");
  std::vector<std::vector<std::size_t>> out;
  out.reserve(static_cast<std::size_t>(count));
  out.emplace_back();
  for (std::size_t s = 1; s <= max_size; ++s) {
    std::vector<std::size_t> idx(s);
    for (std::size_t i = 0; i < s; ++i) idx[i] = i;
    while (true) {
      out.push_back(idx);
      std::size_t i = s;
      while (i > 0 && idx[i - 1] == p - s + i - 1) --i;
      if (i == 0) break;
      ++idx[i - 1];
      for (std::size_t t = i; t < s; ++t) idx[t] = idx[t - 1] + 1;
    }
  }
  return out;
}

/// Every subset of {0..p-1}; only for p <= 15.
inline std::vector<std::vector<std::size_t>> all_subsets(std::size_t p) {
  detail::require(p <= 15, ErrorCode::ProblemTooLarge, "full subset enumeration is limited to p <= 15");
  return subsets_up_to(p, p);
}

struct CombinedReport {
  /// Union of the per-experiment selections.
  std::vector<std::size_t> selected_predictors;
  std::vector<SelectionReport> per_experiment;
  /// K x 1 x p tensor assembled from the per-experiment fits.
  CoefficientTensor coefficients;
};

/// Single-quantile analysis of each experiment on its own, tuned by the
/// criterion with K = M = 1, followed by the union of the selected sets. An
/// empty `lambda_grid` means the default grid of each experiment.
inline CombinedReport combined_analysis(const MultiExperimentDataset& data, double tau, const PenaltySpec& base,
                                        const std::vector<double>& lambda_grid, const MqbicConfig& config,
                                        const SolverConfig& solver = {}, std::size_t grid_points = 50,
                                        double grid_ratio = 1e-3) {
  const QuantileGrid single({tau});
  const std::size_t K = data.num_experiments();
  CombinedReport out;
  out.coefficients = CoefficientTensor(K, 1, data.num_predictors());
  std::set<std::size_t> chosen;
  for (std::size_t k = 0; k < K; ++k) {
    const auto sub = data.select_experiments({k});
    PenaltySpec pen = base;
    pen.experiment_weights.clear();
    auto grid = lambda_grid.empty() ? default_lambda_grid(sub, single, {}, solver.standardize, grid_points, grid_ratio)
                                    : lambda_grid;
    auto report = select_lambda(sub, single, pen, std::move(grid), config, solver);
    chosen.insert(report.selected_predictors.begin(), report.selected_predictors.end());
    out.coefficients.intercept(k, 0) = report.refit.coefficients.intercept(0, 0);
    for (std::size_t j = 0; j < data.num_predictors(); ++j) {
      out.coefficients.slope(k, 0, j) = report.refit.coefficients.slope(0, 0, j);
    }
    out.per_experiment.push_back(std::move(report));
  }
  out.selected_predictors.assign(chosen.begin(), chosen.end());
  return out;
}

}  // namespace mqsel
