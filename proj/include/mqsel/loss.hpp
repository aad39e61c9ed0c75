#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "mqsel/error.hpp"
#include "mqsel/model.hpp"

namespace mqsel {

/// Check (pinball) function rho_tau(x) = x (tau - 1{x < 0}).
inline double check(double tau, double x) {
  detail::require(tau > 0.0 && tau < 1.0, ErrorCode::InvalidQuantile, "tau must lie in (0,1)");
  return x < 0.0 ? x * (tau - 1.0) : x * tau;
}

namespace detail {

inline double check_unchecked(double tau, double x) noexcept { return x < 0.0 ? x * (tau - 1.0) : x * tau; }

inline double check_sum(double tau, const Eigen::VectorXd& residuals) noexcept {
  double total = 0.0;
  for (Eigen::Index i = 0; i < residuals.size(); ++i) total += check_unchecked(tau, residuals(i));
  return total;
}

inline void require_nonnegative(double x) {
  require(x >= 0.0, ErrorCode::NegativeInput, "penalty argument must be >= 0");
}

}  // namespace detail

inline double scad(double lambda, double a, double x) {
  detail::require_nonnegative(x);
  if (x <= lambda) return lambda * x;
  if (x < a * lambda) return (a * lambda * x - 0.5 * (x * x + lambda * lambda)) / (a - 1.0);
  return 0.5 * (a + 1.0) * lambda * lambda;
}

/// Right derivative; scad_deriv(lambda, a, 0) == lambda.
inline double scad_deriv(double lambda, double a, double x) {
  detail::require_nonnegative(x);
  if (x <= lambda) return lambda;
  if (x < a * lambda) return (a * lambda - x) / (a - 1.0);
  return 0.0;
}

inline double mcp(double lambda, double a, double x) {
  detail::require_nonnegative(x);
  if (x <= a * lambda) return lambda * x - x * x / (2.0 * a);
  return 0.5 * a * lambda * lambda;
}

inline double mcp_deriv(double lambda, double a, double x) {
  detail::require_nonnegative(x);
  if (x <= a * lambda) return lambda - x / a;
  return 0.0;
}

/// Omega_lambda(x) for the family in `penalty`.
inline double penalty_value(const PenaltySpec& penalty, double x) {
  switch (penalty.family) {
    case PenaltyFamily::none: return 0.0;
    case PenaltyFamily::scad: return scad(penalty.lambda, penalty.shape_a, x);
    case PenaltyFamily::mcp: return mcp(penalty.lambda, penalty.shape_a, x);
  }
  return 0.0;
}

inline double penalty_deriv(const PenaltySpec& penalty, double x) {
  switch (penalty.family) {
    case PenaltyFamily::none: return 0.0;
    case PenaltyFamily::scad: return scad_deriv(penalty.lambda, penalty.shape_a, x);
    case PenaltyFamily::mcp: return mcp_deriv(penalty.lambda, penalty.shape_a, x);
  }
  return 0.0;
}

namespace detail {

inline double weight_at(std::span<const double> weights, std::size_t k) {
  return weights.empty() ? 1.0 : weights[k];
}

inline void check_weights(std::span<const double> weights, std::size_t K) {
  require(weights.empty() || weights.size() == K, ErrorCode::DimensionMismatch, "one weight per experiment is required");
}

}  // namespace detail

/// sum_k w_k n_k^{-1} sum_m sum_i rho_m(Y_ki - b_km - X_ki . theta_km).
inline double pooled_loss(const MultiExperimentDataset& data, const QuantileGrid& grid, const CoefficientTensor& coefs,
                          std::span<const double> weights = {}) {
  detail::check_shapes(data, grid, coefs);
  detail::check_weights(weights, data.num_experiments());
  const auto residuals = compute_residuals(data, grid, coefs);
  double total = 0.0;
  for (std::size_t k = 0; k < data.num_experiments(); ++k) {
    double inner = 0.0;
    for (std::size_t m = 0; m < grid.size(); ++m) inner += detail::check_sum(grid[m], residuals[k * grid.size() + m]);
    total += detail::weight_at(weights, k) * inner / static_cast<double>(data.sample_size(k));
  }
  return total;
}

/// Unnormalized sum of check losses over every (k, m, i); the goodness-of-fit
/// term inside the information criterion.
inline double raw_check_sum(const QuantileGrid& grid, const std::vector<Eigen::VectorXd>& residuals,
                            std::size_t experiments, std::span<const double> weights = {}) {
  detail::require(residuals.size() == experiments * grid.size(), ErrorCode::DimensionMismatch,
                  "residual block count mismatch");
  double total = 0.0;
  for (std::size_t k = 0; k < experiments; ++k) {
    for (std::size_t m = 0; m < grid.size(); ++m) {
      total += detail::weight_at(weights, k) * detail::check_sum(grid[m], residuals[k * grid.size() + m]);
    }
  }
  return total;
}

inline double penalty_sum(const CoefficientTensor& coefs, const PenaltySpec& penalty) {
  if (penalty.family == PenaltyFamily::none || penalty.lambda == 0.0) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < coefs.num_predictors(); ++j) total += penalty_value(penalty, coefs.group_l1(j));
  return total;
}

/// Pooled loss plus sum_j Omega_lambda(||theta^(j)||_1).
inline double objective(const MultiExperimentDataset& data, const QuantileGrid& grid, const CoefficientTensor& coefs,
                        const PenaltySpec& penalty) {
  penalty.validate(data.num_experiments());
  return pooled_loss(data, grid, coefs, penalty.experiment_weights) + penalty_sum(coefs, penalty);
}

}  // namespace mqsel
