#pragma once

// Exhaustive reference solver for tiny problems. Deliberately shares nothing
// with the coordinate-descent path beyond the loss kernels.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "mqsel/error.hpp"
#include "mqsel/loss.hpp"
#include "mqsel/model.hpp"

namespace mqsel {

namespace detail {

/// Calls visit(indices) for every size-r subset of {0..n-1} in lexicographic order.
template <class Visit>
void for_each_combination(std::size_t n, std::size_t r, Visit&& visit) {
  if (r > n) return;
  std::vector<std::size_t> idx(r);
  for (std::size_t i = 0; i < r; ++i) idx[i] = i;
  while (true) {
    visit(idx);
    std::size_t i = r;
    while (i > 0 && idx[i - 1] == n - r + i - 1) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t t = i; t < r; ++t) idx[t] = idx[t - 1] + 1;
  }
}

struct Hyperplane {
  Eigen::VectorXd normal;
  double offset;
};

/// Best point among all vertices of an arrangement of hyperplanes in R^d.
template <class Objective>
std::optional<Eigen::VectorXd> best_vertex(const std::vector<Hyperplane>& planes, Eigen::Index d, Objective&& f) {
  std::optional<Eigen::VectorXd> best;
  double best_value = std::numeric_limits<double>::infinity();
  for_each_combination(planes.size(), static_cast<std::size_t>(d), [&](const std::vector<std::size_t>& pick) {
    Eigen::MatrixXd A(d, d);
    Eigen::VectorXd rhs(d);
    for (Eigen::Index r = 0; r < d; ++r) {
      A.row(r) = planes[pick[static_cast<std::size_t>(r)]].normal.transpose();
      rhs(r) = planes[pick[static_cast<std::size_t>(r)]].offset;
    }
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    if (lu.rank() < d) return;
    const Eigen::VectorXd x = lu.solve(rhs);
    if (!x.allFinite()) return;
    const double v = f(x);
    if (v < best_value) {
      best_value = v;
      best = x;
    }
  });
  return best;
}

}  // namespace detail

/// Reference optimum by enumeration. Unpenalized: for each (k, m), every
/// exact fit through |support|+1 observations is evaluated and the best kept.
/// Penalized (K = M = 1 only): every vertex of the arrangement formed by the
/// observation hyperplanes and the penalty breakpoints theta_j in
/// {0, +-lambda, +-a lambda} is evaluated (the objective is concave on each
/// cell, so the optimum is a vertex), followed by a grid search of half-width
/// 1e-3 around the winner.
inline FitResult brute_force_oracle(const MultiExperimentDataset& data, const QuantileGrid& grid,
                                    const std::vector<std::size_t>& support,
                                    const std::optional<PenaltySpec>& penalty = std::nullopt) {
  using detail::require;
  const std::size_t K = data.num_experiments();
  const std::size_t M = grid.size();
  const std::size_t p = data.num_predictors();
  const std::size_t q = support.size();
  require(q + 1 <= 3, ErrorCode::ProblemTooLarge, "oracle supports at most two slopes");
  for (std::size_t k = 0; k < K; ++k) {
    require(data.sample_size(k) <= 12, ErrorCode::ProblemTooLarge, "oracle supports at most 12 observations");
  }
  for (auto j : support) require(j < p, ErrorCode::IndexOutOfRange, "support index out of range");
  const bool penalized = penalty && penalty->family != PenaltyFamily::none && penalty->lambda > 0.0;
  if (penalized) {
    require(K * M == 1, ErrorCode::ProblemTooLarge, "penalized oracle needs one experiment and one quantile");
    penalty->validate(K);
  }
  const auto d = static_cast<Eigen::Index>(q + 1);

  auto to_tensor = [&](std::size_t k, std::size_t m, const Eigen::VectorXd& beta, CoefficientTensor& out) {
    out.intercept(k, m) = beta(0);
    for (std::size_t s = 0; s < q; ++s) out.slope(k, m, support[s]) = beta(static_cast<Eigen::Index>(s) + 1);
  };
  auto row = [&](const Experiment& e, Eigen::Index i) {
    Eigen::VectorXd a(d);
    a(0) = 1.0;
    for (std::size_t s = 0; s < q; ++s) a(static_cast<Eigen::Index>(s) + 1) = e.design(i, static_cast<Eigen::Index>(support[s]));
    return a;
  };
  auto block_loss = [&](const Experiment& e, double tau, const Eigen::VectorXd& beta) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < e.response.size(); ++i) total += check(tau, e.response(i) - row(e, i).dot(beta));
    return total / static_cast<double>(e.response.size());
  };

  FitResult result;
  result.coefficients = CoefficientTensor(K, M, p);

  if (!penalized) {
    for (std::size_t k = 0; k < K; ++k) {
      const auto& e = data.experiment(k);
      std::vector<detail::Hyperplane> planes;
      for (Eigen::Index i = 0; i < e.response.size(); ++i) planes.push_back({row(e, i), e.response(i)});
      for (std::size_t m = 0; m < M; ++m) {
        const auto best = detail::best_vertex(planes, d, [&](const Eigen::VectorXd& b) { return block_loss(e, grid[m], b); });
        require(best.has_value(), ErrorCode::InvalidInput, "no basic solution exists (collinear design)");
        to_tensor(k, m, *best, result.coefficients);
      }
    }
    result.objective_value = pooled_loss(data, grid, result.coefficients);
  } else {
    const auto& e = data.experiment(0);
    const double tau = grid[0];
    const double w = penalty->weight(0);
    auto full = [&](const Eigen::VectorXd& b) {
      double v = w * block_loss(e, tau, b);
      for (Eigen::Index s = 1; s < d; ++s) v += penalty_value(*penalty, std::abs(b(s)));
      return v;
    };
    std::vector<detail::Hyperplane> planes;
    for (Eigen::Index i = 0; i < e.response.size(); ++i) planes.push_back({row(e, i), e.response(i)});
    std::vector<double> knots{0.0};
    const double lam = penalty->lambda;
    const double a = penalty->shape_a;
    if (penalty->family == PenaltyFamily::scad) knots.insert(knots.end(), {lam, -lam, a * lam, -a * lam});
    if (penalty->family == PenaltyFamily::mcp) knots.insert(knots.end(), {a * lam, -a * lam});
    for (Eigen::Index s = 1; s < d; ++s) {
      for (double c : knots) {
        Eigen::VectorXd normal = Eigen::VectorXd::Zero(d);
        normal(s) = 1.0;
        planes.push_back({normal, c});
      }
    }
    auto best = detail::best_vertex(planes, d, full);
    require(best.has_value(), ErrorCode::InvalidInput, "no vertex found");
    Eigen::VectorXd centre = *best;
    double best_value = full(centre);
    constexpr int steps = 10;
    constexpr double half_width = 1e-3;
    const double h = half_width / steps;
    std::vector<int> offset(static_cast<std::size_t>(d), -steps);
    while (true) {
      Eigen::VectorXd trial = centre;
      for (Eigen::Index s = 0; s < d; ++s) trial(s) += h * offset[static_cast<std::size_t>(s)];
      const double v = full(trial);
      if (v < best_value) {
        best_value = v;
        *best = trial;
      }
      std::size_t s = 0;
      while (s < offset.size() && offset[s] == steps) offset[s++] = -steps;
      if (s == offset.size()) break;
      ++offset[s];
    }
    to_tensor(0, 0, *best, result.coefficients);
    result.objective_value = objective(data, grid, result.coefficients, *penalty);
  }
  result.residuals = compute_residuals(data, grid, result.coefficients);
  result.working_objective = result.objective_value;
  result.objective_history = {result.objective_value};
  result.converged = true;
  return result;
}

}  // namespace mqsel
