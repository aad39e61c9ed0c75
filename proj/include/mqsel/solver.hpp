#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "mqsel/error.hpp"
#include "mqsel/loss.hpp"
#include "mqsel/model.hpp"

namespace mqsel {

struct SolverConfig {
  int max_outer_iterations = 100;
  int max_inner_sweeps = 200;
  double objective_rel_tol = 1e-6;
  double coordinate_abs_tol = 1e-10;
  /// Residuals and covariates at or below this magnitude count as zero.
  double residual_zero_tol = 1e-10;
  /// Raw-scale starting point for penalized fits; zero when absent.
  std::optional<CoefficientTensor> warm_start;
  /// Center and scale covariates per experiment before penalized fitting.
  bool standardize = true;
  /// Finish coordinate descent with an exact vertex walk on the free coordinates.
  bool exact_refinement = true;
  /// Subproblems with at most this many free parameters are refined over all
  /// coordinates; larger ones only over their nonzero coordinates.
  std::size_t full_refinement_dim = 12;
  std::size_t max_refinement_dim = 64;
  /// Working-scale slopes at or below this magnitude are set to exactly zero.
  double snap_tol = 1e-8;
  /// Sweeps over a lambda path in fit_path; 1 gives the plain warm-started
  /// descent.
  std::size_t path_sweeps = 2;
  /// fit_penalized tries every support as a start when p is at most this.
  std::size_t multistart_max_predictors = 4;

  void validate() const {
    using detail::require;
    require(max_outer_iterations >= 1 && max_inner_sweeps >= 1, ErrorCode::InvalidInput,
            "iteration caps must be >= 1");
    require(objective_rel_tol > 0 && coordinate_abs_tol > 0 && residual_zero_tol > 0 && snap_tol >= 0,
            ErrorCode::InvalidInput, "solver tolerances must be positive");
  }
};

namespace detail {

/// Term  left * max(at - t, 0) + right * max(t - at, 0)  of a convex
/// piecewise-linear function of a scalar t.
struct Kink {
  double at;
  double left;
  double right;
};

/// Minimizer of the sum of kink terms. When the minimizer is an interval the
/// left endpoint is returned. Reorders `kinks`.
inline double minimize_kinks(std::vector<Kink>& kinks) {
  require(!kinks.empty(), ErrorCode::EmptyInput, "no breakpoints");
  std::sort(kinks.begin(), kinks.end(), [](const Kink& a, const Kink& b) { return a.at < b.at; });
  double slope = 0.0;
  double scale = 0.0;
  for (const auto& kk : kinks) {
    slope -= kk.left;
    scale += kk.left + kk.right;
  }
  const double eps = 1e-12 * scale;
  for (const auto& kk : kinks) {
    slope += kk.left + kk.right;
    if (slope >= -eps) return kk.at;
  }
  return kinks.back().at;
}

/// Pushes the kink of  weight * rho_tau(u - x * t)  in t.
inline void push_check_kink(std::vector<Kink>& kinks, double u, double x, double tau, double weight) {
  const double ax = std::abs(x) * weight;
  if (x > 0) {
    kinks.push_back({u / x, ax * tau, ax * (1.0 - tau)});
  } else {
    kinks.push_back({u / x, ax * (1.0 - tau), ax * tau});
  }
}

}  // namespace detail

/// Minimizer of sum_i w_i |v - values_i|; the left endpoint on ties.
inline double weighted_median(std::span<const double> values, std::span<const double> weights) {
  detail::require(!values.empty(), ErrorCode::EmptyInput, "weighted median of an empty set");
  detail::require(values.size() == weights.size(), ErrorCode::DimensionMismatch, "values and weights differ in length");
  std::vector<detail::Kink> kinks;
  kinks.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    detail::require(weights[i] > 0.0, ErrorCode::NonPositiveWeight, "weights must be positive");
    kinks.push_back({values[i], weights[i], weights[i]});
  }
  return detail::minimize_kinks(kinks);
}

namespace detail {

/// Exact minimizer of  sum_l pos_l max(r_l, 0) + neg_l max(-r_l, 0),
/// r = target - A beta, for a small number of columns D. Walks to a vertex
/// (D linearly independent zero residuals) by exact line searches inside the
/// null space of the current zero rows, then pivots along the steepest
/// descending edge until no edge descends. The basis inverse is kept by
/// rank-one updates and refactored periodically.
class VertexWalk {
 public:
  VertexWalk(const Eigen::MatrixXd& A, const Eigen::VectorXd& target, const Eigen::VectorXd& pos,
             const Eigen::VectorXd& neg, double zero_tol)
      : A_(A), t_(target), pos_(pos), neg_(neg), ztol_(zero_tol), D_(A.cols()), n_(A.rows()) {
    total_weight_ = pos_.sum() + neg_.sum();
  }

  /// Improves `beta` in place. Returns false when no vertex exists (rank
  /// deficient rows) or the pivot cap is hit; beta still never gets worse.
  bool run(Eigen::VectorXd& beta) {
    r_ = t_ - A_ * beta;
    f_ = value(r_);
    if (!reach_vertex(beta)) return false;
    return pivot(beta);
  }

  double value() const { return f_; }

 private:
  struct Edge {
    double score;
    double slope;
    Eigen::Index code;
  };

  struct Break {
    double at;
    double weight;
    Eigen::Index row;
  };

  double value(const Eigen::VectorXd& r) const {
    double total = 0.0;
    for (Eigen::Index l = 0; l < n_; ++l) total += r(l) > 0 ? pos_(l) * r(l) : -neg_(l) * r(l);
    return total;
  }

  /// Exact minimizer s of f(beta + s d) given z = A d, as (s, row whose
  /// residual vanishes there); the left endpoint of a flat minimum. With
  /// `forward` only breakpoints at s > 0 are considered and `slope` is the
  /// known one-sided derivative at s = 0.
  std::pair<double, Eigen::Index> line_minimum(const Eigen::VectorXd& z, bool forward = false, double slope = 0.0) {
    breaks_.clear();
    for (Eigen::Index l = 0; l < n_; ++l) {
      const double zl = z(l);
      if (std::abs(zl) <= 1e-14) continue;
      const double at = r_(l) / zl;
      const double left = zl > 0 ? pos_(l) * zl : -neg_(l) * zl;
      const double right = zl > 0 ? neg_(l) * zl : -pos_(l) * zl;
      if (forward) {
        if (at > 0.0 && std::abs(r_(l)) > ztol_) breaks_.push_back({at, left + right, l});
      } else {
        breaks_.push_back({at, left + right, l});
        slope -= left;
      }
    }
    if (breaks_.empty()) return {0.0, -1};
    // Weighted selection: first breakpoint (in order of position) at which the
    // accumulated slope turns nonnegative.
    double need = -slope - 1e-12 * total_weight_;
    auto lo = breaks_.begin();
    auto hi = breaks_.end();
    const auto by_at = [](const Break& x, const Break& y) { return x.at < y.at; };
    while (hi - lo > 1) {
      auto mid = lo + (hi - lo) / 2;
      std::nth_element(lo, mid, hi, by_at);
      double left = 0.0;
      for (auto it = lo; it != mid; ++it) left += it->weight;
      if (left >= need) {
        hi = mid;
      } else if (left + mid->weight >= need) {
        return {mid->at, mid->row};
      } else {
        need -= left + mid->weight;
        lo = mid + 1;
      }
    }
    if (lo == breaks_.end()) --lo;
    return {lo->at, lo->row};
  }

  /// Moves to beta + s d unless that raises the objective beyond rounding.
  bool step(Eigen::VectorXd& beta, const Eigen::VectorXd& d, const Eigen::VectorXd& z, double s, Eigen::Index row,
            double slack) {
    const double before = f_;
    const double saved = r_(row);
    r_.noalias() -= s * z;
    const double moved_row = r_(row);
    r_(row) = 0.0;
    f_ = value(r_);
    if (f_ > before + slack) {
      r_(row) = moved_row;
      r_.noalias() += s * z;
      r_(row) = saved;
      f_ = before;
      return false;
    }
    beta.noalias() += s * d;
    return true;
  }

  bool try_add(Eigen::Index l, std::vector<Eigen::VectorXd>& q) {
    Eigen::VectorXd v = A_.row(l).transpose();
    const double norm0 = v.norm();
    if (norm0 == 0.0) return false;
    for (const auto& qq : q) v -= qq.dot(v) * qq;
    const double norm = v.norm();
    if (norm <= 1e-9 * norm0) return false;
    q.push_back(v / norm);
    basis_.push_back(l);
    return true;
  }

  bool reach_vertex(Eigen::VectorXd& beta) {
    basis_.clear();
    std::vector<Eigen::VectorXd> q;
    for (Eigen::Index l = 0; l < n_ && static_cast<Eigen::Index>(basis_.size()) < D_; ++l) {
      if (std::abs(r_(l)) <= ztol_) try_add(l, q);
    }
    while (static_cast<Eigen::Index>(basis_.size()) < D_) {
      Eigen::MatrixXd proj = Eigen::MatrixXd::Identity(D_, D_);
      for (const auto& qq : q) proj -= qq * qq.transpose();
      Eigen::Index col = 0;
      proj.colwise().norm().maxCoeff(&col);
      d_ = proj.col(col);
      z_.noalias() = A_ * d_;
      const auto [s, row] = line_minimum(z_);
      if (row < 0) return false;
      if (!step(beta, d_, z_, s, row, 1e-13 * std::max(1.0, f_))) return false;
      if (!try_add(row, q)) return false;
    }
    return true;
  }

  void refactor() {
    Eigen::MatrixXd AB(D_, D_);
    for (Eigen::Index h = 0; h < D_; ++h) AB.row(h) = A_.row(basis_[static_cast<std::size_t>(h)]);
    binv_ = Eigen::PartialPivLU<Eigen::MatrixXd>(AB).inverse();
    since_refactor_ = 0;
  }

  bool pivot(Eigen::VectorXd& beta) {
    refactor();
    std::vector<char> in_basis(static_cast<std::size_t>(n_), 0);
    for (auto l : basis_) in_basis[static_cast<std::size_t>(l)] = 1;
    Eigen::VectorXd psi(n_);
    const double eps = 1e-12 * std::max(1.0, total_weight_);
    const int cap = 50 * static_cast<int>(D_) + 100;
    std::vector<Edge> cand;
    for (int it = 0; it < cap; ++it) {
      zero_rows_.clear();
      for (Eigen::Index l = 0; l < n_; ++l) {
        if (in_basis[static_cast<std::size_t>(l)]) {
          psi(l) = 0.0;
        } else if (r_(l) > ztol_) {
          psi(l) = -pos_(l);
        } else if (r_(l) < -ztol_) {
          psi(l) = neg_(l);
        } else {
          psi(l) = 0.0;
          zero_rows_.push_back(l);
        }
      }
      g_.noalias() = A_.transpose() * psi;
      u_.noalias() = binv_.transpose() * g_;
      const Eigen::VectorXd& u = u_;
      Eigen::VectorXd plus(D_), minus(D_);
      for (Eigen::Index h = 0; h < D_; ++h) {
        const auto bh = basis_[static_cast<std::size_t>(h)];
        plus(h) = u(h) + neg_(bh);
        minus(h) = -u(h) + pos_(bh);
      }
      for (auto l : zero_rows_) {
        const Eigen::VectorXd w = binv_.transpose() * A_.row(l).transpose();
        for (Eigen::Index h = 0; h < D_; ++h) {
          plus(h) += w(h) > 0 ? neg_(l) * w(h) : -pos_(l) * w(h);
          minus(h) += w(h) < 0 ? -neg_(l) * w(h) : pos_(l) * w(h);
        }
      }
      // Candidate edges ranked by descent per unit length of the edge.
      cand.clear();
      for (Eigen::Index h = 0; h < D_; ++h) {
        const double len = binv_.col(h).norm();
        if (plus(h) < -eps) cand.push_back({plus(h) / len, plus(h), h + 1});
        if (minus(h) < -eps) cand.push_back({minus(h) / len, minus(h), -(h + 1)});
      }
      if (cand.empty()) return true;
      std::sort(cand.begin(), cand.end(), [](const Edge& x, const Edge& y) { return x.score < y.score; });
      bool moved = false;
      for (const auto& [score, dd, code] : cand) {
        const Eigen::Index h = std::abs(code) - 1;
        if (code > 0) {
          d_ = binv_.col(h);
        } else {
          d_ = -binv_.col(h);
        }
        z_.noalias() = A_ * d_;
        const auto [s, row] = line_minimum(z_, true, dd);
        if (row < 0 || s <= 0.0 || in_basis[static_cast<std::size_t>(row)]) continue;
        const double zr = z_(row);
        if (!step(beta, d_, z_, s, row, -1e-15 * std::max(1.0, f_))) continue;
        const auto leaving = basis_[static_cast<std::size_t>(h)];
        in_basis[static_cast<std::size_t>(leaving)] = 0;
        in_basis[static_cast<std::size_t>(row)] = 1;
        basis_[static_cast<std::size_t>(h)] = row;
        // Row h of the basis matrix changes from a_leaving to a_row; with the
        // unsigned edge e = binv e_h, a_row . e = +-zr.
        const double denom = code > 0 ? zr : -zr;
        if (++since_refactor_ >= 16 || std::abs(denom) < 1e-8) {
          refactor();
        } else {
          const Eigen::VectorXd e = binv_.col(h);
          const Eigen::RowVectorXd vb = (A_.row(row) - A_.row(leaving)) * binv_;
          binv_.noalias() -= e * vb / denom;
        }
        moved = true;
        break;
      }
      if (!moved) return true;
    }
    return false;
  }

  const Eigen::MatrixXd& A_;
  const Eigen::VectorXd& t_;
  const Eigen::VectorXd& pos_;
  const Eigen::VectorXd& neg_;
  double ztol_;
  Eigen::Index D_;
  Eigen::Index n_;
  double total_weight_ = 0.0;
  Eigen::VectorXd r_;
  double f_ = 0.0;
  std::vector<Eigen::Index> basis_;
  std::vector<Eigen::Index> zero_rows_;
  Eigen::MatrixXd binv_;
  int since_refactor_ = 0;
  std::vector<Break> breaks_;
  Eigen::VectorXd d_;
  Eigen::VectorXd z_;
  Eigen::VectorXd g_;
  Eigen::VectorXd u_;
};

/// Coordinate descent plus exact refinement for one (k, m) block of the
/// weighted-L1 surrogate
///   obs_weight * sum_i rho_tau(y_i - b - x_i . theta) + sum_j omega_j |theta_j|.
class SubproblemSolver {
 public:
  SubproblemSolver(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double tau, double obs_weight,
                   const SolverConfig& config)
      : X_(X), y_(y), tau_(tau), c_(obs_weight), cfg_(config) {
    const auto p = static_cast<std::size_t>(X.cols());
    theta_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    omega_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    free_.resize(p);
    for (std::size_t j = 0; j < p; ++j) free_[j] = j;
    usable_.assign(p, true);
    for (std::size_t j = 0; j < p; ++j) {
      usable_[j] = X.col(static_cast<Eigen::Index>(j)).cwiseAbs().maxCoeff() > cfg_.residual_zero_tol;
    }
    residual_ = y_;
  }

  void set_free(std::vector<std::size_t> coords) { free_ = std::move(coords); }
  void set_penalty_weights(const Eigen::VectorXd& omega) { omega_ = omega; }

  void set_state(double intercept, const Eigen::VectorXd& theta) {
    intercept_ = intercept;
    theta_ = theta;
    refresh_residual();
  }

  double intercept() const noexcept { return intercept_; }
  const Eigen::VectorXd& theta() const noexcept { return theta_; }
  const Eigen::VectorXd& residual() const noexcept { return residual_; }

  double surrogate() const {
    double total = c_ * check_sum(tau_, residual_);
    for (auto j : free_) total += omega_(static_cast<Eigen::Index>(j)) * std::abs(theta_(static_cast<Eigen::Index>(j)));
    return total;
  }

  /// Minimizer over the intercept with everything else fixed.
  double intercept_update() {
    kinks_.clear();
    for (Eigen::Index i = 0; i < residual_.size(); ++i) push_check_kink(kinks_, residual_(i) + intercept_, 1.0, tau_, c_);
    return minimize_kinks(kinks_);
  }

  /// Minimizer over theta_j with everything else fixed.
  double slope_update(std::size_t j) {
    const auto jj = static_cast<Eigen::Index>(j);
    if (!usable_[j]) return 0.0;
    const double omega = omega_(jj);
    const double current = theta_(jj);
    const auto x = X_.col(jj);
    const double ztol = cfg_.residual_zero_tol;
    if (current == 0.0 && omega > 0.0 && zero_is_optimal(x, omega)) return 0.0;
    kinks_.clear();
    for (Eigen::Index i = 0; i < residual_.size(); ++i) {
      const double xi = x(i);
      if (std::abs(xi) <= ztol) continue;
      push_check_kink(kinks_, residual_(i) + xi * current, xi, tau_, c_);
    }
    if (omega > 0.0) kinks_.push_back({0.0, omega, omega});
    if (kinks_.empty()) return 0.0;
    return minimize_kinks(kinks_);
  }

  /// One cyclic pass: intercept, then free slopes in index order. Returns the
  /// largest absolute coordinate change.
  double sweep() {
    double biggest = 0.0;
    const double b = intercept_update();
    if (b != intercept_) {
      residual_.array() -= b - intercept_;
      biggest = std::max(biggest, std::abs(b - intercept_));
      intercept_ = b;
    }
    for (auto j : free_) {
      const auto jj = static_cast<Eigen::Index>(j);
      const double v = slope_update(j);
      const double delta = v - theta_(jj);
      if (delta != 0.0) {
        residual_.noalias() -= delta * X_.col(jj);
        theta_(jj) = v;
        biggest = std::max(biggest, std::abs(delta));
      }
    }
    return biggest;
  }

  /// Coordinate descent to tolerance, then alternating exact refinement and
  /// descent until neither moves. Returns true when a stopping rule was met
  /// before the sweep cap.
  bool solve() {
    bool converged = descend();
    if (!cfg_.exact_refinement) return converged;
    for (int round = 0; round < 20; ++round) {
      if (!refine()) break;
      const double before = surrogate();
      converged = descend() && converged;
      if (surrogate() >= before - 1e-15 * std::max(1.0, before)) break;
    }
    refresh_residual();
    return converged;
  }

  bool descend() {
    double previous = surrogate();
    for (int s = 0; s < cfg_.max_inner_sweeps; ++s) {
      const double change = sweep();
      const double now = surrogate();
      if (change <= cfg_.coordinate_abs_tol || std::abs(previous - now) <= cfg_.objective_rel_tol * std::abs(previous)) {
        return true;
      }
      previous = now;
    }
    return false;
  }

  /// Exact vertex walk over the refinement coordinates: moves to a point where
  /// the number of zero terms equals the parameter count, then follows
  /// descending edges with exact line searches until no edge descends.
  /// Returns true if the iterate moved.
  bool refine() {
    std::vector<std::size_t> coords;
    const bool full = free_.size() + 1 <= cfg_.full_refinement_dim;
    for (auto j : free_) {
      if (!usable_[j]) continue;
      if (full || theta_(static_cast<Eigen::Index>(j)) != 0.0) coords.push_back(j);
    }
    const auto D = static_cast<Eigen::Index>(coords.size() + 1);
    if (static_cast<std::size_t>(D) > cfg_.max_refinement_dim) return false;

    const Eigen::Index n = y_.size();
    std::vector<Eigen::Index> pen_rows;
    for (std::size_t idx = 0; idx < coords.size(); ++idx) {
      if (omega_(static_cast<Eigen::Index>(coords[idx])) > 0.0) pen_rows.push_back(static_cast<Eigen::Index>(idx));
    }
    const Eigen::Index rows = n + static_cast<Eigen::Index>(pen_rows.size());
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(rows, D);
    Eigen::VectorXd target = Eigen::VectorXd::Zero(rows);
    Eigen::VectorXd pos_w(rows), neg_w(rows);
    // Target includes contributions from fixed coordinates outside the walk.
    Eigen::VectorXd offset = y_;
    for (auto j : free_) {
      const auto jj = static_cast<Eigen::Index>(j);
      if (std::find(coords.begin(), coords.end(), j) == coords.end() && theta_(jj) != 0.0) {
        offset.noalias() -= theta_(jj) * X_.col(jj);
      }
    }
    A.col(0).head(n).setOnes();
    for (std::size_t idx = 0; idx < coords.size(); ++idx) {
      A.col(static_cast<Eigen::Index>(idx) + 1).head(n) = X_.col(static_cast<Eigen::Index>(coords[idx]));
    }
    target.head(n) = offset;
    pos_w.head(n).setConstant(c_ * tau_);
    neg_w.head(n).setConstant(c_ * (1.0 - tau_));
    for (std::size_t r = 0; r < pen_rows.size(); ++r) {
      const auto row = n + static_cast<Eigen::Index>(r);
      A(row, pen_rows[r] + 1) = 1.0;
      const double w = omega_(static_cast<Eigen::Index>(coords[static_cast<std::size_t>(pen_rows[r])]));
      pos_w(row) = w;
      neg_w(row) = w;
    }

    Eigen::VectorXd beta(D);
    beta(0) = intercept_;
    for (std::size_t idx = 0; idx < coords.size(); ++idx) {
      beta(static_cast<Eigen::Index>(idx) + 1) = theta_(static_cast<Eigen::Index>(coords[idx]));
    }
    Eigen::VectorXd s = target - A * beta;
    auto value = [&](const Eigen::VectorXd& res) {
      double total = 0.0;
      for (Eigen::Index l = 0; l < rows; ++l) total += res(l) > 0 ? pos_w(l) * res(l) : -neg_w(l) * res(l);
      return total;
    };
    const double ztol = cfg_.residual_zero_tol;
    double f = value(s);
    const double f_start = f;
    bool moved = false;

    auto line_search = [&](const Eigen::VectorXd& dir) -> bool {
      const Eigen::VectorXd z = A * dir;
      kinks_.clear();
      const double zscale = 1e-13 * std::max(1.0, dir.cwiseAbs().maxCoeff());
      for (Eigen::Index l = 0; l < rows; ++l) {
        const double zl = z(l);
        if (std::abs(zl) <= zscale) continue;
        const double az = std::abs(zl);
        if (zl > 0) {
          kinks_.push_back({s(l) / zl, pos_w(l) * az, neg_w(l) * az});
        } else {
          kinks_.push_back({s(l) / zl, neg_w(l) * az, pos_w(l) * az});
        }
      }
      if (kinks_.empty()) return false;
      const double t = minimize_kinks(kinks_);
      if (t == 0.0) return false;
      Eigen::VectorXd trial_beta = beta + t * dir;
      Eigen::VectorXd trial_s = target - A * trial_beta;
      const double trial_f = value(trial_s);
      if (trial_f > f + 1e-13 * std::max(1.0, std::abs(f))) return false;
      beta = std::move(trial_beta);
      s = std::move(trial_s);
      f = trial_f;
      moved = true;
      return true;
    };

    const int max_steps = 30 * static_cast<int>(D) + 30;
    int flat_steps = 0;
    for (int step = 0; step < max_steps; ++step) {
      // Independent zero rows by Gram-Schmidt.
      std::vector<Eigen::Index> basis;
      std::vector<Eigen::VectorXd> q;
      for (Eigen::Index l = 0; l < rows && static_cast<Eigen::Index>(basis.size()) < D; ++l) {
        if (std::abs(s(l)) > ztol) continue;
        Eigen::VectorXd v = A.row(l).transpose();
        const double norm0 = v.norm();
        for (const auto& qq : q) v -= qq.dot(v) * qq;
        const double norm = v.norm();
        if (norm > 1e-9 * norm0) {
          basis.push_back(l);
          q.push_back(v / norm);
        }
      }
      if (static_cast<Eigen::Index>(basis.size()) < D) {
        Eigen::MatrixXd proj = Eigen::MatrixXd::Identity(D, D);
        for (const auto& qq : q) proj -= qq * qq.transpose();
        Eigen::Index best_col = 0;
        proj.colwise().norm().maxCoeff(&best_col);
        const Eigen::VectorXd dir = proj.col(best_col);
        const double before = f;
        if (!line_search(dir)) break;
        if (f >= before) ++flat_steps;
        if (flat_steps > 2 * D) break;
        continue;
      }
      Eigen::MatrixXd AB(D, D);
      for (Eigen::Index r = 0; r < D; ++r) AB.row(r) = A.row(basis[static_cast<std::size_t>(r)]);
      const Eigen::PartialPivLU<Eigen::MatrixXd> lu(AB);
      const Eigen::MatrixXd edges = lu.inverse();
      const Eigen::MatrixXd Z = A * edges;
      // Directional derivative along +edge and -edge for every basis row.
      std::vector<std::pair<double, Eigen::Index>> candidates;
      for (Eigen::Index h = 0; h < D; ++h) {
        double plus = 0.0;
        double minus = 0.0;
        for (Eigen::Index l = 0; l < rows; ++l) {
          const double zl = Z(l, h);
          if (s(l) > ztol) {
            plus -= pos_w(l) * zl;
            minus += pos_w(l) * zl;
          } else if (s(l) < -ztol) {
            plus += neg_w(l) * zl;
            minus -= neg_w(l) * zl;
          } else {
            plus += zl < 0 ? -pos_w(l) * zl : neg_w(l) * zl;
            minus += zl > 0 ? pos_w(l) * zl : -neg_w(l) * zl;
          }
        }
        candidates.emplace_back(plus, h + 1);
        candidates.emplace_back(minus, -(h + 1));
      }
      std::sort(candidates.begin(), candidates.end());
      const double dd_tol = 1e-12 * std::max(1.0, std::abs(f));
      bool stepped = false;
      for (const auto& [dd, code] : candidates) {
        if (dd >= -dd_tol) break;
        const Eigen::Index h = std::abs(code) - 1;
        const Eigen::VectorXd dir = code > 0 ? Eigen::VectorXd(edges.col(h)) : Eigen::VectorXd(-edges.col(h));
        const double before = f;
        if (line_search(dir) && f < before - 1e-15 * std::max(1.0, std::abs(before))) {
          stepped = true;
          break;
        }
      }
      if (!stepped) break;
    }
    if (!moved || f > f_start) return false;
    intercept_ = beta(0);
    for (std::size_t idx = 0; idx < coords.size(); ++idx) {
      theta_(static_cast<Eigen::Index>(coords[idx])) = beta(static_cast<Eigen::Index>(idx) + 1);
    }
    refresh_residual();
    return f < f_start;
  }

  void snap(double tol) {
    for (Eigen::Index j = 0; j < theta_.size(); ++j) {
      if (std::abs(theta_(j)) <= tol) theta_(j) = 0.0;
    }
    refresh_residual();
  }

 private:
  void refresh_residual() {
    residual_ = y_ - X_ * theta_;
    residual_.array() -= intercept_;
  }

  /// Whether v = 0 is the left-endpoint minimizer for coordinate j when the
  /// coordinate currently sits at zero: the slope left of 0 is negative and
  /// the slope right of 0 is nonnegative.
  bool zero_is_optimal(const Eigen::Ref<const Eigen::VectorXd>& x, double omega) const {
    double right = omega;
    double left = -omega;
    const double ztol = cfg_.residual_zero_tol;
    for (Eigen::Index i = 0; i < residual_.size(); ++i) {
      const double xi = x(i);
      if (std::abs(xi) <= ztol) continue;
      const double a = std::abs(xi) * c_;
      const double lw = xi > 0 ? a * tau_ : a * (1.0 - tau_);
      const double rw = xi > 0 ? a * (1.0 - tau_) : a * tau_;
      const double at = residual_(i) / xi;
      if (at > 0.0) {
        right -= lw;
        left -= lw;
      } else if (at < 0.0) {
        right += rw;
        left += rw;
      } else {
        right += rw;
        left -= lw;
      }
    }
    return right >= 0.0 && left < 0.0;
  }

  const Eigen::MatrixXd& X_;
  const Eigen::VectorXd& y_;
  double tau_;
  double c_;
  const SolverConfig& cfg_;
  double intercept_ = 0.0;
  Eigen::VectorXd theta_;
  Eigen::VectorXd omega_;
  Eigen::VectorXd residual_;
  std::vector<std::size_t> free_;
  std::vector<bool> usable_;
  std::vector<Kink> kinks_;
};

/// Covariates on the scale the solver works in, with the affine map back to
/// the input scale. Constant columns get scale 0 and are never fitted.
struct WorkingDesign {
  std::vector<Eigen::MatrixXd> X;
  std::vector<Eigen::VectorXd> center;
  std::vector<Eigen::VectorXd> scale;
  bool standardized = false;
};

inline WorkingDesign make_working_design(const MultiExperimentDataset& data, bool standardize) {
  WorkingDesign wd;
  wd.standardized = standardize;
  const auto p = static_cast<Eigen::Index>(data.num_predictors());
  for (const auto& e : data.experiments()) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd sd = Eigen::VectorXd::Ones(p);
    Eigen::MatrixXd X = e.design;
    if (standardize) {
      const auto n = e.design.rows();
      for (Eigen::Index j = 0; j < p; ++j) {
        mu(j) = e.design.col(j).mean();
        const double ss = (e.design.col(j).array() - mu(j)).square().sum();
        sd(j) = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
        if (sd(j) > 0.0 && std::isfinite(sd(j))) {
          X.col(j) = (e.design.col(j).array() - mu(j)) / sd(j);
        } else {
          sd(j) = 0.0;
          X.col(j).setZero();
        }
      }
    }
    wd.X.push_back(std::move(X));
    wd.center.push_back(std::move(mu));
    wd.scale.push_back(std::move(sd));
  }
  return wd;
}

inline CoefficientTensor to_working(const CoefficientTensor& raw, const WorkingDesign& wd) {
  if (!wd.standardized) return raw;
  CoefficientTensor out(raw.num_experiments(), raw.num_quantiles(), raw.num_predictors());
  for (std::size_t k = 0; k < raw.num_experiments(); ++k) {
    for (std::size_t m = 0; m < raw.num_quantiles(); ++m) {
      double b = raw.intercept(k, m);
      for (std::size_t j = 0; j < raw.num_predictors(); ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        const double s = wd.scale[k](jj);
        if (s == 0.0) continue;
        out.slope(k, m, j) = raw.slope(k, m, j) * s;
        b += wd.center[k](jj) * raw.slope(k, m, j);
      }
      out.intercept(k, m) = b;
    }
  }
  return out;
}

inline CoefficientTensor to_raw(const CoefficientTensor& working, const WorkingDesign& wd) {
  if (!wd.standardized) return working;
  CoefficientTensor out(working.num_experiments(), working.num_quantiles(), working.num_predictors());
  for (std::size_t k = 0; k < working.num_experiments(); ++k) {
    for (std::size_t m = 0; m < working.num_quantiles(); ++m) {
      double b = working.intercept(k, m);
      for (std::size_t j = 0; j < working.num_predictors(); ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        const double s = wd.scale[k](jj);
        if (s == 0.0) continue;
        const double raw_slope = working.slope(k, m, j) / s;
        out.slope(k, m, j) = raw_slope;
        b -= wd.center[k](jj) * raw_slope;
      }
      out.intercept(k, m) = b;
    }
  }
  return out;
}

}  // namespace detail

using Coordinate = std::optional<std::size_t>;
inline constexpr Coordinate kIntercept = std::nullopt;

/// Exact minimizer over one coordinate of
///   n_k^{-1} sum_i rho_m(partial residual_i - X_kij theta) + penalty_weight |theta|
/// with all other coordinates of `coefs` held fixed. `j == kIntercept`
/// updates b_km with zero penalty.
inline double coordinate_update(const MultiExperimentDataset& data, const QuantileGrid& grid,
                                const CoefficientTensor& coefs, std::size_t k, std::size_t m, Coordinate j,
                                double penalty_weight, double residual_zero_tol = 1e-10) {
  detail::check_shapes(data, grid, coefs);
  detail::require(k < data.num_experiments() && m < grid.size(), ErrorCode::IndexOutOfRange, "block out of range");
  detail::require(!j || *j < data.num_predictors(), ErrorCode::IndexOutOfRange, "predictor out of range");
  detail::require(penalty_weight >= 0.0, ErrorCode::NegativeInput, "penalty weight must be >= 0");
  const auto& e = data.experiment(k);
  SolverConfig cfg;
  cfg.residual_zero_tol = residual_zero_tol;
  detail::SubproblemSolver block(e.design, e.response, grid[m], 1.0 / static_cast<double>(e.response.size()), cfg);
  block.set_state(coefs.intercept(k, m), detail::slope_vector(coefs, k, m));
  if (!j) return block.intercept_update();
  Eigen::VectorXd omega = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data.num_predictors()));
  omega(static_cast<Eigen::Index>(*j)) = penalty_weight;
  block.set_penalty_weights(omega);
  return block.slope_update(*j);
}

/// Smallest lambda at which the all-zero slope tensor is a fixed point of the
/// penalized fit, on the working scale implied by `standardize`.
inline double lambda_max(const MultiExperimentDataset& data, const QuantileGrid& grid,
                         std::span<const double> weights = {}, bool standardize = true) {
  detail::check_weights(weights, data.num_experiments());
  const auto wd = detail::make_working_design(data, standardize);
  double tau_factor = 0.0;
  for (double tau : grid.levels()) tau_factor = std::max(tau_factor, std::max(tau, 1.0 - tau));
  double best = 0.0;
  for (std::size_t k = 0; k < data.num_experiments(); ++k) {
    const double w = detail::weight_at(weights, k) / static_cast<double>(data.sample_size(k));
    for (Eigen::Index j = 0; j < wd.X[k].cols(); ++j) best = std::max(best, w * wd.X[k].col(j).cwiseAbs().sum());
  }
  return best * tau_factor;
}

/// Separate unpenalized quantile fits per (k, m) on the support columns plus
/// an intercept; slopes outside the support are exactly zero. The reported
/// objective is the pooled loss with unit experiment weights.
inline FitResult fit_unpenalized(const MultiExperimentDataset& data, const QuantileGrid& grid,
                                 const std::vector<std::size_t>& support, const SolverConfig& config = {}) {
  config.validate();
  const std::size_t K = data.num_experiments();
  const std::size_t M = grid.size();
  const std::size_t p = data.num_predictors();
  for (auto j : support) detail::require(j < p, ErrorCode::IndexOutOfRange, "support index out of range");
  std::vector<std::size_t> coords(support);
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());

  const auto D = static_cast<Eigen::Index>(coords.size() + 1);
  if (config.warm_start) detail::check_shapes(data, grid, *config.warm_start);

  FitResult result;
  result.coefficients = CoefficientTensor(K, M, p);
  bool converged = true;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& e = data.experiment(k);
    const auto n = e.response.size();
    const double c = 1.0 / static_cast<double>(n);
    Eigen::MatrixXd A(n, D);
    A.col(0).setOnes();
    for (std::size_t s = 0; s < coords.size(); ++s) A.col(static_cast<Eigen::Index>(s) + 1) = e.design.col(static_cast<Eigen::Index>(coords[s]));
    const bool walkable = D <= n && static_cast<std::size_t>(D) <= config.max_refinement_dim;
    for (std::size_t m = 0; m < M; ++m) {
      Eigen::VectorXd beta = Eigen::VectorXd::Zero(D);
      if (config.warm_start) {
        beta(0) = config.warm_start->intercept(k, m);
        for (std::size_t s = 0; s < coords.size(); ++s) beta(static_cast<Eigen::Index>(s) + 1) = config.warm_start->slope(k, m, coords[s]);
      }
      bool done = false;
      if (walkable && config.exact_refinement) {
        const Eigen::VectorXd pos = Eigen::VectorXd::Constant(n, c * grid[m]);
        const Eigen::VectorXd neg = Eigen::VectorXd::Constant(n, c * (1.0 - grid[m]));
        detail::VertexWalk walk(A, e.response, pos, neg, config.residual_zero_tol);
        done = walk.run(beta);
      }
      if (!done) {
        // Rank-deficient or oversized supports: coordinate descent from the
        // best point so far.
        detail::SubproblemSolver blk(e.design, e.response, grid[m], c, config);
        blk.set_free(coords);
        Eigen::VectorXd start_theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
        for (std::size_t s = 0; s < coords.size(); ++s) start_theta(static_cast<Eigen::Index>(coords[s])) = beta(static_cast<Eigen::Index>(s) + 1);
        blk.set_state(beta(0), start_theta);
        converged = blk.solve() && converged;
        beta(0) = blk.intercept();
        for (std::size_t s = 0; s < coords.size(); ++s) beta(static_cast<Eigen::Index>(s) + 1) = blk.theta()(static_cast<Eigen::Index>(coords[s]));
      }
      result.coefficients.intercept(k, m) = beta(0);
      for (std::size_t s = 0; s < coords.size(); ++s) result.coefficients.slope(k, m, coords[s]) = beta(static_cast<Eigen::Index>(s) + 1);
    }
  }
  result.residuals = compute_residuals(data, grid, result.coefficients);
  result.objective_value = pooled_loss(data, grid, result.coefficients);
  result.working_objective = result.objective_value;
  result.objective_history = {result.objective_value};
  result.iterations = 1;
  result.converged = converged;
  return result;
}

namespace detail {

/// Majorize-minimize fit of the penalized objective. Each outer step replaces
/// Omega_lambda by its tangent at the previous iterate, giving a weighted-L1
/// problem that separates over (k, m) blocks and is solved by coordinate
/// descent with exact refinement.
inline FitResult mm_fit(const MultiExperimentDataset& data, const QuantileGrid& grid, const PenaltySpec& penalty,
                        const SolverConfig& config) {
  const std::size_t K = data.num_experiments();
  const std::size_t M = grid.size();
  const std::size_t p = data.num_predictors();
  penalty.validate(K);
  const bool penalized = penalty.family != PenaltyFamily::none && penalty.lambda > 0.0;
  const auto wd = detail::make_working_design(data, config.standardize && penalized);

  CoefficientTensor start(K, M, p);
  if (config.warm_start) {
    detail::check_shapes(data, grid, *config.warm_start);
    start = detail::to_working(*config.warm_start, wd);
  }

  std::vector<detail::SubproblemSolver> blocks;
  blocks.reserve(K * M);
  std::vector<bool> skip(K, false);
  for (std::size_t k = 0; k < K; ++k) {
    const double w = penalty.weight(k);
    skip[k] = w == 0.0;
    const double c = w / static_cast<double>(data.sample_size(k));
    for (std::size_t m = 0; m < M; ++m) {
      blocks.emplace_back(wd.X[k], data.experiment(k).response, grid[m], c, config);
      if (skip[k]) {
        blocks.back().set_free({});
        blocks.back().set_state(0.0, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p)));
      } else {
        blocks.back().set_state(start.intercept(k, m), detail::slope_vector(start, k, m));
      }
    }
  }

  auto group_norms = [&]() {
    std::vector<double> g(p, 0.0);
    for (const auto& blk : blocks) {
      for (std::size_t j = 0; j < p; ++j) g[j] += std::abs(blk.theta()(static_cast<Eigen::Index>(j)));
    }
    return g;
  };
  auto current_objective = [&]() {
    double loss = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (skip[k]) continue;
      const double c = penalty.weight(k) / static_cast<double>(data.sample_size(k));
      for (std::size_t m = 0; m < M; ++m) loss += c * detail::check_sum(grid[m], blocks[k * M + m].residual());
    }
    double pen = 0.0;
    if (penalized) {
      for (double g : group_norms()) pen += penalty_value(penalty, g);
    }
    return loss + pen;
  };

  FitResult result;
  double previous = current_objective();
  result.objective_history.push_back(previous);
  bool converged = false;
  bool inner_ok = true;
  int outer = 0;
  while (outer < config.max_outer_iterations) {
    ++outer;
    Eigen::VectorXd omega = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    if (penalized) {
      const auto g = group_norms();
      for (std::size_t j = 0; j < p; ++j) omega(static_cast<Eigen::Index>(j)) = penalty_deriv(penalty, g[j]);
    }
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (skip[b / M]) continue;
      blocks[b].set_penalty_weights(omega);
      inner_ok = blocks[b].solve() && inner_ok;
    }
    const double now = current_objective();
    result.objective_history.push_back(now);
    const bool settled = std::abs(previous - now) <= config.objective_rel_tol * std::abs(previous);
    previous = now;
    if (settled) {
      converged = true;
      break;
    }
  }

  CoefficientTensor working(K, M, p);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t m = 0; m < M; ++m) {
      auto& blk = blocks[k * M + m];
      blk.snap(config.snap_tol);
      working.intercept(k, m) = blk.intercept();
      for (std::size_t j = 0; j < p; ++j) working.slope(k, m, j) = blk.theta()(static_cast<Eigen::Index>(j));
    }
  }
  result.working_objective = current_objective();
  result.coefficients = detail::to_raw(working, wd);
  if (wd.standardized) result.standardized_coefficients = working;
  result.residuals = compute_residuals(data, grid, result.coefficients);
  result.objective_value = objective(data, grid, result.coefficients, penalty);
  result.iterations = outer;
  result.converged = converged && inner_ok;
  return result;
}

}  // namespace detail

/// Penalized fit by majorize-minimize from config.warm_start (or zero). MM
/// only finds a local minimum of the nonconvex objective; with at most
/// config.multistart_max_predictors predictors it also starts from the
/// unpenalized fit of every nonempty support and keeps the lowest working
/// objective.
inline FitResult fit_penalized(const MultiExperimentDataset& data, const QuantileGrid& grid, const PenaltySpec& penalty,
                               const SolverConfig& config = {}) {
  config.validate();
  auto best = detail::mm_fit(data, grid, penalty, config);
  const std::size_t p = data.num_predictors();
  const bool penalized = penalty.family != PenaltyFamily::none && penalty.lambda > 0.0;
  if (!penalized || p == 0 || p > config.multistart_max_predictors) return best;
  SolverConfig plain = config;
  plain.warm_start.reset();
  for (std::size_t mask = 1; mask < (std::size_t{1} << p); ++mask) {
    std::vector<std::size_t> support;
    for (std::size_t j = 0; j < p; ++j) {
      if (mask >> j & 1) support.push_back(j);
    }
    SolverConfig from = plain;
    from.warm_start = fit_unpenalized(data, grid, support, plain).coefficients;
    auto fit = detail::mm_fit(data, grid, penalty, from);
    if (fit.working_objective < best.working_objective - 1e-12 * std::abs(best.working_objective)) best = std::move(fit);
  }
  return best;
}

/// Penalized fits along a lambda path, returned in the order of `lambdas`.
/// The first sweep runs down the path, warm-starting each fit from the
/// previous (larger) lambda. Nonconvex penalties leave that sweep in local
/// minima, typically an underfitted model whose weak groups never clear the
/// entry threshold. Further sweeps alternate direction and restart a lambda
/// from a neighbour whose fit changed since it was last tried, keeping the
/// restart only when the objective drops; they stop once a sweep changes
/// nothing or after config.path_sweeps sweeps.
inline std::vector<FitResult> fit_path(const MultiExperimentDataset& data, const QuantileGrid& grid,
                                       const PenaltySpec& base, const std::vector<double>& lambdas,
                                       const SolverConfig& config = {}) {
  const std::size_t L = lambdas.size();
  std::vector<std::size_t> order(L);
  for (std::size_t i = 0; i < L; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lambdas[a] > lambdas[b]; });
  std::vector<std::optional<FitResult>> fits(L);
  auto penalty_at = [&](std::size_t i) {
    PenaltySpec pen = base;
    pen.lambda = lambdas[i];
    return pen;
  };
  // version[r] counts accepted fits at path position r; tried[r][d] is the
  // neighbour version last used as a start (d = 0 from above, 1 from below).
  std::vector<int> version(L, 0);
  std::vector<std::array<int, 2>> tried(L, {-1, -1});
  SolverConfig cfg = config;
  for (std::size_t r = 0; r < L; ++r) {
    fits[order[r]] = fit_penalized(data, grid, penalty_at(order[r]), cfg);
    cfg.warm_start = fits[order[r]]->coefficients;
    if (r > 0) tried[r][0] = version[r - 1];
  }
  for (std::size_t sweep = 1; sweep < config.path_sweeps && L > 1; ++sweep) {
    const bool upward = sweep % 2 == 1;
    bool changed = false;
    for (std::size_t step = 1; step < L; ++step) {
      const std::size_t r = upward ? L - 1 - step : step;
      const std::size_t nb = upward ? r + 1 : r - 1;
      const int d = upward ? 1 : 0;
      if (tried[r][d] == version[nb]) continue;
      tried[r][d] = version[nb];
      cfg.warm_start = fits[order[nb]]->coefficients;
      auto alt = fit_penalized(data, grid, penalty_at(order[r]), cfg);
      const double cur = fits[order[r]]->working_objective;
      if (alt.working_objective < cur - 1e-12 * std::max(1.0, std::abs(cur))) {
        fits[order[r]] = std::move(alt);
        ++version[r];
        changed = true;
      }
    }
    if (!changed) break;
  }
  std::vector<FitResult> out;
  out.reserve(L);
  for (auto& f : fits) out.push_back(std::move(*f));
  return out;
}

/// b_km + X theta_km for every row of `rows`.
inline Eigen::VectorXd predict(const CoefficientTensor& coefs, const Eigen::MatrixXd& rows, std::size_t k,
                               std::size_t m) {
  detail::require(static_cast<std::size_t>(rows.cols()) == coefs.num_predictors(), ErrorCode::DimensionMismatch,
                  "prediction rows must have one column per predictor");
  Eigen::VectorXd out = rows * detail::slope_vector(coefs, k, m);
  out.array() += coefs.intercept(k, m);
  return out;
}

struct PredictionError {
  /// sum_m sum_i rho_m(held-out residual) for each experiment.
  std::vector<double> per_experiment;
  double total = 0.0;
};

inline PredictionError prediction_error(const MultiExperimentDataset& holdout, const QuantileGrid& grid,
                                        const CoefficientTensor& coefs) {
  detail::check_shapes(holdout, grid, coefs);
  PredictionError out;
  for (std::size_t k = 0; k < holdout.num_experiments(); ++k) {
    const auto& e = holdout.experiment(k);
    double sum = 0.0;
    for (std::size_t m = 0; m < grid.size(); ++m) {
      sum += detail::check_sum(grid[m], Eigen::VectorXd(e.response - predict(coefs, e.design, k, m)));
    }
    out.per_experiment.push_back(sum);
    out.total += sum;
  }
  return out;
}

}  // namespace mqsel
