#pragma once

// Verification of the Hessian lower bound on log densities, the scalar
// recursion behind it, the one-step and multi-step Harnack bounds, and the
// geodesic chain linking them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "jkolab/error.hpp"
#include "jkolab/fourier.hpp"
#include "jkolab/jko.hpp"
#include "jkolab/torus.hpp"

namespace jkolab {

/// a_k = smallest eigenvalue of Hess log rho_k over all nodes, k = 0..N.
inline std::vector<double> hessian_lower_bounds(const JkoTrajectory& traj) {
  std::vector<double> a;
  for (const auto& rho : traj.densities()) a.push_back(min_eig_stats(hessian(rho.log())).global_min);
  return a;
}

// ---------------------------------------------------------------------------
// Differential Harnack
// ---------------------------------------------------------------------------

struct DiffHarnackRow {
  int k = 0;
  double t = 0.0;
  double a = 0.0;
  double bound = 0.0;  ///< -C / (tau (k+1))
  double slack = 0.0;  ///< a - bound
  bool pass = false;
};

struct DiffHarnackReport {
  double C = 1.0;
  double tol_abs = 0.0;
  double tol_rel = 0.0;
  std::vector<DiffHarnackRow> rows;
  bool pass = true;
  double worst_slack = std::numeric_limits<double>::infinity();
  std::optional<double> smallest_feasible_C;  ///< empty when even C = 1 fails
};

namespace detail {
inline bool diff_harnack_holds(std::span<const double> a, double tau, double C, double tol_abs, double tol_rel) {
  for (std::size_t k = 1; k < a.size(); ++k) {
    double bound = -C / (tau * static_cast<double>(k + 1));
    if (a[k] - bound < -(tol_abs + tol_rel * std::abs(bound))) return false;
  }
  return true;
}
}  // namespace detail

/// Checks a_k >= -C / (tau (k+1)) for k = 1..N given a_0..a_N. A row passes
/// when its slack is at least -(tol_abs + tol_rel |bound|).
inline DiffHarnackReport check_diff_harnack(std::span<const double> a, double tau, double C = 1.0,
                                            double tol_abs = 0.0, double tol_rel = 1e-3) {
  require(tau > 0.0, ErrorCode::invalid_argument, "tau must be positive");
  require(C >= 0.5 && C <= 1.0, ErrorCode::invalid_argument, "C must lie in [1/2, 1]");
  require(tol_abs >= 0.0 && tol_rel >= 0.0, ErrorCode::invalid_argument, "tolerances must be non-negative");
  DiffHarnackReport rep{C, tol_abs, tol_rel};
  for (std::size_t k = 1; k < a.size(); ++k) {
    DiffHarnackRow row;
    row.k = static_cast<int>(k);
    row.t = tau * static_cast<double>(k);
    row.a = a[k];
    row.bound = -C / (tau * static_cast<double>(k + 1));
    row.slack = row.a - row.bound;
    row.pass = row.slack >= -(tol_abs + tol_rel * std::abs(row.bound));
    rep.pass = rep.pass && row.pass;
    rep.worst_slack = std::min(rep.worst_slack, row.slack);
    rep.rows.push_back(row);
  }
  if (detail::diff_harnack_holds(a, tau, 0.5, tol_abs, tol_rel)) {
    rep.smallest_feasible_C = 0.5;
  } else if (detail::diff_harnack_holds(a, tau, 1.0, tol_abs, tol_rel)) {
    double lo = 0.5, hi = 1.0;
    while (hi - lo > 1e-3) {
      double mid = 0.5 * (lo + hi);
      (detail::diff_harnack_holds(a, tau, mid, tol_abs, tol_rel) ? hi : lo) = mid;
    }
    rep.smallest_feasible_C = hi;
  }
  return rep;
}

inline DiffHarnackReport check_diff_harnack(const JkoTrajectory& traj, double C = 1.0, double tol_abs = 0.0,
                                            double tol_rel = 1e-3) {
  auto a = hessian_lower_bounds(traj);
  return check_diff_harnack(a, traj.tau(), C, tol_abs, tol_rel);
}

// ---------------------------------------------------------------------------
// Scalar recursion
// ---------------------------------------------------------------------------

struct RecursionRow {
  int k = 0;
  double a_prev = 0.0;
  double a = 0.0;
  double lhs = std::nan("");  ///< (1 - sqrt(1 - 4 tau a_{k-1})) / 2
  double rhs = std::nan("");  ///< tau a_k / (1 + tau a_k)
  bool satisfied = false;
  bool skipped = false;       ///< 1 - 4 tau a_{k-1} < 0
};

struct RecursionReport {
  double tol_abs = 0.0;
  std::vector<RecursionRow> rows;
  bool pass = true;
  double worst_margin = std::numeric_limits<double>::infinity();  ///< min rhs - lhs over evaluated rows
  int skipped = 0;
};

/// Verifies (1 - sqrt(1 - 4 tau a_{k-1}))/2 <= tau a_k / (1 + tau a_k) for k = 1..N.
inline RecursionReport check_recursion(std::span<const double> a, double tau, double tol_abs = 1e-6) {
  require(tau > 0.0, ErrorCode::invalid_argument, "tau must be positive");
  RecursionReport rep{tol_abs};
  for (std::size_t k = 1; k < a.size(); ++k) {
    if (!(1.0 + tau * a[k] > 0.0))
      throw Error(ErrorCode::positivity_violated,
                  "1 + tau a_k = " + std::to_string(1.0 + tau * a[k]) + " at step " + std::to_string(k));
  }
  for (std::size_t k = 1; k < a.size(); ++k) {
    RecursionRow row;
    row.k = static_cast<int>(k);
    row.a_prev = a[k - 1];
    row.a = a[k];
    double radicand = 1.0 - 4.0 * tau * a[k - 1];
    if (radicand < 0.0) {
      row.skipped = true;
      ++rep.skipped;
    } else {
      row.lhs = 0.5 * (1.0 - std::sqrt(radicand));
      row.rhs = tau * a[k] / (1.0 + tau * a[k]);
      row.satisfied = row.lhs <= row.rhs + tol_abs;
      rep.pass = rep.pass && row.satisfied;
      rep.worst_margin = std::min(rep.worst_margin, row.rhs - row.lhs);
    }
    rep.rows.push_back(row);
  }
  return rep;
}

inline RecursionReport check_recursion(const JkoTrajectory& traj, double tol_abs = 1e-6) {
  auto a = hessian_lower_bounds(traj);
  return check_recursion(a, traj.tau(), tol_abs);
}

struct LemmaRow {
  int k = 0;
  double lhs = 0.0;  ///< (1 - s)/(1 + s), s = sqrt(1 + 4C/k)
  double rhs = 0.0;  ///< -C/(k+1)
  bool inequality = false;
  bool threshold = false;  ///< k >= (1-C)^2/(2C-1)
  bool agree = false;
};

struct LemmaTable {
  double C = 1.0;
  double threshold = 0.0;
  std::vector<LemmaRow> rows;
  bool all_agree = true;
};

/// Evaluates both sides of the elementary equivalence
///   (1 - s)/(1 + s) >= -C/(k+1)  <=>  k >= (1-C)^2/(2C-1)
/// for k = 1..k_max.
inline LemmaTable scalar_lemma(double C, int k_max) {
  if (!(C > 0.5))
    throw Error(ErrorCode::threshold_undefined, "(1-C)^2/(2C-1) needs C > 1/2, got C=" + std::to_string(C));
  require(C <= 1.0, ErrorCode::invalid_argument, "C must not exceed 1");
  require(k_max >= 1, ErrorCode::invalid_argument, "k_max must be at least 1");
  LemmaTable t{C, (1.0 - C) * (1.0 - C) / (2.0 * C - 1.0)};
  for (int k = 1; k <= k_max; ++k) {
    LemmaRow row;
    row.k = k;
    double s = std::sqrt(1.0 + 4.0 * C / k);
    row.lhs = (1.0 - s) / (1.0 + s);
    row.rhs = -C / (k + 1.0);
    row.inequality = row.lhs >= row.rhs;
    row.threshold = k >= t.threshold;
    row.agree = row.inequality == row.threshold;
    t.all_agree = t.all_agree && row.agree;
    t.rows.push_back(row);
  }
  return t;
}

// ---------------------------------------------------------------------------
// One-step Harnack bound
// ---------------------------------------------------------------------------

/// ((k+1)/(k+1-C))^n.
inline double step_factor(int k, double C, int dim) {
  return std::pow((k + 1.0) / (k + 1.0 - C), dim);
}

struct StepHarnackRow {
  std::size_t x = 0;
  std::size_t y = 0;
  double lhs = 0.0;    ///< rho_{k-1}(x)
  double rhs = 0.0;    ///< step_factor * exp(d^2/(2 tau)) * rho_k(y)
  double ratio = 0.0;  ///< lhs / rhs
  bool pass = false;
};

struct StepHarnackReport {
  int k = 0;
  double C = 1.0;
  double tol_rel = 0.0;
  std::size_t evaluated = 0;
  double worst_ratio = 0.0;
  StepHarnackRow worst;
  std::vector<StepHarnackRow> violations;
  bool pass = true;
};

/// rho_{k-1}(x) <= ((k+1)/(k+1-C))^n exp(d^2(x,y)/(2 tau)) rho_k(y) on the
/// given node pairs (all pairs when `pairs` is empty).
inline StepHarnackReport check_step_harnack(const DensityField& rho_prev, const DensityField& rho_next, int k,
                                            double tau, double C = 1.0,
                                            std::span<const std::pair<std::size_t, std::size_t>> pairs = {},
                                            double tol_rel = 1e-3) {
  require_same_grid(rho_prev.grid(), rho_next.grid());
  require(k >= 1 && tau > 0.0 && C >= 0.5 && C <= 1.0, ErrorCode::invalid_argument,
          "need k >= 1, tau > 0 and C in [1/2, 1]");
  const TorusGrid& grid = rho_prev.grid();
  const double log_factor = std::log(step_factor(k, C, grid.dim()));
  StepHarnackReport rep{k, C, tol_rel};
  auto visit = [&](std::size_t x, std::size_t y) {
    double d2 = grid.distance_sq(x, y);
    double log_rhs = log_factor + d2 / (2.0 * tau) + std::log(rho_next[y]);
    StepHarnackRow row{x, y, rho_prev[x], std::exp(log_rhs), std::exp(std::log(rho_prev[x]) - log_rhs), false};
    row.pass = row.ratio <= 1.0 + tol_rel;
    ++rep.evaluated;
    if (row.ratio > rep.worst_ratio || rep.evaluated == 1) {
      rep.worst_ratio = row.ratio;
      rep.worst = row;
    }
    if (!row.pass) {
      rep.pass = false;
      if (rep.violations.size() < 100) rep.violations.push_back(row);
    }
  };
  if (pairs.empty()) {
    for (std::size_t x = 0; x < grid.node_count(); ++x)
      for (std::size_t y = 0; y < grid.node_count(); ++y) visit(x, y);
  } else {
    for (const auto& [x, y] : pairs) {
      require(x < grid.node_count() && y < grid.node_count(), ErrorCode::invalid_argument, "node out of range");
      visit(x, y);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Harnack inequality between two times
// ---------------------------------------------------------------------------

/// Spatial nodes times (t1, t2) pairs; every combination is one tuple.
struct HarnackSamples {
  std::vector<std::size_t> nodes;
  std::vector<std::pair<double, double>> times;
};

/// Full node set when M^n <= node_limit, otherwise `per_dim` nodes per axis
/// at a fixed stride with a seed-dependent offset. For every admissible
/// (k1, k2) two time pairs are taken: interval midpoints, and t1 near the end
/// of its interval with t2 at the start of its own (the smallest time factor).
inline HarnackSamples default_harnack_samples(const JkoTrajectory& traj, std::uint64_t seed = 0,
                                              std::size_t node_limit = 4096, int per_dim = 16) {
  const TorusGrid& grid = traj.grid();
  HarnackSamples s;
  const int m = grid.points_per_dim();
  if (grid.node_count() <= node_limit || per_dim >= m) {
    for (std::size_t i = 0; i < grid.node_count(); ++i) s.nodes.push_back(i);
  } else {
    int stride = m / per_dim;
    // splitmix64 step for a reproducible offset
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    z ^= z >> 31;
    int offset = static_cast<int>(z % static_cast<std::uint64_t>(stride));
    for (int a = 0; a < per_dim; ++a) {
      if (grid.dim() == 1) {
        s.nodes.push_back(grid.flat_index({offset + a * stride, 0}));
        continue;
      }
      for (int b = 0; b < per_dim; ++b) s.nodes.push_back(grid.flat_index({offset + a * stride, offset + b * stride}));
    }
  }
  const double tau = traj.tau();
  const int n = traj.steps();
  for (int k1 = 3; k1 <= n; ++k1)
    for (int k2 = k1; k2 <= n; ++k2) {
      std::pair<double, double> mid{(k1 - 0.5) * tau, std::min((k2 + 0.5) * tau, traj.config().K)};
      std::pair<double, double> tight{(k1 - 0.05) * tau, k2 * tau};
      for (auto tp : {mid, tight})
        if (tp.second - tp.first - tau > 1e-12 * tau) s.times.push_back(tp);
    }
  return s;
}

struct HarnackTuple {
  std::size_t x = 0;
  std::size_t y = 0;
  double t1 = 0.0;
  double t2 = 0.0;
  int k1 = 0;
  int k2 = 0;
  double lhs = 0.0;    ///< u_{t1}(x) = rho_{k1-1}(x)
  double rhs = 0.0;    ///< ((t2+tau)/t1)^n exp(d^2/(2(t2-t1-tau))) u_{t2}(y)
  double ratio = 0.0;
  bool pass = false;
};

struct HarnackReport {
  double tol_rel = 0.0;
  std::size_t evaluated = 0;
  std::size_t rejected_times = 0;  ///< (t1, t2) pairs outside t1 >= 2 tau, t2 - t1 - tau > 0, t2 <= K
  double worst_ratio = 0.0;
  HarnackTuple worst;
  std::vector<HarnackTuple> tuples;      ///< every tuple when the count is at most record_limit
  std::vector<HarnackTuple> violations;  ///< first 100 failing tuples
  bool pass = true;
};

/// Discrete time indices for (t1, t2): k1 = floor(t1/tau) + 1, k2 = floor(t2/tau).
inline std::pair<int, int> harnack_step_indices(double t1, double t2, double tau, int n) {
  int k1 = static_cast<int>(std::floor(t1 / tau + 1e-9)) + 1;
  int k2 = std::min(n, static_cast<int>(std::floor(t2 / tau + 1e-9)));
  return {k1, k2};
}

inline HarnackReport check_harnack_pair(const JkoTrajectory& traj, const HarnackSamples& samples,
                                        double tol_rel = 1e-3, std::size_t record_limit = 10000) {
  const TorusGrid& grid = traj.grid();
  const double tau = traj.tau();
  const int n = traj.steps();
  const int dim = grid.dim();
  HarnackReport rep{tol_rel};
  std::vector<std::pair<double, double>> times;
  for (auto [t1, t2] : samples.times) {
    bool ok = t1 >= 2.0 * tau * (1.0 - 1e-12) && t2 - t1 - tau > 0.0 && t2 <= traj.config().K * (1.0 + 1e-12);
    if (ok) times.emplace_back(t1, t2);
    else ++rep.rejected_times;
  }
  for (std::size_t x : samples.nodes)
    require(x < grid.node_count(), ErrorCode::invalid_argument, "node out of range");
  if (times.empty() || samples.nodes.empty())
    throw Error(ErrorCode::no_admissible_pairs,
                std::to_string(samples.times.size()) + " time pairs given, none with t1 >= 2 tau and t2 - t1 - tau > 0");
  const std::size_t total = times.size() * samples.nodes.size() * samples.nodes.size();
  const bool record = total <= record_limit;
  for (auto [t1, t2] : times) {
    auto [k1, k2] = harnack_step_indices(t1, t2, tau, n);
    const DensityField& u1 = traj[static_cast<std::size_t>(k1 - 1)];
    const DensityField& u2 = traj[static_cast<std::size_t>(k2)];
    const double log_factor = dim * std::log((t2 + tau) / t1);
    const double inv_gap = 1.0 / (2.0 * (t2 - t1 - tau));
    for (std::size_t x : samples.nodes) {
      const double log_lhs = std::log(u1[x]);
      for (std::size_t y : samples.nodes) {
        double log_rhs = log_factor + grid.distance_sq(x, y) * inv_gap + std::log(u2[y]);
        double ratio = std::exp(log_lhs - log_rhs);
        bool pass = ratio <= 1.0 + tol_rel;
        ++rep.evaluated;
        bool worst = ratio > rep.worst_ratio || rep.evaluated == 1;
        if (worst) rep.worst_ratio = ratio;
        if (worst || record || !pass) {
          HarnackTuple tup{x, y, t1, t2, k1, k2, u1[x], std::exp(log_rhs), ratio, pass};
          if (worst) rep.worst = tup;
          if (record) rep.tuples.push_back(tup);
          if (!pass) {
            rep.pass = false;
            if (rep.violations.size() < 100) rep.violations.push_back(tup);
          }
        }
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Geodesic chaining
// ---------------------------------------------------------------------------

struct ChainRecord {
  std::size_t x = 0;
  std::size_t y = 0;
  int k1 = 0;
  int k2 = 0;
  std::vector<double> values;  ///< v_0 = rho_{k1-1}(x) <= v_1 <= ... <= v_L
  double chained = 0.0;        ///< v_L = prod B_k exp(d^2/(2 L tau)) rho_{k2}(y)
  double final_bound = 0.0;    ///< ((k2+1)/(k1+1-C))^n exp(d^2/(2 L tau)) rho_{k2}(y)
  double worst_link_ratio = 0.0;
  bool pass = false;
};

/// Applies the one-step bound L = k2 - k1 + 1 times along the minimizing
/// geodesic from x to y, at the points gamma(m/L). Off-grid densities are
/// interpolated linearly.
inline ChainRecord check_chain(const JkoTrajectory& traj, std::size_t x, std::size_t y, int k1, int k2,
                               double C = 1.0, double tol_rel = 1e-3) {
  require(k1 >= 1 && k2 >= k1 && k2 <= traj.steps(), ErrorCode::invalid_argument, "need 1 <= k1 <= k2 <= N");
  require(C >= 0.5 && C <= 1.0, ErrorCode::invalid_argument, "C must lie in [1/2, 1]");
  const TorusGrid& grid = traj.grid();
  const int dim = grid.dim();
  const double tau = traj.tau();
  const int L = k2 - k1 + 1;
  Point px = grid.node(x), py = grid.node(y);
  Point dir{minimal_image(py[0] - px[0]), dim == 2 ? minimal_image(py[1] - px[1]) : 0.0};
  const double d2 = dir[0] * dir[0] + dir[1] * dir[1];
  const double link_exp = d2 / (static_cast<double>(L) * L) / (2.0 * tau);

  ChainRecord rec{x, y, k1, k2};
  double log_prod = 0.0;
  rec.values.push_back(traj[static_cast<std::size_t>(k1 - 1)][x]);
  rec.pass = true;
  for (int m = 1; m <= L; ++m) {
    const int k = k1 + m - 1;
    log_prod += std::log(step_factor(k, C, dim)) + link_exp;
    double rho_at;
    if (m == L) {
      rho_at = traj[static_cast<std::size_t>(k2)][y];
    } else {
      double s = static_cast<double>(m) / L;
      rho_at = interpolate_linear(traj[static_cast<std::size_t>(k)], {px[0] + s * dir[0], px[1] + s * dir[1]});
    }
    double v = std::exp(log_prod) * rho_at;
    double link = rec.values.back() / v;
    rec.worst_link_ratio = std::max(rec.worst_link_ratio, link);
    if (link > 1.0 + tol_rel) rec.pass = false;
    rec.values.push_back(v);
  }
  rec.chained = rec.values.back();
  rec.final_bound = std::pow((k2 + 1.0) / (k1 + 1.0 - C), dim) * std::exp(d2 / (2.0 * L * tau)) *
                    traj[static_cast<std::size_t>(k2)][y];
  if (rec.chained > rec.final_bound * (1.0 + 1e-12)) rec.pass = false;
  return rec;
}

}  // namespace jkolab
