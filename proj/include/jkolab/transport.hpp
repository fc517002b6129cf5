#pragma once

// Quadratic-cost optimal transport on the flat torus: exact solvers for small
// atomic instances, the entropic scaling solver, and the c-transform with its
// identity and Hessian-transfer checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "jkolab/error.hpp"
#include "jkolab/fourier.hpp"
#include "jkolab/parallel.hpp"
#include "jkolab/torus.hpp"

namespace jkolab {

// ---------------------------------------------------------------------------
// Cost and plans
// ---------------------------------------------------------------------------

/// c(x_i, x_j) = d^2(x_i, x_j) / 2 between grid nodes.
class CostMatrix {
 public:
  explicit CostMatrix(TorusGrid grid) : grid_(grid) {
    const int m = grid.points_per_dim();
    half_sq_.resize(static_cast<std::size_t>(m));
    for (int o = 0; o < m; ++o) {
      double s = std::min(o, m - o) * grid.spacing();
      half_sq_[o] = 0.5 * s * s;
    }
  }

  const TorusGrid& grid() const noexcept { return grid_; }

  /// Half squared distance of a per-axis node offset (any integer).
  double axis_cost(int offset) const noexcept { return half_sq_[grid_.wrap_index(offset)]; }

  double operator()(std::size_t i, std::size_t j) const noexcept {
    MultiIndex a = grid_.multi_index(i), b = grid_.multi_index(j);
    double c = axis_cost(b[0] - a[0]);
    if (grid_.dim() == 2) c += axis_cost(b[1] - a[1]);
    return c;
  }

  /// Largest entry, n/8 on the unit torus.
  double max_entry() const noexcept {
    return grid_.dim() * *std::max_element(half_sq_.begin(), half_sq_.end());
  }

 private:
  TorusGrid grid_;
  std::vector<double> half_sq_;
};

/// Dense coupling between `rows` sources and `cols` targets (row-major).
struct TransportPlan {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> mass;
  double cost_value = 0.0;  ///< sum of gamma_ij d^2_ij (no 1/2, no entropy)

  double operator()(std::size_t i, std::size_t j) const noexcept { return mass[i * cols + j]; }

  std::vector<double> row_sums() const {
    std::vector<double> s(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) s[i] += mass[i * cols + j];
    return s;
  }

  std::vector<double> col_sums() const {
    std::vector<double> s(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) s[j] += mass[i * cols + j];
    return s;
  }

  /// L1 distance of the row and column marginals from the given masses.
  double marginal_violation(std::span<const double> a, std::span<const double> b) const {
    auto r = row_sums();
    auto c = col_sums();
    double v = 0.0;
    for (std::size_t i = 0; i < rows; ++i) v += std::abs(r[i] - a[i]);
    for (std::size_t j = 0; j < cols; ++j) v += std::abs(c[j] - b[j]);
    return v;
  }
};

// ---------------------------------------------------------------------------
// Exact solvers for atomic measures
// ---------------------------------------------------------------------------

/// Finitely many weighted atoms on the torus.
struct DiscreteMeasure {
  int dim = 1;
  std::vector<Point> points;
  std::vector<double> masses;

  std::size_t size() const noexcept { return points.size(); }
  double total_mass() const noexcept { return std::accumulate(masses.begin(), masses.end(), 0.0); }

  static DiscreteMeasure uniform(int dim, std::vector<Point> pts) {
    DiscreteMeasure m{dim, std::move(pts), {}};
    m.masses.assign(m.points.size(), 1.0 / static_cast<double>(m.points.size()));
    return m;
  }
};

/// Squared-distance matrix between the atoms of two measures.
inline std::vector<double> squared_distance_matrix(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  std::vector<double> c(mu.size() * nu.size());
  for (std::size_t i = 0; i < mu.size(); ++i)
    for (std::size_t j = 0; j < nu.size(); ++j)
      c[i * nu.size() + j] = torus_distance_sq(mu.points[i], nu.points[j], mu.dim);
  return c;
}

struct ExactTransport {
  double value = 0.0;
  TransportPlan plan;
  int pivots = 0;
};

/// Transportation simplex (u-v method) started from the north-west corner
/// basis. Exact up to floating-point round-off; no size limit.
inline ExactTransport solve_transport_simplex(std::span<const double> cost, std::span<const double> a,
                                              std::span<const double> b) {
  const std::size_t m = a.size(), n = b.size();
  require(m > 0 && n > 0 && cost.size() == m * n, ErrorCode::invalid_argument,
          "cost matrix shape does not match the marginals");
  struct Cell {
    std::size_t i, j;
    double x;
  };
  std::vector<Cell> basis;
  basis.reserve(m + n - 1);
  std::vector<long> slot(m * n, -1);
  {
    std::vector<double> ra(a.begin(), a.end()), rb(b.begin(), b.end());
    std::size_t i = 0, j = 0;
    while (true) {
      double x = std::max(0.0, std::min(ra[i], rb[j]));
      slot[i * n + j] = static_cast<long>(basis.size());
      basis.push_back({i, j, x});
      ra[i] -= x;
      rb[j] -= x;
      if (i == m - 1 && j == n - 1) break;
      if (i == m - 1) ++j;
      else if (j == n - 1) ++i;
      else if (ra[i] <= rb[j]) ++i;
      else ++j;
    }
  }

  double cmax = 0.0;
  for (double c : cost) cmax = std::max(cmax, std::abs(c));
  const double tol = 1e-12 * std::max(cmax, 1e-300);
  const std::size_t nodes = m + n;
  std::vector<std::vector<std::size_t>> adj(nodes);
  std::vector<double> pot(nodes);
  std::vector<long> parent_edge(nodes);
  std::vector<char> seen(nodes);
  std::vector<std::size_t> queue;
  int pivots = 0;
  const int max_pivots = 50 * static_cast<int>(m * n) + 100;

  auto rebuild_adjacency = [&] {
    for (auto& l : adj) l.clear();
    for (std::size_t e = 0; e < basis.size(); ++e) {
      adj[basis[e].i].push_back(e);
      adj[m + basis[e].j].push_back(e);
    }
  };
  // BFS over the basis tree from `root`, filling potentials and parent edges.
  auto traverse = [&](std::size_t root) {
    std::fill(seen.begin(), seen.end(), 0);
    std::fill(parent_edge.begin(), parent_edge.end(), -1);
    queue.assign(1, root);
    seen[root] = 1;
    pot[root] = 0.0;
    for (std::size_t q = 0; q < queue.size(); ++q) {
      std::size_t v = queue[q];
      for (std::size_t e : adj[v]) {
        std::size_t w = (v < m) ? m + basis[e].j : basis[e].i;
        if (seen[w]) continue;
        seen[w] = 1;
        parent_edge[w] = static_cast<long>(e);
        // u_i + v_j = c_ij on basic cells
        pot[w] = cost[basis[e].i * n + basis[e].j] - pot[v];
        queue.push_back(w);
      }
    }
  };

  while (true) {
    rebuild_adjacency();
    traverse(0);
    double best = -tol;
    std::size_t ei = 0, ej = 0;
    bool found = false;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (slot[i * n + j] >= 0) continue;
        double r = cost[i * n + j] - pot[i] - pot[m + j];
        if (r < best) {
          best = r;
          ei = i;
          ej = j;
          found = true;
        }
      }
    if (!found) break;
    if (++pivots > max_pivots)
      throw Error(ErrorCode::nonconvergence, "transportation simplex exceeded its pivot budget");

    // Path in the tree from row ei to column ej; the entering cell closes it.
    traverse(ei);
    std::vector<std::size_t> path;
    for (std::size_t v = m + ej; v != ei;) {
      std::size_t e = static_cast<std::size_t>(parent_edge[v]);
      path.push_back(e);
      v = (v < m) ? m + basis[e].j : basis[e].i;
    }
    std::reverse(path.begin(), path.end());  // path[0] touches row ei
    double theta = std::numeric_limits<double>::infinity();
    std::size_t leave = 0;
    for (std::size_t k = 0; k < path.size(); k += 2)
      if (basis[path[k]].x < theta) {
        theta = basis[path[k]].x;
        leave = path[k];
      }
    for (std::size_t k = 0; k < path.size(); ++k) basis[path[k]].x += (k % 2 == 0 ? -theta : theta);
    slot[basis[leave].i * n + basis[leave].j] = -1;
    basis[leave] = {ei, ej, theta};
    slot[ei * n + ej] = static_cast<long>(leave);
  }

  ExactTransport out;
  out.plan.rows = m;
  out.plan.cols = n;
  out.plan.mass.assign(m * n, 0.0);
  for (const Cell& c : basis) out.plan.mass[c.i * n + c.j] = std::max(0.0, c.x);
  for (std::size_t k = 0; k < m * n; ++k) out.value += out.plan.mass[k] * cost[k];
  out.plan.cost_value = out.value;
  out.pivots = pivots;
  return out;
}

/// Minimum of sum_i d^2(x_i, y_sigma(i)) / n over all permutations sigma
/// (lexicographic enumeration; first minimizer kept).
inline ExactTransport w2_permutation_search(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  const std::size_t n = mu.size();
  require(n == nu.size() && n > 0, ErrorCode::invalid_argument,
          "permutation search needs equal atom counts");
  auto c = squared_distance_matrix(mu, nu);
  std::vector<std::size_t> sigma(n), best_sigma;
  std::iota(sigma.begin(), sigma.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += c[i * n + sigma[i]];
    if (s < best) {
      best = s;
      best_sigma = sigma;
    }
  } while (std::next_permutation(sigma.begin(), sigma.end()));
  ExactTransport out;
  out.value = best / static_cast<double>(n);
  out.plan.rows = out.plan.cols = n;
  out.plan.mass.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out.plan.mass[i * n + best_sigma[i]] = 1.0 / static_cast<double>(n);
  out.plan.cost_value = out.value;
  return out;
}

inline constexpr std::size_t kMaxExactAtoms = 8;

inline bool is_uniform(const DiscreteMeasure& m) {
  for (double w : m.masses)
    if (std::abs(w - m.masses.front()) > 1e-15) return false;
  return true;
}

/// Exact squared Wasserstein distance between two small atomic measures.
/// Equal-count uniform measures go through the permutation search, all others
/// through the transportation simplex.
inline ExactTransport w2_exact_small(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  require(mu.dim == nu.dim, ErrorCode::invalid_argument, "measures live on different tori");
  require(!mu.masses.empty() && !nu.masses.empty(), ErrorCode::invalid_argument, "empty measure");
  require(mu.masses.size() == mu.points.size() && nu.masses.size() == nu.points.size(),
          ErrorCode::invalid_argument, "atoms and masses differ in count");
  if (mu.size() > kMaxExactAtoms || nu.size() > kMaxExactAtoms)
    throw Error(ErrorCode::instance_too_large,
                std::to_string(mu.size()) + " x " + std::to_string(nu.size()) + " atoms, limit is " +
                    std::to_string(kMaxExactAtoms));
  if (std::abs(mu.total_mass() - nu.total_mass()) > 1e-12)
    throw Error(ErrorCode::unbalanced, "total masses " + std::to_string(mu.total_mass()) + " and " +
                                           std::to_string(nu.total_mass()));
  if (mu.size() == nu.size() && is_uniform(mu) && is_uniform(nu)) return w2_permutation_search(mu, nu);
  auto c = squared_distance_matrix(mu, nu);
  return solve_transport_simplex(c, mu.masses, nu.masses);
}

// ---------------------------------------------------------------------------
// Gibbs kernel on the grid
// ---------------------------------------------------------------------------

enum class KernelDomain { automatic, scaling, log };

/// exp(-c/eps) for the half-squared torus cost. The kernel factorizes across
/// coordinates, so it is applied one axis at a time (O(M^{n+1})). Entries with
/// d^2/(2 eps) above `cutoff` are dropped (cutoff = inf keeps all).
class TorusGibbsKernel {
 public:
  TorusGibbsKernel(TorusGrid grid, double eps, double cutoff = std::numeric_limits<double>::infinity())
      : grid_(grid), eps_(eps) {
    require(eps > 0.0 && std::isfinite(eps), ErrorCode::invalid_argument, "kernel eps must be positive");
    CostMatrix c(grid);
    for (int o = 0; o < grid.points_per_dim(); ++o) {
      double e = c.axis_cost(o) / eps;
      if (e > cutoff) continue;
      offsets_.push_back(o);
      log_k_.push_back(-e);
      k_.push_back(std::exp(-e));
    }
  }

  const TorusGrid& grid() const noexcept { return grid_; }
  double eps() const noexcept { return eps_; }
  std::size_t band() const noexcept { return offsets_.size(); }

  /// True when some retained entry is zero in double precision.
  bool underflows() const noexcept {
    return std::any_of(k_.begin(), k_.end(), [](double v) { return v == 0.0; });
  }

  /// Calls fn(i, j, log K_ij, d^2_ij) for every retained entry, rows in order.
  template <class F>
  void for_each_entry(F&& fn) const {
    const std::size_t band = offsets_.size();
    for (std::size_t i = 0; i < grid_.node_count(); ++i) {
      MultiIndex a = grid_.multi_index(i);
      if (grid_.dim() == 1) {
        for (std::size_t t = 0; t < band; ++t)
          fn(i, grid_.flat_index({a[0] + offsets_[t], 0}), log_k_[t], -2.0 * eps_ * log_k_[t]);
        continue;
      }
      for (std::size_t t0 = 0; t0 < band; ++t0)
        for (std::size_t t1 = 0; t1 < band; ++t1) {
          std::size_t j = grid_.flat_index({a[0] + offsets_[t0], a[1] + offsets_[t1]});
          double lk = log_k_[t0] + log_k_[t1];
          fn(i, j, lk, -2.0 * eps_ * lk);
        }
    }
  }

  /// out = K v (K is symmetric).
  void apply(std::span<const double> v, std::span<double> out) const {
    if (grid_.dim() == 1) {
      apply_axis(v, out, 1, 1, grid_.points_per_dim());
      return;
    }
    const std::size_t m = grid_.points_per_dim();
    scratch_.resize(v.size());
    apply_axis(v, scratch_, m, 1, m);  // along the fast axis
    apply_axis(scratch_, out, m, m, m);
  }

  /// out_i = log sum_j exp(-c_ij/eps + w_j).
  void log_apply(std::span<const double> w, std::span<double> out) const {
    if (grid_.dim() == 1) {
      log_apply_axis(w, out, 1, 1, grid_.points_per_dim());
      return;
    }
    const std::size_t m = grid_.points_per_dim();
    scratch_.resize(w.size());
    log_apply_axis(w, scratch_, m, 1, m);
    log_apply_axis(scratch_, out, m, m, m);
  }

 private:
  // Lines are indexed by `line * line_step`; elements along the axis by `stride`.
  void apply_axis(std::span<const double> in, std::span<double> out, std::size_t lines,
                  std::size_t stride, std::size_t m) const {
    const std::size_t line_step = (stride == 1) ? m : 1;
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = l * line_step;
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t t = 0; t < offsets_.size(); ++t) {
          std::size_t j = i + offsets_[t];
          if (j >= m) j -= m;
          acc += k_[t] * in[base + j * stride];
        }
        out[base + i * stride] = acc;
      }
    }
  }

  void log_apply_axis(std::span<const double> in, std::span<double> out, std::size_t lines,
                      std::size_t stride, std::size_t m) const {
    const std::size_t line_step = (stride == 1) ? m : 1;
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = l * line_step;
      for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < offsets_.size(); ++t) {
          std::size_t j = i + offsets_[t];
          if (j >= m) j -= m;
          mx = std::max(mx, log_k_[t] + in[base + j * stride]);
        }
        double acc = 0.0;
        for (std::size_t t = 0; t < offsets_.size(); ++t) {
          std::size_t j = i + offsets_[t];
          if (j >= m) j -= m;
          acc += std::exp(log_k_[t] + in[base + j * stride] - mx);
        }
        out[base + i * stride] = mx + std::log(acc);
      }
    }
  }

  TorusGrid grid_;
  double eps_;
  std::vector<int> offsets_;
  std::vector<double> k_;
  std::vector<double> log_k_;
  mutable std::vector<double> scratch_;
};

// ---------------------------------------------------------------------------
// Entropic solver
// ---------------------------------------------------------------------------

/// start, start*factor, ... down to `end` (appended exactly).
inline std::vector<double> geometric_schedule(double start, double end, double factor = 0.5) {
  require(start >= end && end > 0.0 && factor > 0.0 && factor < 1.0, ErrorCode::invalid_argument,
          "bad geometric schedule");
  std::vector<double> s;
  for (double e = start; e > end * (1.0 + 1e-12); e *= factor) s.push_back(e);
  s.push_back(end);
  return s;
}

struct SinkhornOptions {
  std::vector<double> eps_schedule = geometric_schedule(1e-1, 1e-4, 0.5);
  int max_iters = 200000;        ///< per schedule stage
  double tol = 1e-9;             ///< L1 marginal violation at the terminal stage
  double stage_tol = 1e-6;       ///< looser target for intermediate stages
  KernelDomain domain = KernelDomain::automatic;
  double log_domain_below = 1e-3;  ///< automatic mode switches to log updates below this eps
  bool build_plan = true;
};

struct SinkhornResult {
  double value = 0.0;  ///< transport cost sum gamma_ij d^2_ij, entropy excluded
  TransportPlan plan;  ///< empty when build_plan is false
  GridField f;         ///< gamma_ij = exp((f_i + g_j - c_ij)/eps) with masses rho h^n
  GridField g;
  double eps = 0.0;
  double marginal_violation = 0.0;
  long iterations = 0;
  bool used_log_domain = false;
};

/// Balanced entropic OT between two grid densities with eps-scaling.
inline SinkhornResult sinkhorn(const DensityField& mu, const DensityField& nu, const SinkhornOptions& opt = {}) {
  require_same_grid(mu.grid(), nu.grid());
  require(!opt.eps_schedule.empty(), ErrorCode::invalid_argument, "empty eps schedule");
  for (std::size_t s = 0; s < opt.eps_schedule.size(); ++s) {
    require(opt.eps_schedule[s] > 0.0, ErrorCode::invalid_argument, "eps must be positive");
    if (s > 0)
      require(opt.eps_schedule[s] < opt.eps_schedule[s - 1], ErrorCode::invalid_argument,
              "eps schedule must be decreasing");
  }
  require(opt.tol > 0.0 && opt.max_iters > 0, ErrorCode::invalid_argument, "tol and max_iters must be positive");

  const TorusGrid& grid = mu.grid();
  const std::size_t n = grid.node_count();
  const double hv = grid.cell_volume();
  std::vector<double> a(n), b(n), log_a(n), log_b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = mu[i] * hv;
    b[i] = nu[i] * hv;
    log_a[i] = std::log(a[i]);
    log_b[i] = std::log(b[i]);
  }
  SinkhornResult res{0.0, {}, GridField(grid), GridField(grid)};
  std::vector<double> f(n, 0.0), g(n, 0.0), w(n), lse(n), u(n), v(n), kv(n);
  double err = std::numeric_limits<double>::infinity();

  for (std::size_t stage = 0; stage < opt.eps_schedule.size(); ++stage) {
    const double eps = opt.eps_schedule[stage];
    const bool terminal = stage + 1 == opt.eps_schedule.size();
    const double target = terminal ? opt.tol : std::max(opt.tol, opt.stage_tol);
    TorusGibbsKernel kernel(grid, eps);
    bool log_mode = opt.domain == KernelDomain::log ||
                    (opt.domain == KernelDomain::automatic && eps < opt.log_domain_below);
    if (!log_mode) {
      if (kernel.underflows()) {
        if (opt.domain == KernelDomain::scaling)
          throw Error(ErrorCode::kernel_underflow,
                      "Gibbs kernel entries vanish at eps=" + std::to_string(eps) +
                          "; use a larger terminal eps or log-domain updates");
        log_mode = true;
      }
    }
    long it = 0;
    if (!log_mode) {
      for (std::size_t i = 0; i < n; ++i) {
        u[i] = std::exp(f[i] / eps);
        v[i] = std::exp(g[i] / eps);
      }
      bool underflow = false;
      while (true) {
        kernel.apply(v, kv);
        err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (!(kv[i] > 0.0) || !std::isfinite(kv[i]) || !std::isfinite(u[i])) underflow = true;
          err += std::abs(u[i] * kv[i] - a[i]);
        }
        if (underflow) break;
        if (err <= target) break;
        if (++it > opt.max_iters)
          throw Error(ErrorCode::nonconvergence,
                      "sinkhorn stalled at eps=" + std::to_string(eps) + ", marginal residual " +
                          std::to_string(err),
                      err);
        for (std::size_t i = 0; i < n; ++i) u[i] = a[i] / kv[i];
        kernel.apply(u, kv);
        for (std::size_t i = 0; i < n; ++i) v[i] = b[i] / kv[i];
      }
      if (underflow) {
        if (opt.domain == KernelDomain::scaling)
          throw Error(ErrorCode::kernel_underflow,
                      "scaling factors left double range at eps=" + std::to_string(eps) +
                          "; use a larger terminal eps or log-domain updates",
                      err);
        log_mode = true;  // restart this stage from the stored potentials
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          f[i] = eps * std::log(u[i]);
          g[i] = eps * std::log(v[i]);
        }
      }
    }
    if (log_mode) {
      it = 0;
      res.used_log_domain = true;
      while (true) {
        for (std::size_t i = 0; i < n; ++i) w[i] = g[i] / eps;
        kernel.log_apply(w, lse);
        err = 0.0;
        for (std::size_t i = 0; i < n; ++i) err += std::abs(std::exp(f[i] / eps + lse[i]) - a[i]);
        if (err <= target) break;
        if (++it > opt.max_iters)
          throw Error(ErrorCode::nonconvergence,
                      "sinkhorn stalled at eps=" + std::to_string(eps) + ", marginal residual " +
                          std::to_string(err),
                      err);
        for (std::size_t i = 0; i < n; ++i) f[i] = eps * (log_a[i] - lse[i]);
        for (std::size_t i = 0; i < n; ++i) w[i] = f[i] / eps;
        kernel.log_apply(w, lse);
        for (std::size_t j = 0; j < n; ++j) g[j] = eps * (log_b[j] - lse[j]);
      }
    }
    res.iterations += it;
  }

  const double eps = opt.eps_schedule.back();
  CostMatrix cost(grid);
  if (opt.build_plan) {
    res.plan.rows = res.plan.cols = n;
    res.plan.mass.resize(n * n);
  }
  double value = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double c = cost(i, j);
      double gam = std::exp((f[i] + g[j] - c) / eps);
      value += gam * 2.0 * c;
      if (opt.build_plan) res.plan.mass[i * n + j] = gam;
    }
  res.value = value;
  res.plan.cost_value = value;
  res.eps = eps;
  res.marginal_violation = opt.build_plan ? res.plan.marginal_violation(a, b) : err;
  for (std::size_t i = 0; i < n; ++i) {
    res.f[i] = f[i];
    res.g[i] = g[i];
  }
  return res;
}

// ---------------------------------------------------------------------------
// c-transform
// ---------------------------------------------------------------------------

/// tau * f(x) = min_y [ d^2(x, y)/2 + tau * log rho(y) ].
///
/// `f` and `argmin_map` come from the exact scan over all grid nodes and are
/// the ground truth for the pointwise identities. `smooth_f` and
/// `smooth_argmin` minimize over the continuum against the trigonometric
/// interpolant of log rho, starting from the discrete minimizer; they are what
/// finite-difference derivatives are taken of.
struct CTransformField {
  GridField f;
  std::vector<std::size_t> argmin_map;
  double tau = 0.0;
  GridField smooth_f;
  std::vector<Point> smooth_argmin;
  bool refined = false;
};

struct CTransformOptions {
  bool refine = true;
  int newton_max_iters = 60;
};

struct PointCTransform {
  double f = 0.0;  ///< c-transform value (already divided by tau)
  Point argmin{0.0, 0.0};
  int iterations = 0;
};

/// Continuous c-transform at an arbitrary point x: Newton descent on
/// y -> |y - x|^2/2 + tau L(y) from `guess`, with step halving.
inline PointCTransform c_transform_at(const TrigInterpolant& log_rho, double tau, const Point& x,
                                      const Point& guess, int max_iters = 60) {
  const int dim = log_rho.grid().dim();
  Point y = guess;
  for (int d = 0; d < dim; ++d) y[d] = x[d] + minimal_image(guess[d] - x[d]);
  auto objective = [&](const Point& p, const Jet& jet) {
    double q = 0.0;
    for (int d = 0; d < dim; ++d) q += 0.5 * (p[d] - x[d]) * (p[d] - x[d]);
    return q + tau * jet.value;
  };
  Jet jet = log_rho.eval(y);
  double q = objective(y, jet);
  int it = 0;
  for (; it < max_iters; ++it) {
    Point grad{0.0, 0.0};
    for (int d = 0; d < dim; ++d) grad[d] = (y[d] - x[d]) + tau * jet.grad[d];
    SymMat hm{1.0 + tau * jet.hess.xx, tau * jet.hess.xy, 1.0 + tau * jet.hess.yy};
    Point step{0.0, 0.0};
    if (min_eigenvalue(hm, dim) > 1e-12) {
      if (dim == 1) {
        step[0] = -grad[0] / hm.xx;
      } else {
        double det = hm.xx * hm.yy - hm.xy * hm.xy;
        step[0] = -(hm.yy * grad[0] - hm.xy * grad[1]) / det;
        step[1] = -(-hm.xy * grad[0] + hm.xx * grad[1]) / det;
      }
    } else {
      for (int d = 0; d < dim; ++d) step[d] = -grad[d];
    }
    double step_norm = std::hypot(step[0], step[1]);
    if (step_norm < 1e-15) break;
    bool accepted = false;
    for (int halving = 0; halving < 40; ++halving) {
      Point trial{y[0] + step[0], y[1] + step[1]};
      Jet tj = log_rho.eval(trial);
      double tq = objective(trial, tj);
      if (tq <= q + 1e-15 * (1.0 + std::abs(q))) {
        y = trial;
        jet = tj;
        q = tq;
        accepted = true;
        break;
      }
      step[0] *= 0.5;
      step[1] *= 0.5;
    }
    if (!accepted || step_norm < 1e-13) break;
  }
  PointCTransform out;
  out.f = q / tau;
  for (int d = 0; d < dim; ++d) out.argmin[d] = wrap_unit(y[d]);
  out.iterations = it;
  return out;
}

inline CTransformField c_transform(const GridField& log_rho, double tau, const CTransformOptions& opt = {}) {
  require(tau > 0.0 && std::isfinite(tau), ErrorCode::invalid_argument, "tau must be positive");
  for (double v : log_rho.values())
    require(std::isfinite(v), ErrorCode::invalid_argument, "log density must be finite");
  const TorusGrid& grid = log_rho.grid();
  const std::size_t n = grid.node_count();
  CostMatrix cost(grid);
  CTransformField ct{GridField(grid), std::vector<std::size_t>(n), tau, GridField(grid), std::vector<Point>(n), false};
  parallel_for(n, [&](std::size_t i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double val = cost(i, j) + tau * log_rho[j];
      if (val < best) {
        best = val;
        arg = j;
      }
    }
    ct.f[i] = best / tau;
    ct.argmin_map[i] = arg;
  });
  if (!opt.refine) {
    ct.smooth_f = ct.f;
    for (std::size_t i = 0; i < n; ++i) ct.smooth_argmin[i] = grid.node(ct.argmin_map[i]);
    return ct;
  }
  TrigInterpolant interp(log_rho);
  parallel_for(
      n,
      [&](std::size_t i) {
        auto r = c_transform_at(interp, tau, grid.node(i), grid.node(ct.argmin_map[i]), opt.newton_max_iters);
        ct.smooth_f[i] = r.f;
        ct.smooth_argmin[i] = r.argmin;
      },
      8);
  ct.refined = true;
  return ct;
}

/// Worst signed defects of the c-transform identities, in units of tau*f:
///   ineq:  tau f(x_i) <= d^2(x_i, x_j)/2 + tau log rho(x_j) for all node pairs
///   equal: equality at the recorded minimizer.
struct CTransformIdentityReport {
  double max_ineq_violation = 0.0;  ///< max over pairs of lhs - rhs (> 0 means violated)
  std::size_t worst_ineq_node = 0;
  double max_equal_gap = 0.0;  ///< max over nodes of |lhs - rhs| at the argmin
  std::size_t worst_equal_node = 0;
  // Same checks for the continuum refinement (equality at the off-grid minimizer).
  double smooth_max_ineq_violation = 0.0;
  double smooth_max_equal_gap = 0.0;
};

inline CTransformIdentityReport verify_ctransform_identities(const CTransformField& ct, const GridField& log_rho) {
  require_same_grid(ct.f.grid(), log_rho.grid());
  const TorusGrid& grid = log_rho.grid();
  const std::size_t n = grid.node_count();
  const double tau = ct.tau;
  CostMatrix cost(grid);
  std::vector<double> min_rhs(n);
  parallel_for(n, [&](std::size_t i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) best = std::min(best, cost(i, j) + tau * log_rho[j]);
    min_rhs[i] = best;
  });
  CTransformIdentityReport rep;
  rep.max_ineq_violation = -std::numeric_limits<double>::infinity();
  rep.smooth_max_ineq_violation = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double v = tau * ct.f[i] - min_rhs[i];
    if (v > rep.max_ineq_violation) {
      rep.max_ineq_violation = v;
      rep.worst_ineq_node = i;
    }
    std::size_t j = ct.argmin_map[i];
    double gap = std::abs(tau * ct.f[i] - (cost(i, j) + tau * log_rho[j]));
    if (gap > rep.max_equal_gap) {
      rep.max_equal_gap = gap;
      rep.worst_equal_node = i;
    }
    rep.smooth_max_ineq_violation = std::max(rep.smooth_max_ineq_violation, tau * ct.smooth_f[i] - min_rhs[i]);
  }
  if (ct.refined) {
    TrigInterpolant interp(log_rho);
    std::vector<double> gaps(n);
    parallel_for(
        n,
        [&](std::size_t i) {
          const Point& y = ct.smooth_argmin[i];
          double rhs = 0.5 * torus_distance_sq(grid.node(i), y, grid.dim()) + tau * interp.eval(y).value;
          gaps[i] = std::abs(tau * ct.smooth_f[i] - rhs);
        },
        8);
    rep.smooth_max_equal_gap = *std::max_element(gaps.begin(), gaps.end());
  }
  return rep;
}

enum class FestMode {
  stencil,       ///< finite differences of the continuum c-transform centred at the image point
  interpolated,  ///< node Hessian of smooth_f, periodic-linearly interpolated to the image point
};

struct FestResidual {
  GridField residual;  ///< matrix max-norm per node
  double max = 0.0;
};

/// Hessian-transfer identity
///   Hess f(x + tau grad L(x)) = Hess L(x) (I + tau Hess L(x))^{-1},  L = log rho.
inline FestResidual fest_residual(const CTransformField& ct, const GridField& log_rho, double tau,
                                  FestMode mode = FestMode::stencil) {
  require_same_grid(ct.f.grid(), log_rho.grid());
  require(std::abs(ct.tau - tau) <= 1e-14 * tau, ErrorCode::invalid_argument,
          "c-transform was computed with a different tau");
  const TorusGrid& grid = log_rho.grid();
  const int dim = grid.dim();
  const std::size_t n = grid.node_count();
  const double h = grid.spacing();
  SymMatField hl = hessian(log_rho);
  VectorField gl = gradient(log_rho);

  std::vector<SymMat> rhs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const SymMat& hm = hl[i];
    SymMat a{1.0 + tau * hm.xx, tau * hm.xy, 1.0 + tau * hm.yy};
    if (!(min_eigenvalue(a, dim) > 0.0))
      throw Error(ErrorCode::degenerate_map,
                  "I + tau Hess log rho is not positive definite at node " + std::to_string(i) +
                      "; tau is too large for this density");
    if (dim == 1) {
      rhs[i].xx = hm.xx / a.xx;
    } else {
      double det = a.xx * a.yy - a.xy * a.xy;
      // H A^{-1}; H and A commute so the product is symmetric.
      rhs[i].xx = (hm.xx * a.yy - hm.xy * a.xy) / det;
      rhs[i].xy = (-hm.xx * a.xy + hm.xy * a.xx) / det;
      rhs[i].yy = (-hm.xy * a.xy + hm.yy * a.xx) / det;
    }
  }

  std::vector<SymMat> lhs(n);
  if (mode == FestMode::interpolated) {
    SymMatField hf = hessian(ct.smooth_f);
    GridField cxx = hf.component(0, 0), cxy = hf.component(0, 1), cyy = hf.component(1, 1);
    for (std::size_t i = 0; i < n; ++i) {
      Point x = grid.node(i);
      Point p{x[0] + tau * gl.at(i)[0], x[1] + (dim == 2 ? tau * gl.at(i)[1] : 0.0)};
      lhs[i].xx = interpolate_linear(cxx, p);
      if (dim == 2) {
        lhs[i].xy = interpolate_linear(cxy, p);
        lhs[i].yy = interpolate_linear(cyy, p);
      }
    }
  } else {
    TrigInterpolant interp(log_rho);
    parallel_for(
        n,
        [&](std::size_t i) {
          Point x = grid.node(i);
          Point p{x[0] + tau * gl.at(i)[0], x[1] + (dim == 2 ? tau * gl.at(i)[1] : 0.0)};
          // The minimizer for the image point p is x itself.
          auto f_at = [&](double dx, double dy) {
            Point q{p[0] + dx, p[1] + dy};
            Point guess{x[0] + dx, x[1] + dy};
            return c_transform_at(interp, tau, q, guess).f;
          };
          double f0 = f_at(0.0, 0.0);
          double inv_h2 = 1.0 / (h * h);
          lhs[i].xx = (f_at(h, 0.0) - 2.0 * f0 + f_at(-h, 0.0)) * inv_h2;
          if (dim == 2) {
            lhs[i].yy = (f_at(0.0, h) - 2.0 * f0 + f_at(0.0, -h)) * inv_h2;
            lhs[i].xy = (f_at(h, h) - f_at(h, -h) - f_at(-h, h) + f_at(-h, -h)) * 0.25 * inv_h2;
          }
        },
        4);
  }

  FestResidual out{GridField(grid), 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    SymMat d{lhs[i].xx - rhs[i].xx, lhs[i].xy - rhs[i].xy, lhs[i].yy - rhs[i].yy};
    out.residual[i] = max_abs_entry(d, dim);
    out.max = std::max(out.max, out.residual[i]);
  }
  return out;
}

}  // namespace jkolab
