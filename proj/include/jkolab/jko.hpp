#pragma once

// The JKO proximal step for the entropy on the torus grid, trajectories of
// steps, and the per-step Monge-Ampere and optimality residuals.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "jkolab/error.hpp"
#include "jkolab/torus.hpp"
#include "jkolab/transport.hpp"

namespace jkolab {

/// sum rho_i log rho_i h^n.
inline double entropy(const DensityField& rho) {
  double s = 0.0;
  for (double v : rho.values()) s += v * std::log(v);
  return s * rho.grid().cell_volume();
}

struct InnerSolverSettings {
  double terminal_eps = 0.0;     ///< 0 selects min(tau/10, h^2)
  int eps_stages = 3;            ///< eps-scaling stages, each halving eps
  double tol = 1e-11;            ///< L1 gap between the second marginal and its prox image
  double stage_tol = 1e-7;
  int max_iters = 200000;        ///< per stage
  KernelDomain domain = KernelDomain::automatic;
  double band_cutoff = 50.0;     ///< kernel entries below exp(-band_cutoff) are dropped
  bool oracle_mode = false;      ///< cross-check each step against mirror descent (M^n <= 32 only)
};

struct JkoConfig {
  double K = 0.05;
  int N = 32;
  TorusGrid grid{1, 128};
  InnerSolverSettings inner{};

  double tau() const noexcept { return K / N; }

  double terminal_eps() const noexcept {
    if (inner.terminal_eps > 0.0) return inner.terminal_eps;
    double h = grid.spacing();
    return std::min(tau() / 10.0, h * h);
  }

  void validate() const {
    require(std::isfinite(K) && K > 0.0, ErrorCode::invalid_argument, "K must be positive");
    require(N >= 1, ErrorCode::invalid_argument, "N must be at least 1");
    require(inner.terminal_eps >= 0.0 && std::isfinite(inner.terminal_eps), ErrorCode::invalid_argument,
            "terminal eps must be non-negative (0 = automatic)");
    require(inner.eps_stages >= 1, ErrorCode::invalid_argument, "need at least one eps stage");
    require(inner.tol > 0.0 && inner.stage_tol > 0.0, ErrorCode::invalid_argument, "tolerances must be positive");
    require(inner.max_iters > 0, ErrorCode::invalid_argument, "max_iters must be positive");
    require(inner.band_cutoff > 0.0, ErrorCode::invalid_argument, "band cutoff must be positive");
  }
};

struct StepDiagnostics {
  long iterations = 0;
  double inner_residual = 0.0;
  double eps = 0.0;
  bool used_log_domain = false;
  double w2_sq_plan = 0.0;   ///< transport cost of the entropic plan (upper bound on W2^2)
  double w2_sq_dual = 0.0;   ///< Kantorovich dual value with the step's own potentials (lower bound)
  double entropy = 0.0;      ///< entropy of the new density
  double objective = 0.0;    ///< w2_sq_plan / 2 + tau * entropy
  double entropic_objective = 0.0;  ///< regularized objective actually minimized
  double min_density = 0.0;
  std::optional<double> oracle_objective_gap;  ///< |entropic objective - mirror descent| (oracle mode)
  std::optional<double> oracle_l1;             ///< L1 distance to the mirror-descent density
};

struct StepResult {
  DensityField rho;
  StepDiagnostics diagnostics;
};

/// Dual potential carried between steps to warm-start the inner solver.
struct WarmStart {
  std::vector<double> g;  ///< eps log v at the last eps used
};

namespace detail {

inline double log_sum_exp(std::span<const double> w) {
  double mx = *std::max_element(w.begin(), w.end());
  double s = 0.0;
  for (double x : w) s += std::exp(x - mx);
  return mx + std::log(s);
}

struct ProxSolution {
  std::vector<double> lu, lv, q;
  long iterations = 0;
  double residual = 0.0;
  bool used_log_domain = false;
};

// Entropic prox of tau * entropy against the fixed first marginal p at one eps.
inline ProxSolution prox_stage(const TorusGibbsKernel& kernel, std::span<const double> p, double tau,
                               std::vector<double> lv, double target, int max_iters, KernelDomain domain) {
  const std::size_t n = p.size();
  const double eps = kernel.eps();
  const double alpha = tau / (tau + eps);
  ProxSolution sol;
  std::vector<double> kv(n), u(n), s(n), w(n);
  bool log_mode = domain == KernelDomain::log;
  if (!log_mode) {
    std::vector<double> v(n);
    for (std::size_t j = 0; j < n; ++j) v[j] = std::exp(lv[j]);
    bool broken = false;
    long it = 0;
    while (true) {
      kernel.apply(v, kv);
      for (std::size_t i = 0; i < n; ++i) u[i] = p[i] / kv[i];
      kernel.apply(u, s);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!(s[j] > 0.0) || !std::isfinite(s[j]) || !std::isfinite(u[j]) || !(v[j] > 0.0) ||
            !std::isfinite(v[j]))
          broken = true;
        w[j] = std::pow(s[j], 1.0 - alpha);
        z += w[j];
      }
      if (broken || !std::isfinite(z)) {
        broken = true;
        break;
      }
      double err = 0.0;
      for (std::size_t j = 0; j < n; ++j) err += std::abs(v[j] * s[j] - w[j] / z);
      sol.residual = err;
      if (err <= target) break;
      if (++it > max_iters)
        throw Error(ErrorCode::nonconvergence,
                    "JKO inner solver stalled at eps=" + std::to_string(eps) + ", prox residual " +
                        std::to_string(err),
                    err);
      for (std::size_t j = 0; j < n; ++j) v[j] = w[j] / (s[j] * z);
    }
    if (!broken) {
      sol.iterations = it;
      sol.lu.resize(n);
      sol.lv.resize(n);
      sol.q.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        sol.lu[i] = std::log(u[i]);
        sol.lv[i] = std::log(v[i]);
        sol.q[i] = v[i] * s[i];
      }
      return sol;
    }
    if (domain == KernelDomain::scaling)
      throw Error(ErrorCode::kernel_underflow,
                  "scaling factors left double range at eps=" + std::to_string(eps) +
                      "; use a larger terminal eps or log-domain updates");
    log_mode = true;
  }
  sol.used_log_domain = true;
  std::vector<double> lkv(n), lu(n), ls(n);
  long it = 0;
  while (true) {
    kernel.log_apply(lv, lkv);
    for (std::size_t i = 0; i < n; ++i) lu[i] = std::log(p[i]) - lkv[i];
    kernel.log_apply(lu, ls);
    for (std::size_t j = 0; j < n; ++j) w[j] = (1.0 - alpha) * ls[j];
    double lz = log_sum_exp(w);
    double err = 0.0;
    for (std::size_t j = 0; j < n; ++j) err += std::abs(std::exp(lv[j] + ls[j]) - std::exp(w[j] - lz));
    sol.residual = err;
    if (err <= target) break;
    if (++it > max_iters)
      throw Error(ErrorCode::nonconvergence,
                  "JKO inner solver stalled at eps=" + std::to_string(eps) + ", prox residual " +
                      std::to_string(err),
                  err);
    for (std::size_t j = 0; j < n; ++j) lv[j] = -alpha * ls[j] - lz;
  }
  sol.iterations = it;
  sol.q.resize(n);
  for (std::size_t j = 0; j < n; ++j) sol.q[j] = std::exp(lv[j] + ls[j]);
  sol.lu = std::move(lu);
  sol.lv = std::move(lv);
  return sol;
}

}  // namespace detail

/// Minimizer of the regularized objective over q on the simplex by mirror
/// descent with objective backtracking, with the transport part solved by balanced Sinkhorn.
/// Independent of the scaling iteration; intended for grids with M^n <= 32.
struct MirrorDescentResult {
  DensityField rho;
  double entropic_objective = 0.0;
  int outer_iterations = 0;
};

inline MirrorDescentResult mirror_descent_step(const DensityField& rho_prev, double tau, double eps,
                                               int max_outer = 2000, double tol = 1e-13) {
  const TorusGrid& grid = rho_prev.grid();
  require(grid.node_count() <= 32, ErrorCode::instance_too_large,
          "mirror-descent oracle is limited to 32 grid nodes");
  const std::size_t n = grid.node_count();
  const double hv = grid.cell_volume();
  SinkhornOptions so;
  so.eps_schedule = {eps};
  so.tol = 1e-14;
  so.domain = KernelDomain::log;
  so.build_plan = false;
  so.max_iters = 1000000;
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = rho_prev[i] * hv;

  struct Eval {
    double objective;
    std::vector<double> grad;
  };
  // Objective and gradient g + tau log(q/h^n) (constants dropped) at q.
  auto evaluate = [&](const std::vector<double>& q) {
    std::vector<double> r(n);
    for (std::size_t j = 0; j < n; ++j) r[j] = q[j] / hv;
    DensityField target = DensityField::normalized(grid, std::move(r));
    SinkhornResult sr = sinkhorn(rho_prev, target, so);
    Eval e{-eps + tau * entropy(target), std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) e.objective += p[i] * sr.f[i] + q[i] * sr.g[i];
    for (std::size_t j = 0; j < n; ++j) e.grad[j] = sr.g[j] + tau * std::log(q[j] / hv);
    return e;
  };

  std::vector<double> q(p);
  Eval cur = evaluate(q);
  double theta = 0.5;  // step in units of 1/tau
  int it = 0;
  for (; it < max_outer; ++it) {
    std::vector<double> lq(n), next(n);
    bool accepted = false;
    double change = 0.0;
    for (int tries = 0; tries < 60 && !accepted; ++tries) {
      for (std::size_t j = 0; j < n; ++j) lq[j] = std::log(q[j]) - theta * cur.grad[j] / tau;
      double lz = detail::log_sum_exp(lq);
      change = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        next[j] = std::exp(lq[j] - lz);
        change += std::abs(next[j] - q[j]);
      }
      if (change < tol) break;
      Eval trial = evaluate(next);
      if (trial.objective <= cur.objective) {
        q = next;
        cur = std::move(trial);
        accepted = true;
        theta = std::min(1.0, 1.5 * theta);
      } else {
        theta *= 0.5;
      }
    }
    if (!accepted) break;
  }
  std::vector<double> r(n);
  for (std::size_t j = 0; j < n; ++j) r[j] = q[j] / hv;
  return {DensityField::normalized(grid, std::move(r)), cur.objective, it};
}

/// One proximal step: minimize W2^2(rho_prev, rho)/2 + tau * entropy(rho)
/// with entropic regularization of the transport term.
inline StepResult jko_step(const DensityField& rho_prev, const JkoConfig& cfg, WarmStart* warm = nullptr) {
  cfg.validate();
  require_same_grid(rho_prev.grid(), cfg.grid);
  const TorusGrid& grid = cfg.grid;
  const std::size_t n = grid.node_count();
  const double hv = grid.cell_volume();
  const double tau = cfg.tau();
  const double eps_end = cfg.terminal_eps();
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = rho_prev[i] * hv;

  std::vector<double> g = (warm && warm->g.size() == n) ? warm->g : std::vector<double>(n, 0.0);
  detail::ProxSolution sol;
  StepDiagnostics diag;
  const int stages = cfg.inner.eps_stages;
  for (int s = stages - 1; s >= 0; --s) {
    const double eps = eps_end * std::ldexp(1.0, s);
    TorusGibbsKernel kernel(grid, eps, cfg.inner.band_cutoff);
    std::vector<double> lv(n);
    for (std::size_t j = 0; j < n; ++j) lv[j] = g[j] / eps;
    const double target = s == 0 ? cfg.inner.tol : std::max(cfg.inner.tol, cfg.inner.stage_tol);
    sol = detail::prox_stage(kernel, p, tau, std::move(lv), target, cfg.inner.max_iters, cfg.inner.domain);
    for (std::size_t j = 0; j < n; ++j) g[j] = eps * sol.lv[j];
    diag.iterations += sol.iterations;
    diag.used_log_domain = diag.used_log_domain || sol.used_log_domain;
  }
  if (warm) warm->g = g;

  diag.eps = eps_end;
  diag.inner_residual = sol.residual;
  std::vector<double> r(n);
  for (std::size_t j = 0; j < n; ++j) r[j] = sol.q[j] / hv;
  double rmin = *std::min_element(r.begin(), r.end());
  if (!(rmin >= 1e-12) || !std::isfinite(rmin))
    throw Error(ErrorCode::positivity_lost,
                "new density has minimum " + std::to_string(rmin) +
                    "; eps is too small or tau too large for this grid");
  DensityField rho = DensityField::normalized(grid, std::move(r));

  TorusGibbsKernel kernel(grid, eps_end, cfg.inner.band_cutoff);
  double w2 = 0.0;
  kernel.for_each_entry([&](std::size_t i, std::size_t j, double lk, double d2) {
    w2 += std::exp(sol.lu[i] + lk + sol.lv[j]) * d2;
  });
  double dual = -eps_end;
  for (std::size_t i = 0; i < n; ++i) dual += eps_end * (p[i] * sol.lu[i] + sol.q[i] * sol.lv[i]);

  diag.w2_sq_plan = w2;
  diag.entropy = entropy(rho);
  diag.objective = 0.5 * w2 + tau * diag.entropy;
  diag.entropic_objective = dual + tau * diag.entropy;
  diag.min_density = rho.min_value();

  // tau f is the c-transform of tau log rho, so (tau f, -tau log rho) is
  // dual-feasible for the half-squared cost.
  CTransformField ct = c_transform(rho.log(), tau, CTransformOptions{false});
  double lower = 0.0;
  for (std::size_t i = 0; i < n; ++i) lower += p[i] * ct.f[i];
  diag.w2_sq_dual = 2.0 * tau * (lower - diag.entropy);

  if (cfg.inner.oracle_mode) {
    auto md = mirror_descent_step(rho_prev, tau, eps_end);
    diag.oracle_objective_gap = std::abs(md.entropic_objective - diag.entropic_objective);
    double l1 = 0.0;
    for (std::size_t j = 0; j < n; ++j) l1 += std::abs(md.rho[j] - rho[j]) * hv;
    diag.oracle_l1 = l1;
  }
  return {std::move(rho), diag};
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// rho_0, ..., rho_N with the diagnostics of each step.
class JkoTrajectory {
 public:
  JkoTrajectory(JkoConfig cfg, std::vector<DensityField> densities, std::vector<StepDiagnostics> steps = {})
      : cfg_(cfg), densities_(std::move(densities)), steps_(std::move(steps)) {
    require(densities_.size() == static_cast<std::size_t>(cfg_.N) + 1, ErrorCode::invalid_argument,
            "trajectory needs N+1 densities");
    for (const auto& d : densities_) require_same_grid(d.grid(), cfg_.grid);
    require(steps_.empty() || steps_.size() == static_cast<std::size_t>(cfg_.N), ErrorCode::invalid_argument,
            "trajectory needs N step records");
  }

  const JkoConfig& config() const noexcept { return cfg_; }
  double tau() const noexcept { return cfg_.tau(); }
  int steps() const noexcept { return cfg_.N; }
  const TorusGrid& grid() const noexcept { return cfg_.grid; }
  const DensityField& operator[](std::size_t k) const { return densities_.at(k); }
  const std::vector<DensityField>& densities() const noexcept { return densities_; }
  /// Diagnostics of step k (1-based), empty for hand-built trajectories.
  const std::vector<StepDiagnostics>& diagnostics() const noexcept { return steps_; }

  /// u(t) = rho_floor(tN/K) on [0, K), u(K) = rho_N.
  const DensityField& at_time(double t) const {
    require(t >= 0.0 && t <= cfg_.K * (1.0 + 1e-12), ErrorCode::invalid_argument,
            "time outside [0, K]");
    long k = static_cast<long>(std::floor(t / cfg_.tau() + 1e-9));
    k = std::clamp<long>(k, 0, cfg_.N);
    return densities_[static_cast<std::size_t>(k)];
  }

  std::vector<double> entropies() const {
    std::vector<double> e;
    for (const auto& d : densities_) e.push_back(entropy(d));
    return e;
  }

 private:
  JkoConfig cfg_;
  std::vector<DensityField> densities_;
  std::vector<StepDiagnostics> steps_;
};

inline JkoTrajectory run_trajectory(const DensityField& rho0, const JkoConfig& cfg) {
  cfg.validate();
  require_same_grid(rho0.grid(), cfg.grid);
  std::vector<DensityField> rho{rho0};
  std::vector<StepDiagnostics> diag;
  WarmStart warm;
  for (int k = 1; k <= cfg.N; ++k) {
    try {
      StepResult r = jko_step(rho.back(), cfg, &warm);
      rho.push_back(std::move(r.rho));
      diag.push_back(r.diagnostics);
    } catch (const Error& e) {
      throw e.at_step(k);
    }
  }
  return JkoTrajectory(cfg, std::move(rho), std::move(diag));
}

// ---------------------------------------------------------------------------
// Residuals
// ---------------------------------------------------------------------------

struct MongeAmpereResidual {
  GridField residual;
  double max = 0.0;
  GridField mirrored;  ///< same map, roles of the two densities exchanged
  double mirrored_max = 0.0;
};

/// r(x) = |rho_next(x) - rho_prev(phi(x)) det(d phi(x))|, phi = id + tau grad log rho_next.
inline MongeAmpereResidual monge_ampere_residual(const DensityField& rho_prev, const DensityField& rho_next,
                                                 double tau) {
  require_same_grid(rho_prev.grid(), rho_next.grid());
  require(tau > 0.0, ErrorCode::invalid_argument, "tau must be positive");
  const TorusGrid& grid = rho_next.grid();
  const int dim = grid.dim();
  GridField l = rho_next.log();
  VectorField gl = gradient(l);
  SymMatField hl = hessian(l);
  MongeAmpereResidual out{GridField(grid), 0.0, GridField(grid), 0.0};
  for (std::size_t i = 0; i < grid.node_count(); ++i) {
    const SymMat& h = hl[i];
    SymMat j{1.0 + tau * h.xx, tau * h.xy, 1.0 + tau * h.yy};
    if (!(min_eigenvalue(j, dim) > 0.0))
      throw Error(ErrorCode::map_not_orientation_preserving,
                  "I + tau Hess log rho is not positive definite at node " + std::to_string(i));
    double det = dim == 1 ? j.xx : j.xx * j.yy - j.xy * j.xy;
    Point x = grid.node(i);
    Point g = gl.at(i);
    Point phi{x[0] + tau * g[0], x[1] + tau * g[1]};
    out.residual[i] = std::abs(rho_next[i] - interpolate_linear(rho_prev, phi) * det);
    out.mirrored[i] = std::abs(rho_prev[i] - interpolate_linear(rho_next, phi) * det);
    out.max = std::max(out.max, out.residual[i]);
    out.mirrored_max = std::max(out.mirrored_max, out.mirrored[i]);
  }
  return out;
}

struct OptimalityResidual {
  GridField residual;
  double max = 0.0;
};

/// r = f - log rho_prev + log det(I - tau Hess f) - tau |grad f|^2 / 2 with
/// f the (continuum-refined) c-transform of log rho_next.
inline OptimalityResidual optimality_residual(const DensityField& rho_prev, const CTransformField& ct) {
  require_same_grid(rho_prev.grid(), ct.f.grid());
  const TorusGrid& grid = rho_prev.grid();
  const int dim = grid.dim();
  const double tau = ct.tau;
  VectorField gf = gradient(ct.smooth_f);
  SymMatField hf = hessian(ct.smooth_f);
  OptimalityResidual out{GridField(grid), 0.0};
  for (std::size_t i = 0; i < grid.node_count(); ++i) {
    const SymMat& h = hf[i];
    SymMat a{1.0 - tau * h.xx, -tau * h.xy, 1.0 - tau * h.yy};
    if (!(min_eigenvalue(a, dim) > 0.0))
      throw Error(ErrorCode::degenerate_potential,
                  "I - tau Hess f is not positive definite at node " + std::to_string(i));
    double det = dim == 1 ? a.xx : a.xx * a.yy - a.xy * a.xy;
    Point g = gf.at(i);
    double r = ct.smooth_f[i] - std::log(rho_prev[i]) + std::log(det) - 0.5 * tau * (g[0] * g[0] + g[1] * g[1]);
    out.residual[i] = std::abs(r);
    out.max = std::max(out.max, out.residual[i]);
  }
  return out;
}

inline OptimalityResidual optimality_residual(const DensityField& rho_prev, const DensityField& rho_next,
                                              double tau) {
  require_same_grid(rho_prev.grid(), rho_next.grid());
  return optimality_residual(rho_prev, c_transform(rho_next.log(), tau));
}

/// Smallest eigenvalue of I - tau Hess f over the nodes.
inline double potential_semiconcavity_margin(const CTransformField& ct) {
  const int dim = ct.f.grid().dim();
  SymMatField hf = hessian(ct.smooth_f);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < hf.size(); ++i) {
    const SymMat& h = hf[i];
    m = std::min(m, min_eigenvalue({1.0 - ct.tau * h.xx, -ct.tau * h.xy, 1.0 - ct.tau * h.yy}, dim));
  }
  return m;
}

}  // namespace jkolab
