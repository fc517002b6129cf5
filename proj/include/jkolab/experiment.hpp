#pragma once

// Experiment configuration and the pipelines behind the command-line tool.
// Each pipeline returns a process exit code: 0 all checks pass, 1 a check is
// violated, 2 usage or configuration error, 3 runtime failure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "jkolab/harnack.hpp"
#include "jkolab/io.hpp"
#include "jkolab/jko.hpp"
#include "jkolab/reference.hpp"
#include "jkolab/transport.hpp"

namespace jkolab {

enum ExitCode : int { exit_pass = 0, exit_violation = 1, exit_usage = 2, exit_runtime = 3 };

/// Malformed or inconsistent configuration (maps to exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct InitialDensity {
  std::string family = "cosine";  ///< uniform | cosine | asymmetric
  double amplitude = 0.5;         ///< a in 1 + a cos(2 pi x) [cos(2 pi y)]
  double skew = 0.25;             ///< b in the asymmetric term b sin(4 pi x)
};

struct Tolerances {
  double diff_harnack_abs = 0.0;
  double diff_harnack_rel = 1e-3;
  double recursion_abs = 1e-6;
  double harnack_rel = 1e-3;
  double ma_max = 1e-2;
  double optimality_max = 2e-2;
  double fest_max = 5e-3;
  double ctransform_identity = 1e-12;
  double semiconcavity = 5e-3;  ///< I - tau Hess f >= -semiconcavity * max(1, tau |Hess f|)
  double mass = 1e-9;
};

struct HarnackSampling {
  std::size_t node_limit = 4096;
  int per_dim = 16;
  std::vector<int> chain_spans{1, 2, 4};  ///< k2 - k1 values for the geodesic chain check
  int chain_nodes = 16;                    ///< nodes per axis used for chain endpoints
};

inline const std::vector<std::string>& known_checks() {
  static const std::vector<std::string> k{"diff-harnack", "harnack",     "recursion",   "ma-residual",
                                          "optimality",   "ctransform",  "convergence", "ot-selftest"};
  return k;
}

struct ExperimentConfig {
  int dim = 1;
  int M = 128;
  double K = 0.05;
  int N = 32;
  InitialDensity initial{};
  InnerSolverSettings inner{};
  std::vector<std::string> checks{"diff-harnack", "harnack", "recursion", "ma-residual", "optimality", "ctransform"};
  double C = 1.0;
  Tolerances tolerances{};
  HarnackSampling sampling{};
  std::vector<int> convergence_N{4, 8, 16, 32};
  std::string output_dir = "jko_out";
  std::uint64_t seed = 0;
  bool timing = true;

  bool wants(const std::string& check) const {
    return std::find(checks.begin(), checks.end(), check) != checks.end();
  }

  TorusGrid grid() const { return TorusGrid(dim, M); }
  JkoConfig jko() const { return JkoConfig{K, N, grid(), inner}; }
};

namespace detail {

inline void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <class T>
void read_opt(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  using detail::read_opt;
  ExperimentConfig c;
  detail::reject_unknown_keys(j,
                              {"dim", "M", "K", "N", "initial", "inner", "checks", "C", "tolerances", "sampling",
                               "convergence", "output_dir", "seed", "timing"},
                              "config");
  read_opt(j, "dim", c.dim, "config");
  read_opt(j, "M", c.M, "config");
  read_opt(j, "K", c.K, "config");
  read_opt(j, "N", c.N, "config");
  read_opt(j, "C", c.C, "config");
  read_opt(j, "output_dir", c.output_dir, "config");
  read_opt(j, "seed", c.seed, "config");
  read_opt(j, "timing", c.timing, "config");
  if (j.contains("initial")) {
    const json& s = j["initial"];
    detail::reject_unknown_keys(s, {"family", "amplitude", "skew"}, "initial");
    read_opt(s, "family", c.initial.family, "initial");
    read_opt(s, "amplitude", c.initial.amplitude, "initial");
    read_opt(s, "skew", c.initial.skew, "initial");
  }
  if (j.contains("inner")) {
    const json& s = j["inner"];
    detail::reject_unknown_keys(s,
                                {"terminal_eps", "eps_stages", "tol", "stage_tol", "max_iters", "domain",
                                 "band_cutoff", "oracle_mode"},
                                "inner");
    read_opt(s, "terminal_eps", c.inner.terminal_eps, "inner");
    read_opt(s, "eps_stages", c.inner.eps_stages, "inner");
    read_opt(s, "tol", c.inner.tol, "inner");
    read_opt(s, "stage_tol", c.inner.stage_tol, "inner");
    read_opt(s, "max_iters", c.inner.max_iters, "inner");
    read_opt(s, "band_cutoff", c.inner.band_cutoff, "inner");
    read_opt(s, "oracle_mode", c.inner.oracle_mode, "inner");
    std::string domain = "automatic";
    read_opt(s, "domain", domain, "inner");
    if (domain == "automatic") c.inner.domain = KernelDomain::automatic;
    else if (domain == "scaling") c.inner.domain = KernelDomain::scaling;
    else if (domain == "log") c.inner.domain = KernelDomain::log;
    else throw ConfigError("inner.domain must be automatic, scaling or log");
  }
  if (j.contains("checks")) {
    read_opt(j, "checks", c.checks, "config");
    for (const auto& name : c.checks)
      if (std::find(known_checks().begin(), known_checks().end(), name) == known_checks().end())
        throw ConfigError("unknown check '" + name + "'");
  }
  if (j.contains("tolerances")) {
    const json& s = j["tolerances"];
    detail::reject_unknown_keys(s,
                                {"diff_harnack_abs", "diff_harnack_rel", "recursion_abs", "harnack_rel", "ma_max",
                                 "optimality_max", "fest_max", "ctransform_identity", "semiconcavity", "mass"},
                                "tolerances");
    Tolerances& t = c.tolerances;
    read_opt(s, "diff_harnack_abs", t.diff_harnack_abs, "tolerances");
    read_opt(s, "diff_harnack_rel", t.diff_harnack_rel, "tolerances");
    read_opt(s, "recursion_abs", t.recursion_abs, "tolerances");
    read_opt(s, "harnack_rel", t.harnack_rel, "tolerances");
    read_opt(s, "ma_max", t.ma_max, "tolerances");
    read_opt(s, "optimality_max", t.optimality_max, "tolerances");
    read_opt(s, "fest_max", t.fest_max, "tolerances");
    read_opt(s, "ctransform_identity", t.ctransform_identity, "tolerances");
    read_opt(s, "semiconcavity", t.semiconcavity, "tolerances");
    read_opt(s, "mass", t.mass, "tolerances");
  }
  if (j.contains("sampling")) {
    const json& s = j["sampling"];
    detail::reject_unknown_keys(s, {"node_limit", "per_dim", "chain_spans", "chain_nodes"}, "sampling");
    read_opt(s, "node_limit", c.sampling.node_limit, "sampling");
    read_opt(s, "per_dim", c.sampling.per_dim, "sampling");
    read_opt(s, "chain_spans", c.sampling.chain_spans, "sampling");
    read_opt(s, "chain_nodes", c.sampling.chain_nodes, "sampling");
  }
  if (j.contains("convergence")) {
    const json& s = j["convergence"];
    detail::reject_unknown_keys(s, {"N_list"}, "convergence");
    read_opt(s, "N_list", c.convergence_N, "convergence");
  }

  if (c.dim != 1 && c.dim != 2) throw ConfigError("dim must be 1 or 2");
  if (c.M < 8) throw ConfigError("M must be at least 8");
  if (!(c.K > 0.0) || !std::isfinite(c.K)) throw ConfigError("K must be positive");
  if (c.N < 1) throw ConfigError("N must be at least 1");
  if (!(c.C >= 0.5 && c.C <= 1.0)) throw ConfigError("C must lie in [0.5, 1]");
  if (c.initial.family != "uniform" && c.initial.family != "cosine" && c.initial.family != "asymmetric")
    throw ConfigError("initial.family must be uniform, cosine or asymmetric");
  if (!(c.initial.amplitude >= 0.0) || !(c.initial.skew >= 0.0) ||
      c.initial.amplitude + (c.initial.family == "asymmetric" ? c.initial.skew : 0.0) >= 1.0)
    throw ConfigError("initial amplitudes must be non-negative and sum to less than 1");
  if (c.convergence_N.empty()) throw ConfigError("convergence.N_list must not be empty");
  for (std::size_t i = 0; i < c.convergence_N.size(); ++i)
    if (c.convergence_N[i] < 1 || (i > 0 && c.convergence_N[i] <= c.convergence_N[i - 1]))
      throw ConfigError("convergence.N_list must be positive and increasing");
  if (c.sampling.per_dim < 1 || c.sampling.chain_nodes < 1) throw ConfigError("sampling counts must be positive");
  for (int s : c.sampling.chain_spans)
    if (s < 0) throw ConfigError("chain spans must be non-negative");
  try {
    c.jko().validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

inline json config_to_json(const ExperimentConfig& c) {
  const char* domain = c.inner.domain == KernelDomain::scaling ? "scaling"
                       : c.inner.domain == KernelDomain::log   ? "log"
                                                               : "automatic";
  const Tolerances& t = c.tolerances;
  return json{{"dim", c.dim},
              {"M", c.M},
              {"K", c.K},
              {"N", c.N},
              {"initial", {{"family", c.initial.family}, {"amplitude", c.initial.amplitude}, {"skew", c.initial.skew}}},
              {"inner",
               {{"terminal_eps", c.inner.terminal_eps},
                {"eps_stages", c.inner.eps_stages},
                {"tol", c.inner.tol},
                {"stage_tol", c.inner.stage_tol},
                {"max_iters", c.inner.max_iters},
                {"domain", domain},
                {"band_cutoff", c.inner.band_cutoff},
                {"oracle_mode", c.inner.oracle_mode}}},
              {"checks", c.checks},
              {"C", c.C},
              {"tolerances",
               {{"diff_harnack_abs", t.diff_harnack_abs},
                {"diff_harnack_rel", t.diff_harnack_rel},
                {"recursion_abs", t.recursion_abs},
                {"harnack_rel", t.harnack_rel},
                {"ma_max", t.ma_max},
                {"optimality_max", t.optimality_max},
                {"fest_max", t.fest_max},
                {"ctransform_identity", t.ctransform_identity},
                {"semiconcavity", t.semiconcavity},
                {"mass", t.mass}}},
              {"sampling",
               {{"node_limit", c.sampling.node_limit},
                {"per_dim", c.sampling.per_dim},
                {"chain_spans", c.sampling.chain_spans},
                {"chain_nodes", c.sampling.chain_nodes}}},
              {"convergence", {{"N_list", c.convergence_N}}},
              {"output_dir", c.output_dir},
              {"seed", c.seed},
              {"timing", c.timing}};
}

/// 1 + a cos(2 pi x) [cos(2 pi y)], plus b sin(4 pi x) for the asymmetric family.
inline DensityField initial_density(const ExperimentConfig& c) {
  TorusGrid g = c.grid();
  if (c.initial.family == "uniform") return DensityField::uniform(g);
  const double a = c.initial.amplitude;
  const double b = c.initial.family == "asymmetric" ? c.initial.skew : 0.0;
  const int dim = c.dim;
  return DensityField::sample(g, [&](const Point& p) {
    double wave = std::cos(kTwoPi * p[0]);
    if (dim == 2) wave *= std::cos(kTwoPi * p[1]);
    return 1.0 + a * wave + b * std::sin(2.0 * kTwoPi * p[0]);
  });
}

// ---------------------------------------------------------------------------
// Trajectory analysis
// ---------------------------------------------------------------------------

/// Residual maxima per density (index k = 0..N; entries that do not apply
/// at k = 0 are NaN).
struct TrajectoryAnalysis {
  std::vector<double> monge_ampere, monge_ampere_mirrored, optimality, fest;
  std::vector<double> ineq_violation, equal_gap, smooth_ineq_violation, smooth_equal_gap;
  std::vector<double> semiconcavity_margin, semiconcavity_floor;
  std::vector<double> a;  ///< min eigenvalue of Hess log rho_k
};

inline TrajectoryAnalysis analyze_trajectory(const JkoTrajectory& traj, bool ctransform, bool ma, bool optimality,
                                             const std::function<void(const std::string&)>& log = {}) {
  const double tau = traj.tau();
  const std::size_t count = static_cast<std::size_t>(traj.steps()) + 1;
  const double nan = std::nan("");
  TrajectoryAnalysis r;
  for (auto* v : {&r.monge_ampere, &r.monge_ampere_mirrored, &r.optimality, &r.fest, &r.ineq_violation, &r.equal_gap,
                  &r.smooth_ineq_violation, &r.smooth_equal_gap, &r.semiconcavity_margin, &r.semiconcavity_floor})
    v->assign(count, nan);
  r.a = hessian_lower_bounds(traj);
  for (std::size_t k = 0; k < count; ++k) {
    const DensityField& rho = traj[k];
    if (ma && k > 0) {
      auto m = monge_ampere_residual(traj[k - 1], rho, tau);
      r.monge_ampere[k] = m.max;
      r.monge_ampere_mirrored[k] = m.mirrored_max;
    }
    if (!ctransform && !(optimality && k > 0)) continue;
    GridField l = rho.log();
    CTransformField ct = c_transform(l, tau);
    if (ctransform) {
      r.fest[k] = fest_residual(ct, l, tau).max;
      auto id = verify_ctransform_identities(ct, l);
      r.ineq_violation[k] = id.max_ineq_violation;
      r.equal_gap[k] = id.max_equal_gap;
      r.smooth_ineq_violation[k] = id.smooth_max_ineq_violation;
      r.smooth_equal_gap[k] = id.smooth_max_equal_gap;
      SymMatField hf = hessian(ct.smooth_f);
      double scale = 0.0;
      for (std::size_t i = 0; i < hf.size(); ++i) scale = std::max(scale, max_abs_entry(hf[i], traj.grid().dim()));
      r.semiconcavity_margin[k] = potential_semiconcavity_margin(ct);
      r.semiconcavity_floor[k] = std::max(1.0, tau * scale);
    }
    if (optimality && k > 0) r.optimality[k] = optimality_residual(traj[k - 1], ct).max;
    if (log) log("analyzed density " + std::to_string(k));
  }
  return r;
}

struct StructuralReport {
  double worst_mass_error = 0.0;
  double min_density = 0.0;
  bool entropy_monotone = true;
  double worst_descent_excess = -std::numeric_limits<double>::infinity();  ///< max H_k + W2dual/(2 tau) - H_{k-1}
  bool pass = true;
};

inline StructuralReport structural_checks(const JkoTrajectory& traj, double mass_tol) {
  StructuralReport s;
  s.min_density = std::numeric_limits<double>::infinity();
  auto h = traj.entropies();
  for (std::size_t k = 0; k < traj.densities().size(); ++k) {
    s.worst_mass_error = std::max(s.worst_mass_error, std::abs(traj[k].mass() - 1.0));
    s.min_density = std::min(s.min_density, traj[k].min_value());
    if (k > 0 && h[k] > h[k - 1]) s.entropy_monotone = false;
  }
  for (std::size_t k = 1; k <= traj.diagnostics().size(); ++k) {
    const auto& d = traj.diagnostics()[k - 1];
    s.worst_descent_excess = std::max(s.worst_descent_excess, h[k] + d.w2_sq_dual / (2.0 * traj.tau()) - h[k - 1]);
  }
  s.pass = s.worst_mass_error <= mass_tol && s.min_density > 0.0 && s.entropy_monotone &&
           !(s.worst_descent_excess > 1e-12);
  return s;
}

// ---------------------------------------------------------------------------
// OT self-test battery
// ---------------------------------------------------------------------------

struct AtomicInstance {
  DiscreteMeasure mu, nu;
};

struct GridInstance {
  DensityField mu, nu;
};

struct OtBattery {
  double terminal_eps = 1e-5;
  double sinkhorn_tol_abs = 1e-3;
  std::string output_dir = ".";
  std::vector<AtomicInstance> atomic;
  std::vector<GridInstance> grid;
};

/// Independent brute force over all assignments (depth-first, sums in index
/// order) for equal-count uniform atom sets.
inline double brute_force_assignment(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  const std::size_t n = mu.size();
  std::vector<char> used(n, 0);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, double)> rec = [&](std::size_t i, double acc) {
    if (i == n) {
      best = std::min(best, acc);
      return;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      used[j] = 1;
      rec(i + 1, acc + torus_distance_sq(mu.points[i], nu.points[j], mu.dim));
      used[j] = 0;
    }
  };
  rec(0, 0.0);
  return best / static_cast<double>(n);
}

namespace detail {

inline DiscreteMeasure random_atoms(std::mt19937_64& rng, int dim, std::size_t count) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Point> pts(count);
  for (auto& p : pts) p = {u(rng), dim == 2 ? u(rng) : 0.0};
  return DiscreteMeasure::uniform(dim, std::move(pts));
}

inline DensityField random_density(std::mt19937_64& rng, const TorusGrid& g) {
  std::uniform_real_distribution<double> u(0.2, 1.8);
  std::vector<double> v(g.node_count());
  for (auto& x : v) x = u(rng);
  return DensityField::normalized(g, std::move(v));
}

inline std::vector<Point> parse_points(const json& a, int dim, const std::string& where) {
  if (!a.is_array() || a.empty()) throw ConfigError(where + " must be a non-empty array of points");
  std::vector<Point> pts;
  for (const auto& p : a) {
    if (!p.is_array() || static_cast<int>(p.size()) != dim) throw ConfigError(where + ": point of wrong dimension");
    Point q{0.0, 0.0};
    for (int d = 0; d < dim; ++d) {
      if (!p[d].is_number()) throw ConfigError(where + ": coordinates must be numbers");
      q[d] = p[d].get<double>();
      if (q[d] < 0.0 || q[d] >= 1.0) throw ConfigError(where + ": coordinates must lie in [0, 1)");
    }
    pts.push_back(q);
  }
  return pts;
}

}  // namespace detail

/// Fixed instances: 60 random equal-count uniform atom sets (1 to 6 atoms, in
/// one and two dimensions) and five random density pairs on a 16-node grid.
inline OtBattery bundled_battery() {
  OtBattery b;
  std::mt19937_64 rng(20240611);
  for (int i = 0; i < 60; ++i) {
    int dim = 1 + (i % 2);
    std::size_t count = 1 + static_cast<std::size_t>(i % 6);
    auto mu = detail::random_atoms(rng, dim, count);
    auto nu = detail::random_atoms(rng, dim, count);
    b.atomic.push_back({std::move(mu), std::move(nu)});
  }
  for (int i = 0; i < 4; ++i) {
    TorusGrid g(1, 16);
    b.grid.push_back({detail::random_density(rng, g), detail::random_density(rng, g)});
  }
  TorusGrid g2(2, 4);
  b.grid.push_back({detail::random_density(rng, g2), detail::random_density(rng, g2)});
  return b;
}

/// Battery JSON: {terminal_eps, sinkhorn_tol_abs, output_dir, atomic: [{dim, mu: [[x..]..], nu}],
/// random_atomic: {count, max_atoms, dim, seed}, grid: [{dim, M, mu: [..], nu: [..]}],
/// random_grid: {count, dim, M, seed}}. At least one instance is required.
inline OtBattery parse_battery(const json& j) {
  using detail::read_opt;
  detail::reject_unknown_keys(j, {"terminal_eps", "sinkhorn_tol_abs", "output_dir", "atomic", "random_atomic", "grid",
                                  "random_grid"},
                              "battery");
  OtBattery b;
  read_opt(j, "terminal_eps", b.terminal_eps, "battery");
  read_opt(j, "sinkhorn_tol_abs", b.sinkhorn_tol_abs, "battery");
  read_opt(j, "output_dir", b.output_dir, "battery");
  if (!(b.terminal_eps > 0.0) || !(b.sinkhorn_tol_abs > 0.0))
    throw ConfigError("battery tolerances must be positive");
  if (j.contains("atomic")) {
    if (!j["atomic"].is_array()) throw ConfigError("battery.atomic must be an array");
    for (const auto& inst : j["atomic"]) {
      detail::reject_unknown_keys(inst, {"dim", "mu", "nu"}, "atomic instance");
      int dim = 1;
      read_opt(inst, "dim", dim, "atomic instance");
      if (dim != 1 && dim != 2) throw ConfigError("atomic instance dim must be 1 or 2");
      if (!inst.contains("mu") || !inst.contains("nu")) throw ConfigError("atomic instance needs mu and nu");
      auto mu = DiscreteMeasure::uniform(dim, detail::parse_points(inst["mu"], dim, "atomic.mu"));
      auto nu = DiscreteMeasure::uniform(dim, detail::parse_points(inst["nu"], dim, "atomic.nu"));
      if (mu.size() != nu.size() || mu.size() > 8) throw ConfigError("atomic instances need equal counts of at most 8");
      b.atomic.push_back({std::move(mu), std::move(nu)});
    }
  }
  if (j.contains("random_atomic")) {
    const json& r = j["random_atomic"];
    detail::reject_unknown_keys(r, {"count", "max_atoms", "dim", "seed"}, "random_atomic");
    int count = 0, max_atoms = 6, dim = 1;
    std::uint64_t seed = 1;
    read_opt(r, "count", count, "random_atomic");
    read_opt(r, "max_atoms", max_atoms, "random_atomic");
    read_opt(r, "dim", dim, "random_atomic");
    read_opt(r, "seed", seed, "random_atomic");
    if (count < 0 || max_atoms < 1 || max_atoms > 8 || (dim != 1 && dim != 2))
      throw ConfigError("random_atomic needs count >= 0, 1 <= max_atoms <= 8, dim in {1,2}");
    std::mt19937_64 rng(seed);
    for (int i = 0; i < count; ++i) {
      std::size_t n = 1 + static_cast<std::size_t>(i % max_atoms);
      auto mu = detail::random_atoms(rng, dim, n);
      auto nu = detail::random_atoms(rng, dim, n);
      b.atomic.push_back({std::move(mu), std::move(nu)});
    }
  }
  auto grid_of = [](int dim, int m) {
    if ((dim != 1 && dim != 2) || m < 2) throw ConfigError("grid instance needs dim in {1,2} and M >= 2");
    TorusGrid g(dim, m);
    if (g.node_count() > 64) throw ConfigError("grid instances are limited to 64 nodes");
    return g;
  };
  if (j.contains("grid")) {
    if (!j["grid"].is_array()) throw ConfigError("battery.grid must be an array");
    for (const auto& inst : j["grid"]) {
      detail::reject_unknown_keys(inst, {"dim", "M", "mu", "nu"}, "grid instance");
      int dim = 1, m = 16;
      std::vector<double> mu, nu;
      read_opt(inst, "dim", dim, "grid instance");
      read_opt(inst, "M", m, "grid instance");
      read_opt(inst, "mu", mu, "grid instance");
      read_opt(inst, "nu", nu, "grid instance");
      TorusGrid g = grid_of(dim, m);
      if (mu.size() != g.node_count() || nu.size() != g.node_count())
        throw ConfigError("grid instance values do not match M^dim");
      try {
        b.grid.push_back({DensityField::normalized(g, mu), DensityField::normalized(g, nu)});
      } catch (const Error& e) {
        throw ConfigError(std::string("grid instance: ") + e.what());
      }
    }
  }
  if (j.contains("random_grid")) {
    const json& r = j["random_grid"];
    detail::reject_unknown_keys(r, {"count", "dim", "M", "seed"}, "random_grid");
    int count = 0, dim = 1, m = 16;
    std::uint64_t seed = 2;
    read_opt(r, "count", count, "random_grid");
    read_opt(r, "dim", dim, "random_grid");
    read_opt(r, "M", m, "random_grid");
    read_opt(r, "seed", seed, "random_grid");
    TorusGrid g = grid_of(dim, m);
    std::mt19937_64 rng(seed);
    for (int i = 0; i < count; ++i) b.grid.push_back({detail::random_density(rng, g), detail::random_density(rng, g)});
  }
  if (b.atomic.empty() && b.grid.empty()) throw ConfigError("battery contains no instances");
  return b;
}

struct OtSelftestResult {
  int atomic_mismatches = 0;
  double worst_atomic_gap = 0.0;
  double worst_grid_gap = 0.0;
  std::size_t worst_grid_index = 0;
  json report;
  json worst_instance;
  bool pass = true;
};

inline json measure_json(const DiscreteMeasure& m) {
  json pts = json::array();
  for (const auto& p : m.points) {
    json q = json::array({p[0]});
    if (m.dim == 2) q.push_back(p[1]);
    pts.push_back(q);
  }
  return json{{"dim", m.dim}, {"points", pts}, {"masses", m.masses}};
}

inline OtSelftestResult run_ot_selftest(const OtBattery& b) {
  OtSelftestResult r;
  json atomic = json::array();
  json worst_atomic;
  for (std::size_t i = 0; i < b.atomic.size(); ++i) {
    const auto& inst = b.atomic[i];
    double brute = brute_force_assignment(inst.mu, inst.nu);
    double exact = w2_exact_small(inst.mu, inst.nu).value;
    double gap = std::abs(exact - brute);
    bool same = exact == brute;
    if (!same) ++r.atomic_mismatches;
    atomic.push_back({{"index", i}, {"atoms", inst.mu.size()}, {"dim", inst.mu.dim}, {"brute_force", brute},
                      {"exact", exact}, {"identical", same}});
    if (!same && gap >= r.worst_atomic_gap) {
      r.worst_atomic_gap = gap;
      worst_atomic = {{"kind", "atomic"}, {"index", i}, {"mu", measure_json(inst.mu)}, {"nu", measure_json(inst.nu)},
                      {"brute_force", brute}, {"exact", exact}};
    }
  }
  json grid = json::array();
  json worst_grid;
  for (std::size_t i = 0; i < b.grid.size(); ++i) {
    const auto& inst = b.grid[i];
    const TorusGrid& g = inst.mu.grid();
    const std::size_t n = g.node_count();
    std::vector<double> cost(n * n), a(n), c(n);
    for (std::size_t p = 0; p < n; ++p) {
      a[p] = inst.mu[p] * g.cell_volume();
      c[p] = inst.nu[p] * g.cell_volume();
      for (std::size_t q = 0; q < n; ++q) cost[p * n + q] = g.distance_sq(p, q);
    }
    double lp = solve_transport_simplex(cost, a, c).value;
    SinkhornOptions so;
    so.eps_schedule = geometric_schedule(std::max(1e-1, b.terminal_eps), b.terminal_eps, 0.5);
    so.build_plan = false;
    SinkhornResult sr = sinkhorn(inst.mu, inst.nu, so);
    double gap = std::abs(sr.value - lp);
    grid.push_back({{"index", i}, {"dim", g.dim()}, {"M", g.points_per_dim()}, {"exact", lp}, {"sinkhorn", sr.value},
                    {"gap", gap}, {"pass", gap <= b.sinkhorn_tol_abs}});
    if (gap >= r.worst_grid_gap) {
      r.worst_grid_gap = gap;
      r.worst_grid_index = i;
      worst_grid = {{"kind", "grid"},
                    {"index", i},
                    {"dim", g.dim()},
                    {"M", g.points_per_dim()},
                    {"mu", inst.mu.field().data()},
                    {"nu", inst.nu.field().data()},
                    {"exact", lp},
                    {"sinkhorn", sr.value},
                    {"gap", gap}};
    }
  }
  bool grid_ok = r.worst_grid_gap <= b.sinkhorn_tol_abs;
  r.pass = r.atomic_mismatches == 0 && grid_ok;
  r.worst_instance = r.atomic_mismatches > 0 ? worst_atomic : worst_grid;
  r.report = json{{"kind", "ot_selftest"},
                  {"terminal_eps", b.terminal_eps},
                  {"sinkhorn_tol_abs", b.sinkhorn_tol_abs},
                  {"atomic_instances", b.atomic.size()},
                  {"atomic_mismatches", r.atomic_mismatches},
                  {"grid_instances", b.grid.size()},
                  {"worst_grid_gap", r.worst_grid_gap},
                  {"pass", r.pass},
                  {"atomic", atomic},
                  {"grid", grid}};
  return r;
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

struct Console {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
  bool verbose = false;

  void info(const std::string& s) const {
    if (verbose) err << s << "\n";
  }
};

inline json nan_to_null(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(nullable(x));
  return a;
}

inline double max_finite(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v)
    if (std::isfinite(x)) m = std::max(m, x);
  return m;
}

struct ConvergenceOutcome {
  std::vector<ConvergenceRow> rows;
  std::vector<bool> harnack_pass;  ///< diff-Harnack and recursion verdicts per N
  std::optional<int> empirical_N0;
  bool monotone = true;
  json report;
};

inline ConvergenceOutcome convergence_outcome(const ExperimentConfig& c, const Console& con) {
  ConvergenceOutcome o;
  DensityField rho0 = initial_density(c);
  o.rows = convergence_study(rho0, c.K, c.convergence_N, c.inner, c.timing, [&](const JkoTrajectory& t) {
    auto a = hessian_lower_bounds(t);
    bool ok = check_diff_harnack(a, t.tau(), c.C, c.tolerances.diff_harnack_abs, c.tolerances.diff_harnack_rel).pass;
    try {
      ok = ok && check_recursion(a, t.tau(), c.tolerances.recursion_abs).pass;
    } catch (const Error&) {
      ok = false;
    }
    o.harnack_pass.push_back(ok);
    con.info("convergence: N=" + std::to_string(t.steps()) + " done");
  });
  for (std::size_t i = 1; i < o.rows.size(); ++i)
    if (o.rows[i].l1_gap > o.rows[i - 1].l1_gap + 1e-12) o.monotone = false;
  for (std::size_t i = 0; i < o.rows.size(); ++i)
    if (o.harnack_pass[i]) {
      o.empirical_N0 = o.rows[i].N;
      break;
    }
  json h = json::array();
  for (bool b : o.harnack_pass) h.push_back(b);
  o.report = json{{"kind", "convergence"},
                  {"K", c.K},
                  {"M", c.M},
                  {"n", c.dim},
                  {"rows", to_json(o.rows)},
                  {"monotone", o.monotone},
                  {"harnack_checks_pass", h},
                  {"empirical_N0", o.empirical_N0 ? json(*o.empirical_N0) : json(nullptr)},
                  {"pass", o.monotone}};
  return o;
}

inline void write_convergence(const fs::path& dir, const ConvergenceOutcome& o) {
  write_text(dir / "convergence.csv", convergence_csv(o.rows));
  write_json(dir / "reports" / "convergence.json", o.report);
  std::vector<std::vector<double>> rows;
  for (const auto& r : o.rows) rows.push_back({static_cast<double>(r.N), r.l1_gap, r.linf_gap});
  write_text(dir / "plots" / "convergence.dat", plot_data({"N", "l1_gap", "linf_gap"}, rows));
}

/// Runs the trajectory and every requested check, writing artifacts under
/// the configured output directory.
inline int run_experiment(const ExperimentConfig& c, const Console& con) {
  const fs::path dir = c.output_dir;
  try {
    DensityField rho0 = initial_density(c);
    JkoConfig jc = c.jko();
    con.info("running " + std::to_string(c.N) + " JKO steps on M=" + std::to_string(c.M) + ", n=" + std::to_string(c.dim));
    if (c.wants("ctransform")) {
      // the forward map of rho_0 must not fold before any step is attempted
      GridField l0 = rho0.log();
      fest_residual(c_transform(l0, jc.tau()), l0, jc.tau());
    }
    JkoTrajectory traj = run_trajectory(rho0, jc);
    const double tau = traj.tau();
    const Tolerances& tol = c.tolerances;

    TrajectoryAnalysis an = analyze_trajectory(traj, c.wants("ctransform"), c.wants("ma-residual"),
                                               c.wants("optimality"), [&](const std::string& s) { con.info(s); });
    json checks = json::object();
    bool all_pass = true;
    auto verdict = [&](const std::string& name, bool pass) {
      checks[name] = pass;
      all_pass = all_pass && pass;
      con.out << (pass ? "PASS  " : "FAIL  ") << name << "\n";
    };

    StructuralReport st = structural_checks(traj, tol.mass);
    write_json(dir / "reports" / "structural.json",
               {{"kind", "structural"},
                {"worst_mass_error", st.worst_mass_error},
                {"min_density", st.min_density},
                {"entropy_monotone", st.entropy_monotone},
                {"worst_descent_excess", nullable(st.worst_descent_excess)},
                {"pass", st.pass}});
    verdict("structural", st.pass);

    if (c.wants("diff-harnack")) {
      auto rep = check_diff_harnack(an.a, tau, c.C, tol.diff_harnack_abs, tol.diff_harnack_rel);
      write_json(dir / "reports" / "diff_harnack.json", to_json(rep));
      write_text(dir / "reports" / "diff_harnack.txt", to_text(rep));
      verdict("diff-harnack", rep.pass);
    }
    if (c.wants("recursion")) {
      auto rep = check_recursion(an.a, tau, tol.recursion_abs);
      write_json(dir / "reports" / "recursion.json", to_json(rep));
      write_text(dir / "reports" / "recursion.txt", to_text(rep));
      verdict("recursion", rep.pass);
    }
    if (c.wants("harnack")) {
      auto samples = default_harnack_samples(traj, c.seed, c.sampling.node_limit, c.sampling.per_dim);
      bool pass = false;
      json rep;
      try {
        auto hr = check_harnack_pair(traj, samples, tol.harnack_rel);
        pass = hr.pass;
        rep = to_json(hr);
        write_text(dir / "reports" / "harnack.txt", to_text(hr));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::no_admissible_pairs) throw;
        rep = json{{"kind", "harnack"}, {"pass", false}, {"error", e.what()}};
      }
      // geodesic chains between a coarse node subset
      json chains = json::array();
      bool chains_ok = true;
      HarnackSamples coarse = default_harnack_samples(traj, c.seed, 0, c.sampling.chain_nodes);
      for (int span : c.sampling.chain_spans) {
        double worst = 0.0;
        std::size_t count = 0;
        bool ok = true;
        for (int k1 = 1; k1 + span <= traj.steps(); ++k1)
          for (std::size_t x : coarse.nodes)
            for (std::size_t y : coarse.nodes) {
              ChainRecord rec = check_chain(traj, x, y, k1, k1 + span, c.C, tol.harnack_rel);
              ok = ok && rec.pass;
              worst = std::max(worst, rec.worst_link_ratio);
              ++count;
            }
        chains.push_back({{"span", span}, {"evaluated", count}, {"worst_link_ratio", worst}, {"pass", ok}});
        chains_ok = chains_ok && ok;
      }
      rep["chains"] = chains;
      rep["chains_pass"] = chains_ok;
      write_json(dir / "reports" / "harnack.json", rep);
      verdict("harnack", pass && chains_ok);
    }
    json residuals{{"kind", "residuals"},
                   {"monge_ampere", nan_to_null(an.monge_ampere)},
                   {"monge_ampere_mirrored", nan_to_null(an.monge_ampere_mirrored)},
                   {"optimality", nan_to_null(an.optimality)},
                   {"fest", nan_to_null(an.fest)},
                   {"ctransform_ineq_violation", nan_to_null(an.ineq_violation)},
                   {"ctransform_equal_gap", nan_to_null(an.equal_gap)},
                   {"ctransform_smooth_ineq_violation", nan_to_null(an.smooth_ineq_violation)},
                   {"ctransform_smooth_equal_gap", nan_to_null(an.smooth_equal_gap)},
                   {"semiconcavity_margin", nan_to_null(an.semiconcavity_margin)},
                   {"thresholds",
                    {{"ma_max", tol.ma_max},
                     {"optimality_max", tol.optimality_max},
                     {"fest_max", tol.fest_max},
                     {"ctransform_identity", tol.ctransform_identity},
                     {"semiconcavity", tol.semiconcavity}}}};
    write_json(dir / "reports" / "residuals.json", residuals);
    if (c.wants("ma-residual")) verdict("ma-residual", max_finite(an.monge_ampere) <= tol.ma_max);
    if (c.wants("optimality")) verdict("optimality", max_finite(an.optimality) <= tol.optimality_max);
    if (c.wants("ctransform")) {
      bool ok = max_finite(an.ineq_violation) <= tol.ctransform_identity &&
                max_finite(an.equal_gap) <= tol.ctransform_identity && max_finite(an.fest) <= tol.fest_max;
      for (std::size_t k = 0; k < an.semiconcavity_margin.size(); ++k)
        ok = ok && an.semiconcavity_margin[k] >= -tol.semiconcavity * an.semiconcavity_floor[k];
      verdict("ctransform", ok);
    }
    if (c.wants("convergence")) {
      ConvergenceOutcome o = convergence_outcome(c, con);
      write_convergence(dir, o);
      verdict("convergence", o.monotone);
    }
    if (c.wants("ot-selftest")) {
      OtSelftestResult r = run_ot_selftest(bundled_battery());
      write_json(dir / "reports" / "ot_selftest.json", r.report);
      verdict("ot-selftest", r.pass);
    }

    // trajectory artifacts
    write_densities(dir, traj);
    auto h = traj.entropies();
    json objectives = json::array(), w2p = json::array(), w2d = json::array(), iters = json::array(),
         steps = json::array();
    for (const auto& d : traj.diagnostics()) {
      objectives.push_back(d.objective);
      w2p.push_back(d.w2_sq_plan);
      w2d.push_back(d.w2_sq_dual);
      iters.push_back(d.iterations);
      steps.push_back(diagnostics_json(d));
    }
    json manifest{{"kind", "manifest"},
                  {"K", c.K},
                  {"N", c.N},
                  {"M", c.M},
                  {"n", c.dim},
                  {"tau", tau},
                  {"eps", jc.terminal_eps()},
                  {"C", c.C},
                  {"seed", c.seed},
                  {"entropies", h},
                  {"objectives", objectives},
                  {"w2_sq_plan", w2p},
                  {"w2_sq_dual", w2d},
                  {"iterations", iters},
                  {"hessian_lower_bounds", an.a},
                  {"residual_maxima",
                   {{"monge_ampere", nullable(max_finite(an.monge_ampere))},
                    {"monge_ampere_mirrored", nullable(max_finite(an.monge_ampere_mirrored))},
                    {"optimality", nullable(max_finite(an.optimality))},
                    {"fest", nullable(max_finite(an.fest))},
                    {"ctransform_ineq_violation", nullable(max_finite(an.ineq_violation))},
                    {"ctransform_equal_gap", nullable(max_finite(an.equal_gap))}}},
                  {"steps", steps},
                  {"checks", checks},
                  {"pass", all_pass},
                  {"config", config_to_json(c)}};
    write_json(dir / "manifest.json", manifest);

    std::vector<std::vector<double>> ent, bound, res, dens;
    for (int k = 0; k <= traj.steps(); ++k) {
      ent.push_back({static_cast<double>(k), k * tau, h[static_cast<std::size_t>(k)]});
      bound.push_back({static_cast<double>(k), k * tau, an.a[static_cast<std::size_t>(k)], -c.C / (tau * (k + 1.0))});
      res.push_back({static_cast<double>(k), an.monge_ampere[static_cast<std::size_t>(k)],
                     an.optimality[static_cast<std::size_t>(k)], an.fest[static_cast<std::size_t>(k)]});
    }
    DensityField heat = heat_solve(rho0, c.K);
    for (std::size_t i = 0; i < traj.grid().node_count(); ++i) {
      Point p = traj.grid().node(i);
      std::vector<double> row{p[0]};
      if (c.dim == 2) row.push_back(p[1]);
      row.push_back(traj[static_cast<std::size_t>(c.N)][i]);
      row.push_back(heat[i]);
      dens.push_back(row);
    }
    write_text(dir / "plots" / "entropy.dat", plot_data({"k", "t", "entropy"}, ent));
    write_text(dir / "plots" / "hessian_bound.dat", plot_data({"k", "t", "a_k", "bound"}, bound));
    write_text(dir / "plots" / "residuals.dat", plot_data({"k", "monge_ampere", "optimality", "fest"}, res));
    write_text(dir / "plots" / "final_density.dat",
               plot_data(c.dim == 1 ? std::vector<std::string>{"x", "rho_N", "heat"}
                                    : std::vector<std::string>{"x", "y", "rho_N", "heat"},
                         dens));
    con.out << (all_pass ? "all checks pass" : "some checks failed") << "; artifacts in " << dir.string() << "\n";
    return all_pass ? exit_pass : exit_violation;
  } catch (const Error& e) {
    con.err << "runtime failure: " << e.what() << "\n";
    return exit_runtime;
  } catch (const fs::filesystem_error& e) {
    con.err << "runtime failure: " << e.what() << "\n";
    return exit_runtime;
  }
}

inline int cmd_run(const fs::path& config, const Console& con) {
  ExperimentConfig c;
  try {
    c = load_config(config);
  } catch (const ConfigError& e) {
    con.err << "config error: " << e.what() << "\n";
    return exit_usage;
  }
  return run_experiment(c, con);
}

inline int cmd_convergence(const fs::path& config, const Console& con) {
  ExperimentConfig c;
  try {
    c = load_config(config);
  } catch (const ConfigError& e) {
    con.err << "config error: " << e.what() << "\n";
    return exit_usage;
  }
  try {
    ConvergenceOutcome o = convergence_outcome(c, con);
    write_convergence(c.output_dir, o);
    con.out << convergence_csv(o.rows);
    con.out << (o.monotone ? "PASS  convergence" : "FAIL  convergence") << "\n";
    return o.monotone ? exit_pass : exit_violation;
  } catch (const Error& e) {
    con.err << "runtime failure: " << e.what() << "\n";
    return exit_runtime;
  }
}

inline int cmd_ot_selftest(const std::optional<fs::path>& battery_path, const Console& con) {
  OtBattery b;
  try {
    if (battery_path) {
      std::string text;
      try {
        text = read_text(*battery_path);
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
      json j;
      try {
        j = json::parse(text);
      } catch (const json::parse_error& e) {
        throw ConfigError(battery_path->string() + ": " + e.what());
      }
      b = parse_battery(j);
    } else {
      b = bundled_battery();
    }
  } catch (const ConfigError& e) {
    con.err << "battery error: " << e.what() << "\n";
    return exit_usage;
  }
  try {
    OtSelftestResult r = run_ot_selftest(b);
    con.out << "atomic instances: " << b.atomic.size() << ", mismatches: " << r.atomic_mismatches << "\n";
    con.out << "grid instances: " << b.grid.size() << ", worst |sinkhorn - exact|: " << short_real(r.worst_grid_gap)
            << " (limit " << short_real(b.sinkhorn_tol_abs) << ")\n";
    const fs::path dir = b.output_dir;
    write_json(dir / "ot_selftest.json", r.report);
    if (!r.pass) {
      write_json(dir / "ot_selftest_worst.json", r.worst_instance);
      con.out << "FAIL  ot-selftest; worst instance written to " << (dir / "ot_selftest_worst.json").string() << "\n";
      return exit_violation;
    }
    con.out << "PASS  ot-selftest\n";
    return exit_pass;
  } catch (const Error& e) {
    con.err << "runtime failure: " << e.what() << "\n";
    return exit_runtime;
  }
}

/// Re-checks a stored trajectory; reports go to <dir>/recheck.
inline int cmd_harnack(const fs::path& dir, const Console& con) {
  json manifest;
  std::optional<JkoTrajectory> traj;
  try {
    manifest = read_json(dir / "manifest.json");
    traj.emplace(read_trajectory(dir));
  } catch (const Error& e) {
    con.err << "cannot load trajectory: " << e.what() << "\n";
    return exit_usage;
  }
  try {
    ExperimentConfig c;
    if (manifest.contains("config")) {
      try {
        c = parse_config(manifest["config"]);
      } catch (const ConfigError& e) {
        con.err << "manifest config error: " << e.what() << "\n";
        return exit_usage;
      }
    }
    const Tolerances& tol = c.tolerances;
    auto a = hessian_lower_bounds(*traj);
    auto dh = check_diff_harnack(a, traj->tau(), c.C, tol.diff_harnack_abs, tol.diff_harnack_rel);
    auto rc = check_recursion(a, traj->tau(), tol.recursion_abs);
    auto hr = check_harnack_pair(*traj, default_harnack_samples(*traj, c.seed, c.sampling.node_limit, c.sampling.per_dim),
                                 tol.harnack_rel);
    write_json(dir / "recheck" / "diff_harnack.json", to_json(dh));
    write_json(dir / "recheck" / "recursion.json", to_json(rc));
    write_json(dir / "recheck" / "harnack.json", to_json(hr));
    con.out << (dh.pass ? "PASS  " : "FAIL  ") << "diff-harnack\n";
    con.out << (rc.pass ? "PASS  " : "FAIL  ") << "recursion\n";
    con.out << (hr.pass ? "PASS  " : "FAIL  ") << "harnack\n";
    return dh.pass && rc.pass && hr.pass ? exit_pass : exit_violation;
  } catch (const Error& e) {
    con.err << "runtime failure: " << e.what() << "\n";
    return exit_runtime;
  }
}

}  // namespace jkolab
