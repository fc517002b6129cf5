#pragma once

// Spectral heat flow on the torus and L1 / Linf comparisons against JKO runs.

#include <chrono>
#include <cmath>
#include <functional>
#include <vector>

#include "jkolab/fourier.hpp"
#include "jkolab/jko.hpp"
#include "jkolab/torus.hpp"

namespace jkolab {

/// Solution of du/dt = Laplacian u at time t, by damping each Fourier mode
/// with exp(-4 pi^2 |m|^2 t).
inline DensityField heat_solve(const DensityField& rho0, double t) {
  require(t >= 0.0 && std::isfinite(t), ErrorCode::invalid_argument, "time must be non-negative");
  SpectralState s(rho0.field());
  auto c = s.coefficients();
  for (std::size_t k = 0; k < c.size(); ++k) {
    MultiIndex m = s.mode(k);
    double m2 = static_cast<double>(m[0]) * m[0] + static_cast<double>(m[1]) * m[1];
    c[k] *= std::exp(-4.0 * kPi * kPi * m2 * t);
  }
  GridField u = s.to_field();
  std::vector<double> v(u.data());
  return DensityField::normalized(rho0.grid(), std::move(v));
}

/// sum |u_i - v_i| h^n.
inline double l1_distance(const GridField& u, const GridField& v) {
  require_same_grid(u.grid(), v.grid());
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += std::abs(u[i] - v[i]);
  return s * u.grid().cell_volume();
}

inline double linf_distance(const GridField& u, const GridField& v) {
  require_same_grid(u.grid(), v.grid());
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s = std::max(s, std::abs(u[i] - v[i]));
  return s;
}

struct ConvergenceRow {
  int N = 0;
  double l1_gap = 0.0;
  double linf_gap = 0.0;
  double runtime_ms = 0.0;
};

/// JKO runs to time K for each N, compared with the spectral heat solution.
inline std::vector<ConvergenceRow> convergence_study(const DensityField& rho0, double K, const std::vector<int>& n_list,
                                                     const InnerSolverSettings& inner = {}, bool timing = true,
                                                     const std::function<void(const JkoTrajectory&)>& on_run = {}) {
  require(!n_list.empty(), ErrorCode::invalid_argument, "empty N list");
  for (std::size_t i = 1; i < n_list.size(); ++i)
    require(n_list[i] > n_list[i - 1], ErrorCode::invalid_argument, "N list must be increasing");
  DensityField exact = heat_solve(rho0, K);
  std::vector<ConvergenceRow> rows;
  for (int n : n_list) {
    JkoConfig cfg{K, n, rho0.grid(), inner};
    auto t0 = std::chrono::steady_clock::now();
    JkoTrajectory traj = run_trajectory(rho0, cfg);
    auto t1 = std::chrono::steady_clock::now();
    ConvergenceRow row;
    row.N = n;
    row.l1_gap = l1_distance(traj[static_cast<std::size_t>(n)], exact);
    row.linf_gap = linf_distance(traj[static_cast<std::size_t>(n)], exact);
    row.runtime_ms = timing ? std::chrono::duration<double, std::milli>(t1 - t0).count() : 0.0;
    rows.push_back(row);
    if (on_run) on_run(traj);
  }
  return rows;
}

}  // namespace jkolab
