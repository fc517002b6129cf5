#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "jkolab/jko.hpp"

using namespace jkolab;
using Catch::Approx;

namespace {

DensityField cosine_density(const TorusGrid& g, double a = 0.5) {
  return DensityField::sample(g, [&](const Point& p) {
    double w = std::cos(kTwoPi * p[0]);
    if (g.dim() == 2) w *= std::cos(kTwoPi * p[1]);
    return 1.0 + a * w;
  });
}

/// Closed-form heat flow of 1 + a cos(2 pi x) [cos(2 pi y)].
double heat_cosine(const Point& p, int dim, double a, double t) {
  double w = std::cos(kTwoPi * p[0]);
  if (dim == 2) w *= std::cos(kTwoPi * p[1]);
  return 1.0 + a * std::exp(-4.0 * kPi * kPi * dim * t) * w;
}

double entropy_sum(const DensityField& d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) s += d[i] * std::log(d[i]);
  return s * d.grid().cell_volume();
}

JkoConfig config(int dim, int m, double K, int N) { return JkoConfig{K, N, TorusGrid(dim, m), {}}; }

}  // namespace

TEST_CASE("entropy of simple densities", "[jko]") {
  CHECK(entropy(DensityField::uniform(TorusGrid(1, 64))) == 0.0);
  DensityField two(TorusGrid(1, 2), {1.5, 0.5});
  CHECK(entropy(two) == Approx(0.5 * (1.5 * std::log(1.5) + 0.5 * std::log(0.5))).epsilon(1e-14));
  CHECK(entropy(two) == Approx(0.1308).margin(5e-5));
  double e256 = entropy(cosine_density(TorusGrid(1, 256)));
  double e1024 = entropy(cosine_density(TorusGrid(1, 1024)));
  CHECK(std::abs(e256 - e1024) <= 1e-6);
}

TEST_CASE("entropy is minimised by the uniform density", "[jko][property]") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.05, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    TorusGrid g(1 + trial % 2, 8);
    std::vector<double> v(g.node_count());
    for (auto& x : v) x = u(rng);
    REQUIRE(entropy(DensityField::normalized(g, v)) >= -1e-15);
  }
}

TEST_CASE("jko step keeps the uniform density", "[jko]") {
  for (int dim = 1; dim <= 2; ++dim) {
    JkoConfig cfg = config(dim, dim == 1 ? 64 : 16, 0.01, 4);
    auto r = jko_step(DensityField::uniform(cfg.grid), cfg);
    for (std::size_t i = 0; i < r.rho.size(); ++i) REQUIRE(r.rho[i] == Approx(1.0).margin(1e-10));
    CHECK(r.diagnostics.w2_sq_dual <= 1e-12);
  }
}

TEST_CASE("jko step follows the heat flow of a single mode", "[jko]") {
  JkoConfig cfg = config(1, 128, 1e-3, 1);
  auto rho0 = cosine_density(cfg.grid);
  auto r = jko_step(rho0, cfg);
  double gap = 0.0;
  for (std::size_t i = 0; i < r.rho.size(); ++i)
    gap = std::max(gap, std::abs(r.rho[i] - heat_cosine(cfg.grid.node(i), 1, 0.5, 1e-3)));
  CHECK(gap <= 5e-4);

  // in two dimensions the step must move mass across several cells (tau >> h^2)
  auto gap2 = [](int m) {
    JkoConfig c2 = config(2, m, 5e-3, 1);
    auto r2 = jko_step(cosine_density(c2.grid), c2);
    double g = 0.0;
    for (std::size_t i = 0; i < r2.rho.size(); ++i)
      g = std::max(g, std::abs(r2.rho[i] - heat_cosine(c2.grid.node(i), 2, 0.5, 5e-3)));
    return g;
  };
  double g32 = gap2(32);
  CHECK(g32 <= 0.03);
  CHECK(g32 < gap2(16));
}

TEST_CASE("scaling solver agrees with direct mirror descent", "[jko]") {
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> u(0.3, 1.7);
  for (int trial = 0; trial < 3; ++trial) {
    TorusGrid g(1, 16);
    std::vector<double> v(16);
    for (auto& x : v) x = u(rng);
    auto rho = DensityField::normalized(g, v);
    JkoConfig cfg{0.01, 1, g, {}};
    cfg.inner.oracle_mode = true;
    auto r = jko_step(rho, cfg);
    REQUIRE(r.diagnostics.oracle_objective_gap.has_value());
    CHECK(*r.diagnostics.oracle_objective_gap <= 1e-6);
    CHECK(*r.diagnostics.oracle_l1 <= 1e-3);

    auto md = mirror_descent_step(rho, cfg.tau(), cfg.terminal_eps());
    CHECK(std::abs(md.entropic_objective - r.diagnostics.entropic_objective) <= 1e-6);
    double l1 = 0.0;
    for (std::size_t i = 0; i < 16; ++i) l1 += std::abs(md.rho[i] - r.rho[i]) * g.cell_volume();
    CHECK(l1 <= 1e-3);
  }
  CHECK_THROWS_AS(mirror_descent_step(DensityField::uniform(TorusGrid(1, 64)), 0.01, 1e-3), Error);
}

TEST_CASE("step diagnostics are consistent", "[jko]") {
  JkoConfig cfg = config(1, 128, 0.05, 32);
  auto rho0 = cosine_density(cfg.grid);
  auto r = jko_step(rho0, cfg);
  const auto& d = r.diagnostics;
  CHECK(d.entropy == Approx(entropy_sum(r.rho)).margin(1e-14));
  CHECK(std::abs(d.objective - (0.5 * d.w2_sq_plan + cfg.tau() * entropy_sum(r.rho))) <= 1e-10);
  // the dual value is a lower bound and the plan cost an upper bound
  CHECK(d.w2_sq_dual <= d.w2_sq_plan);
  CHECK(d.w2_sq_plan - d.w2_sq_dual <= 4.0 * cfg.terminal_eps());
  // minimality against the candidate rho_prev
  CHECK(cfg.tau() * d.entropy + 0.5 * d.w2_sq_dual <= cfg.tau() * entropy_sum(rho0));
  CHECK(d.min_density == Approx(r.rho.min_value()));
  CHECK(d.inner_residual <= cfg.inner.tol);
}

TEST_CASE("jko step error paths", "[jko]") {
  JkoConfig cfg = config(1, 64, 0.01, 1);
  cfg.inner.max_iters = 1;
  try {
    jko_step(cosine_density(cfg.grid), cfg);
    FAIL("expected non-convergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::nonconvergence);
    CHECK(e.residual() > 0.0);
  }

  JkoConfig tiny = config(1, 64, 1e-6, 1);
  std::vector<double> v(64, 1.0);
  v[10] = 1e-14;
  try {
    jko_step(DensityField::normalized(tiny.grid, v), tiny);
    FAIL("expected positivity lost");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::positivity_lost);
  }
  JkoConfig bad = config(1, 64, -1.0, 1);
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("trajectory of the uniform density stays uniform", "[jko]") {
  JkoConfig cfg = config(1, 32, 0.05, 8);
  auto traj = run_trajectory(DensityField::uniform(cfg.grid), cfg);
  REQUIRE(traj.densities().size() == 9);
  for (const auto& d : traj.densities())
    for (std::size_t i = 0; i < d.size(); ++i) REQUIRE(d[i] == Approx(1.0).margin(1e-10));
}

TEST_CASE("trajectory approximates the heat flow", "[jko]") {
  JkoConfig cfg = config(1, 128, 0.05, 32);
  auto traj = run_trajectory(cosine_density(cfg.grid), cfg);
  double l1 = 0.0;
  for (std::size_t i = 0; i < traj[32].size(); ++i)
    l1 += std::abs(traj[32][i] - heat_cosine(cfg.grid.node(i), 1, 0.5, 0.05)) * cfg.grid.spacing();
  CHECK(l1 <= 0.02);

  auto h = traj.entropies();
  for (std::size_t k = 0; k < traj.densities().size(); ++k) {
    REQUIRE(std::abs(traj[k].mass() - 1.0) <= 1e-9);
    REQUIRE(traj[k].min_value() > 0.0);
    if (k > 0) {
      const auto& d = traj.diagnostics()[k - 1];
      REQUIRE(h[k] <= h[k - 1]);
      REQUIRE(h[k] + d.w2_sq_dual / (2.0 * traj.tau()) <= h[k - 1]);
    }
  }

  // u(t) = rho_floor(t / tau) and u(K) = rho_N
  CHECK(&traj.at_time(0.0) == &traj[0]);
  CHECK(&traj.at_time(0.99 * traj.tau()) == &traj[0]);
  CHECK(&traj.at_time(traj.tau()) == &traj[1]);
  CHECK(&traj.at_time(10.5 * traj.tau()) == &traj[10]);
  CHECK(&traj.at_time(0.05) == &traj[32]);
  CHECK_THROWS_AS(traj.at_time(0.06), Error);
}

TEST_CASE("two steps are closer to the heat flow than one", "[jko]") {
  auto gap = [](int n) {
    JkoConfig cfg = config(1, 128, 0.05, n);
    auto traj = run_trajectory(cosine_density(cfg.grid), cfg);
    double l1 = 0.0;
    for (std::size_t i = 0; i < cfg.grid.node_count(); ++i)
      l1 += std::abs(traj[static_cast<std::size_t>(n)][i] - heat_cosine(cfg.grid.node(i), 1, 0.5, 0.05)) *
            cfg.grid.spacing();
    return l1;
  };
  CHECK(gap(2) < gap(1));
}

TEST_CASE("trajectory errors carry the step index", "[jko]") {
  JkoConfig cfg = config(1, 64, 0.05, 4);
  cfg.inner.max_iters = 1;
  try {
    run_trajectory(cosine_density(cfg.grid), cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    REQUIRE(e.step().has_value());
    CHECK(*e.step() == 1);
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("monge-ampere residual", "[jko]") {
  TorusGrid g(1, 64);
  auto u = DensityField::uniform(g);
  CHECK(monge_ampere_residual(u, u, 0.01).max <= 1e-14);

  auto res = [](int m) {
    JkoConfig cfg = config(1, m, 1e-3, 1);
    auto rho0 = cosine_density(cfg.grid);
    return monge_ampere_residual(rho0, jko_step(rho0, cfg).rho, 1e-3);
  };
  auto r128 = res(128), r256 = res(256);
  CHECK(r128.max <= 1e-2);
  CHECK(r256.max < r128.max);
  CHECK(r128.max / r256.max >= 3.0);
  // the swapped orientation is not satisfied by a true step
  CHECK(r128.mirrored_max > 10.0 * r128.max);

  auto rho = cosine_density(TorusGrid(1, 128));
  CHECK(monge_ampere_residual(rho, rho, 0.01).max >= 1e-3);

  TorusGrid small(1, 16);
  auto steep = DensityField::sample(small, [](const Point& p) { return 1.0 + 0.9 * std::cos(kTwoPi * p[0]); });
  try {
    monge_ampere_residual(steep, steep, 1.0);
    FAIL("expected an orientation error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::map_not_orientation_preserving);
  }
}

TEST_CASE("optimality residual", "[jko]") {
  TorusGrid g(1, 64);
  auto u = DensityField::uniform(g);
  CHECK(optimality_residual(u, u, 0.01).max <= 1e-12);

  auto res = [](int m) {
    JkoConfig cfg = config(1, m, 1e-3, 1);
    auto rho0 = cosine_density(cfg.grid);
    return optimality_residual(rho0, jko_step(rho0, cfg).rho, 1e-3).max;
  };
  double r128 = res(128), r256 = res(256);
  CHECK(r128 <= 2e-2);
  CHECK(r128 / r256 == Approx(4.0).epsilon(0.25));

  // a pair produced by one explicit Euler step fails the identity much worse than the true step
  const double tau = 0.02;
  JkoConfig cfg = config(1, 128, tau, 1);
  auto rho0 = cosine_density(cfg.grid);
  double true_r = optimality_residual(rho0, jko_step(rho0, cfg).rho, tau).max;
  auto euler = DensityField::sample(cfg.grid, [&](const Point& p) {
    return 1.0 + 0.5 * (1.0 - 4.0 * kPi * kPi * tau) * std::cos(kTwoPi * p[0]);
  });
  double euler_r = optimality_residual(rho0, euler, tau).max;
  CHECK(euler_r >= 3.0 * true_r);

  // a convex potential with tau Hess f > 1 has no valid log det
  auto ct = c_transform(rho0.log(), tau);
  ct.smooth_f = GridField::sample(cfg.grid, [](const Point& p) { return 10.0 * std::cos(kTwoPi * p[0]); });
  try {
    optimality_residual(rho0, ct);
    FAIL("expected degenerate potential");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::degenerate_potential);
  }
}
