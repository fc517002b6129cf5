#include <catch_amalgamated.hpp>

#include <fstream>
#include <sstream>

#include "jkolab/experiment.hpp"

using namespace jkolab;
using Catch::Approx;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("jkolab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Capture {
  std::ostringstream out, err;
  Console console() { return Console{out, err, false}; }
};

fs::path write_config(const fs::path& dir, const json& j) {
  fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("config parsing applies defaults", "[cli]") {
  auto c = parse_config(json::object());
  CHECK(c.dim == 1);
  CHECK(c.M == 128);
  CHECK(c.K == 0.05);
  CHECK(c.N == 32);
  CHECK(c.C == 1.0);
  CHECK(c.initial.family == "cosine");
  CHECK(c.initial.amplitude == 0.5);
  CHECK(c.tolerances.harnack_rel == 1e-3);
  CHECK(c.tolerances.recursion_abs == 1e-6);
  // round trip
  auto again = parse_config(config_to_json(c));
  CHECK(config_to_json(again) == config_to_json(c));
}

TEST_CASE("config parsing rejects malformed documents", "[cli]") {
  auto rejects = [](const json& j) {
    try {
      parse_config(j);
    } catch (const ConfigError&) {
      return true;
    }
    return false;
  };
  CHECK(rejects(json{{"grid_size", 64}}));
  CHECK(rejects(json{{"initial", {{"amplitdue", 0.5}}}}));
  CHECK(rejects(json{{"tolerances", {{"harnack", 0.1}}}}));
  CHECK(rejects(json{{"inner", {{"eps", 0.1}}}}));
  CHECK(rejects(json{{"M", "large"}}));
  CHECK(rejects(json{{"dim", 3}}));
  CHECK(rejects(json{{"M", 4}}));
  CHECK(rejects(json{{"K", -1.0}}));
  CHECK(rejects(json{{"N", 0}}));
  CHECK(rejects(json{{"C", 0.4}}));
  CHECK(rejects(json{{"checks", {"harnack", "telepathy"}}}));
  CHECK(rejects(json{{"initial", {{"family", "gaussian"}}}}));
  CHECK(rejects(json{{"initial", {{"family", "asymmetric"}, {"amplitude", 0.8}, {"skew", 0.3}}}}));
  CHECK(rejects(json{{"convergence", {{"N_list", {8, 4}}}}}));
  CHECK(rejects(json{{"inner", {{"domain", "fourier"}}}}));
  CHECK(rejects(json::array()));
}

TEST_CASE("initial density families", "[cli]") {
  ExperimentConfig c;
  c.M = 64;
  c.initial.family = "uniform";
  CHECK(initial_density(c).max_value() == Approx(1.0));
  c.initial.family = "asymmetric";
  auto a = initial_density(c);
  CHECK(a[8] != Approx(a[56]));  // sin(4 pi x) breaks the reflection symmetry
  c.dim = 2;
  c.M = 16;
  c.initial.family = "cosine";
  auto d = initial_density(c);
  CHECK(d[0] == Approx(1.5));
}

TEST_CASE("run command exit codes", "[cli]") {
  fs::path dir = scratch("run");
  Capture cap;
  json uniform{{"M", 32},
               {"N", 8},
               {"initial", {{"family", "uniform"}}},
               {"checks", {"diff-harnack", "harnack", "recursion", "ma-residual", "optimality", "ctransform"}},
               {"tolerances", {{"diff_harnack_rel", 0.0}, {"harnack_rel", 0.0}}},
               {"output_dir", (dir / "uniform").string()}};
  CHECK(cmd_run(write_config(dir, uniform), cap.console()) == exit_pass);
  auto diff = read_json(dir / "uniform" / "reports" / "diff_harnack.json");
  for (const auto& r : diff["rows"]) CHECK(r["slack"].get<double>() >= 0.0);
  CHECK(fs::exists(dir / "uniform" / "manifest.json"));
  CHECK(fs::exists(dir / "uniform" / "densities" / "rho_0008.csv"));
  CHECK(fs::exists(dir / "uniform" / "plots" / "entropy.dat"));

  json folded{{"K", 5.0}, {"N", 1}, {"checks", {"ctransform"}}, {"output_dir", (dir / "folded").string()}};
  Capture cap2;
  CHECK(cmd_run(write_config(dir, folded), cap2.console()) == exit_runtime);
  CHECK(cap2.err.str().find("degenerate map") != std::string::npos);

  Capture cap3;
  CHECK(cmd_run(dir / "missing.json", cap3.console()) == exit_usage);
  std::ofstream(dir / "broken.json") << "{\"M\": 64,";
  CHECK(cmd_run(dir / "broken.json", cap3.console()) == exit_usage);

  // an impossible tolerance turns a check red
  json strict{{"M", 64},
              {"N", 4},
              {"checks", {"ma-residual"}},
              {"tolerances", {{"ma_max", 1e-12}}},
              {"output_dir", (dir / "strict").string()}};
  Capture cap4;
  CHECK(cmd_run(write_config(dir, strict), cap4.console()) == exit_violation);
  CHECK(cap4.out.str().find("FAIL  ma-residual") != std::string::npos);
}

TEST_CASE("runs are byte-for-byte reproducible", "[cli]") {
  fs::path dir = scratch("determinism");
  auto run_once = [&](const std::string& name) {
    json j{{"M", 32},
           {"N", 4},
           {"timing", false},
           {"checks", {"diff-harnack", "recursion", "harnack", "convergence"}},
           {"convergence", {{"N_list", {2, 4}}}},
           {"output_dir", (dir / name).string()}};
    json cfg = j;
    fs::path p = dir / (name + ".json");
    std::ofstream(p) << cfg.dump();
    Capture cap;
    return cmd_run(p, cap.console());
  };
  REQUIRE(run_once("a") == exit_pass);
  REQUIRE(run_once("b") == exit_pass);
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    fs::path rel = fs::relative(e.path(), dir / "a");
    std::string a = slurp(e.path()), b = slurp(dir / "b" / rel);
    if (rel.filename() == "manifest.json") {
      // only the output directory differs
      auto ja = json::parse(a), jb = json::parse(b);
      ja["config"].erase("output_dir");
      jb["config"].erase("output_dir");
      CHECK(ja == jb);
    } else {
      INFO(rel.string());
      CHECK(a == b);
    }
    ++compared;
  }
  CHECK(compared > 10);
}

TEST_CASE("stored trajectories round-trip exactly and can be rechecked", "[cli]") {
  fs::path dir = scratch("recheck");
  json j{{"M", 64}, {"N", 8}, {"checks", {"diff-harnack"}}, {"output_dir", (dir / "run").string()}};
  Capture cap;
  REQUIRE(cmd_run(write_config(dir, j), cap.console()) == exit_pass);
  auto traj = read_trajectory(dir / "run");
  ExperimentConfig c = parse_config(j);
  auto fresh = run_trajectory(initial_density(c), c.jko());
  for (std::size_t k = 0; k <= 8; ++k)
    for (std::size_t i = 0; i < 64; ++i) REQUIRE(traj[k][i] == fresh[k][i]);
  Capture cap2;
  CHECK(cmd_harnack(dir / "run", cap2.console()) == exit_pass);
  CHECK(fs::exists(dir / "run" / "recheck" / "harnack.json"));
  Capture cap3;
  CHECK(cmd_harnack(dir / "nowhere", cap3.console()) == exit_usage);
}

TEST_CASE("convergence command", "[cli]") {
  fs::path dir = scratch("convergence");
  json uniform{{"M", 32},
               {"initial", {{"family", "uniform"}}},
               {"convergence", {{"N_list", {4, 8}}}},
               {"output_dir", (dir / "u").string()}};
  Capture cap;
  CHECK(cmd_convergence(write_config(dir, uniform), cap.console()) == exit_pass);
  auto rep = read_json(dir / "u" / "reports" / "convergence.json");
  for (const auto& r : rep["rows"]) CHECK(r["l1_gap"].get<double>() <= 1e-9);

  json single{{"M", 64}, {"convergence", {{"N_list", {8}}}}, {"output_dir", (dir / "s").string()}};
  Capture cap2;
  CHECK(cmd_convergence(write_config(dir, single), cap2.console()) == exit_pass);
  std::string csv = slurp(dir / "s" / "convergence.csv");
  CHECK(csv.rfind("N,l1_gap,linf_gap,runtime_ms\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("bundled OT battery", "[cli]") {
  auto b = bundled_battery();
  CHECK(b.atomic.size() >= 50);
  CHECK(b.grid.size() >= 1);
  for (const auto& inst : b.atomic) CHECK(inst.mu.size() <= 6);
  auto r = run_ot_selftest(b);
  CHECK(r.pass);
  CHECK(r.atomic_mismatches == 0);
  CHECK(r.worst_grid_gap <= 1e-3);
}

TEST_CASE("OT self-test exit codes", "[cli]") {
  fs::path dir = scratch("ot");
  Capture cap;
  CHECK(cmd_ot_selftest(std::nullopt, cap.console()) == exit_pass);
  fs::remove("ot_selftest.json");

  std::ofstream(dir / "empty.json") << "";
  CHECK(cmd_ot_selftest(dir / "empty.json", cap.console()) == exit_usage);
  std::ofstream(dir / "none.json") << "{}";
  CHECK(cmd_ot_selftest(dir / "none.json", cap.console()) == exit_usage);
  std::ofstream(dir / "typo.json") << R"({"atomc": []})";
  CHECK(cmd_ot_selftest(dir / "typo.json", cap.console()) == exit_usage);

  json biased{{"terminal_eps", 0.1},
              {"output_dir", dir.string()},
              {"random_grid", {{"count", 2}, {"dim", 1}, {"M", 16}, {"seed", 4}}}};
  std::ofstream(dir / "biased.json") << biased.dump();
  Capture cap2;
  CHECK(cmd_ot_selftest(dir / "biased.json", cap2.console()) == exit_violation);
  auto worst = read_json(dir / "ot_selftest_worst.json");
  CHECK(worst["kind"] == "grid");
  CHECK(worst["gap"].get<double>() > 1e-3);
}

TEST_CASE("OT self-test detects a wrong exact solver result", "[cli]") {
  // a battery instance whose brute force and exact values agree must stay identical
  auto mu = DiscreteMeasure::uniform(1, {{0.0, 0}, {0.25, 0}, {0.5, 0}});
  auto nu = DiscreteMeasure::uniform(1, {{0.1, 0}, {0.35, 0}, {0.9, 0}});
  CHECK(brute_force_assignment(mu, nu) == w2_exact_small(mu, nu).value);
  // and the brute force itself is independent of the solver: swap one target
  auto moved = nu;
  moved.points[2][0] = 0.6;
  CHECK(brute_force_assignment(mu, moved) != brute_force_assignment(mu, nu));
}
