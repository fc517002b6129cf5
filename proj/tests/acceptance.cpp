// Acceptance suite: one PASS/FAIL line per criterion, exit 0 only if all pass.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "jkolab/jkolab.hpp"

using namespace jkolab;

namespace {

constexpr double kSinkhornTol = 1e-3;
constexpr double kSinkhornEps = 1e-5;
constexpr int kMinAtomicInstances = 50;
constexpr double kDiffHarnackRel = 1e-3;
constexpr double kRecursionAbs = 1e-6;
constexpr int kLemmaKMax = 50;
constexpr double kHarnackRel = 1e-3;
constexpr double kMassTol = 1e-9;
constexpr double kIdentityTol = 1e-12;
constexpr double kSemiconcavity = 5e-3;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const std::string& name, const Verdict& v) {
  std::printf("%s  criterion %d: %s;%s\n", v.pass ? "PASS" : "FAIL", id, name.c_str(), v.detail.str().c_str());
  std::fflush(stdout);
  if (!v.pass) ++failures;
}

template <class F>
void criterion(int id, const std::string& name, F&& body) {
  Verdict v;
  try {
    body(v);
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail << " [exception: " << e.what() << "]";
  }
  report(id, name, v);
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.dim = 1;
  c.M = 128;
  c.K = 0.05;
  c.N = 32;
  c.C = 1.0;
  return c;
}

ExperimentConfig smoke_config() {
  ExperimentConfig c = default_config();
  c.dim = 2;
  c.M = 32;
  c.N = 8;
  return c;
}

double max_of(const std::vector<double>& v) { return max_finite(v); }

bool identities_and_semiconcavity(const TrajectoryAnalysis& an, Verdict& v, const std::string& tag) {
  bool ok = max_of(an.ineq_violation) <= kIdentityTol && max_of(an.equal_gap) <= kIdentityTol;
  for (std::size_t k = 0; k < an.semiconcavity_margin.size(); ++k)
    ok = ok && an.semiconcavity_margin[k] >= -kSemiconcavity * an.semiconcavity_floor[k];
  v.detail << " " << tag << " ineq " << max_of(an.ineq_violation) << ", equal " << max_of(an.equal_gap);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: acceptance <golden/default_run.json>\n";
    return exit_usage;
  }
  json golden;
  try {
    golden = read_json(argv[1]);
  } catch (const std::exception& e) {
    std::cerr << "cannot read golden file: " << e.what() << "\n";
    return exit_usage;
  }

  const ExperimentConfig dc = default_config();
  const DensityField rho0 = initial_density(dc);
  const JkoTrajectory traj = run_trajectory(rho0, dc.jko());
  const double tau = traj.tau();
  const TrajectoryAnalysis an = analyze_trajectory(traj, true, true, true);

  criterion(1, "OT oracle equivalence", [&](Verdict& v) {
    OtBattery b = bundled_battery();
    b.terminal_eps = kSinkhornEps;
    b.sinkhorn_tol_abs = kSinkhornTol;
    OtSelftestResult r = run_ot_selftest(b);
    std::size_t grid16 = 0;
    for (const auto& g : b.grid) grid16 += g.mu.grid().points_per_dim() == 16;
    v.detail << " " << b.atomic.size() << " atomic instances, " << r.atomic_mismatches << " mismatches; "
             << b.grid.size() << " grid instances (" << grid16 << " at M=16), worst gap " << r.worst_grid_gap;
    v.require(static_cast<int>(b.atomic.size()) >= kMinAtomicInstances, "at least 50 atomic instances");
    v.require(grid16 > 0, "M=16 grid instances present");
    v.require(r.atomic_mismatches == 0, "brute force equals exact solver");
    v.require(r.worst_grid_gap <= kSinkhornTol, "sinkhorn within 1e-3");
  });

  criterion(2, "heat convergence in L1", [&](Verdict& v) {
    const std::vector<int> n_list{4, 8, 16, 32};
    auto rows = convergence_study(rho0, dc.K, n_list, dc.inner, false);
    const json& g = golden.at("convergence");
    const double headroom = g.at("rel_headroom").get<double>();
    bool monotone = true, within = true;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i > 0 && rows[i].l1_gap > rows[i - 1].l1_gap) monotone = false;
      double frozen = g.at("measured_l1_gap").at(std::to_string(rows[i].N)).get<double>();
      within = within && rows[i].l1_gap <= frozen * (1.0 + headroom);
      v.detail << " N=" << rows[i].N << " gap " << rows[i].l1_gap << (i + 1 < rows.size() ? "," : "");
    }
    v.require(monotone, "non-increasing in N");
    v.require(rows.back().l1_gap < rows.front().l1_gap / 2.0, "gap(32) < gap(4)/2");
    v.require(within, "gaps within golden thresholds");
  });

  criterion(3, "differential Harnack", [&](Verdict& v) {
    auto rep = check_diff_harnack(an.a, tau, 1.0, 0.0, kDiffHarnackRel);
    ExperimentConfig uc = default_config();
    uc.M = 64;
    uc.N = 8;
    uc.initial.family = "uniform";
    JkoTrajectory ut = run_trajectory(initial_density(uc), uc.jko());
    auto strict = check_diff_harnack(ut, 1.0, 0.0, 0.0);
    v.detail << " default worst slack " << rep.worst_slack << " over " << rep.rows.size()
             << " steps; uniform strict " << (strict.pass ? "pass" : "fail");
    v.require(rep.pass, "a_k >= -1/(tau(k+1)) - 1e-3 |bound| on the default run");
    v.require(strict.pass, "strict mode on the uniform trajectory");
  });

  criterion(4, "recursion and scalar lemma", [&](Verdict& v) {
    auto rep = check_recursion(an.a, tau, kRecursionAbs);
    std::size_t active = rep.rows.size() - rep.skipped;
    v.detail << " " << active << " steps checked, worst margin " << rep.worst_margin;
    v.require(rep.pass && active > 0, "recursion within 1e-6");
    for (double C : {0.51, 0.6, 0.75, 0.9, 1.0}) {
      auto t = scalar_lemma(C, kLemmaKMax);
      v.require(t.all_agree, "lemma agreement for C=" + std::to_string(C));
    }
    auto t = scalar_lemma(0.51, kLemmaKMax);
    int flip = 0;
    for (const auto& r : t.rows)
      if (r.inequality && flip == 0) flip = r.k;
    v.detail << "; lemma tables agree, C=0.51 flips at k=" << flip;
    v.require(flip == 13 && !t.rows[11].inequality, "flip at k=13 for C=0.51");
  });

  criterion(5, "Harnack inequality and chaining", [&](Verdict& v) {
    auto samples = default_harnack_samples(traj, dc.seed, dc.sampling.node_limit, dc.sampling.per_dim);
    auto rep = check_harnack_pair(traj, samples, kHarnackRel, 0);
    v.detail << " " << rep.evaluated << " tuples, worst ratio " << rep.worst_ratio << ";";
    v.require(rep.pass, "all sampled tuples within 1e-3");
    HarnackSamples coarse = default_harnack_samples(traj, dc.seed, 0, dc.sampling.chain_nodes);
    for (int span : {1, 2, 4}) {
      bool ok = true;
      double worst = 0.0;
      for (int k1 = 1; k1 + span <= traj.steps(); ++k1)
        for (std::size_t x : coarse.nodes)
          for (std::size_t y : coarse.nodes) {
            ChainRecord r = check_chain(traj, x, y, k1, k1 + span, 1.0, kHarnackRel);
            ok = ok && r.pass;
            worst = std::max(worst, r.worst_link_ratio);
          }
      v.detail << " span " << span << " worst link " << worst << (span < 4 ? "," : "");
      v.require(ok, "chain consistency for span " + std::to_string(span));
    }
  });

  criterion(6, "identity residuals", [&](Verdict& v) {
    const json& lim = golden.at("residual_maxima").at("limit");
    const double shrink = golden.at("refinement").at("min_shrink_factor").get<double>();
    ExperimentConfig fine = default_config();
    fine.M = golden.at("refinement").at("M").get<int>();
    JkoTrajectory ft = run_trajectory(initial_density(fine), fine.jko());
    TrajectoryAnalysis fa = analyze_trajectory(ft, true, true, true);
    const std::pair<const char*, std::pair<double, double>> rows[] = {
        {"monge_ampere", {max_of(an.monge_ampere), max_of(fa.monge_ampere)}},
        {"optimality", {max_of(an.optimality), max_of(fa.optimality)}},
        {"fest", {max_of(an.fest), max_of(fa.fest)}},
    };
    for (const auto& [name, vals] : rows) {
      double factor = vals.first / vals.second;
      v.detail << " " << name << " " << vals.first << " -> " << vals.second << " (x" << factor << ")";
      v.require(vals.first <= lim.at(name).get<double>(), std::string(name) + " within golden maximum");
      v.require(factor >= shrink, std::string(name) + " shrinks by 3 at M=256");
    }
  });

  criterion(7, "structural invariants", [&](Verdict& v) {
    auto st = structural_checks(traj, kMassTol);
    v.detail << " 1d mass " << st.worst_mass_error << ", min density " << st.min_density << ",";
    v.require(st.pass, "mass, positivity and descent on the default run");
    v.require(identities_and_semiconcavity(an, v, "1d"), "c-transform identities on the default run");
    ExperimentConfig sc = smoke_config();
    JkoTrajectory st2 = run_trajectory(initial_density(sc), sc.jko());
    auto s2 = structural_checks(st2, kMassTol);
    TrajectoryAnalysis a2 = analyze_trajectory(st2, true, false, false);
    v.detail << "; 2d mass " << s2.worst_mass_error << ", min density " << s2.min_density << ",";
    v.require(s2.pass, "mass, positivity and descent on the 2d smoke run");
    v.require(identities_and_semiconcavity(a2, v, "2d"), "c-transform identities on the 2d smoke run");
  });

  criterion(8, "defect sensitivity", [&](Verdict& v) {
    // perturbed c-transform
    GridField l1 = traj[1].log();
    CTransformField ct = c_transform(l1, tau);
    ct.f[17] += 1e-6;
    auto id = verify_ctransform_identities(ct, l1);
    bool ct_flagged = id.max_ineq_violation > kIdentityTol && id.worst_ineq_node == 17;
    // Monge-Ampere residual on a pair two steps apart
    auto ma = monge_ampere_residual(traj[0], traj[2], tau);
    bool ma_flagged = ma.max > dc.tolerances.ma_max;
    // biased sinkhorn
    OtBattery biased = bundled_battery();
    biased.terminal_eps = 1e-1;
    biased.sinkhorn_tol_abs = kSinkhornTol;
    auto ot = run_ot_selftest(biased);
    bool ot_flagged = !ot.pass;
    // spike that vanishes in one step
    std::vector<double> spike_values(traj.grid().node_count(), 1.0);
    spike_values[20] = 50.0;
    auto spike = DensityField::normalized(traj.grid(), spike_values);
    auto step = check_step_harnack(spike, traj[1], 1, tau, 1.0, {}, kHarnackRel);
    bool step_flagged = !step.pass;
    v.detail << " c-transform violation " << id.max_ineq_violation << ", mismatched MA " << ma.max
             << ", biased sinkhorn gap " << ot.worst_grid_gap << ", fake step ratio " << step.worst_ratio;
    v.require(ct_flagged, "perturbed c-transform flagged");
    v.require(ma_flagged, "mismatched MA pair flagged");
    v.require(ot_flagged, "biased sinkhorn flagged");
    v.require(step_flagged, "fake step pair flagged");
  });

  std::printf("%s: %d of 8 criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? exit_pass : exit_violation;
}
