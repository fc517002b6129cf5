#pragma once

// Serialization: grid fields and plans as CSV with JSON headers, trajectory
// directories, report JSON, aligned text tables and gnuplot data files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "jkolab/error.hpp"
#include "jkolab/harnack.hpp"
#include "jkolab/jko.hpp"
#include "jkolab/reference.hpp"
#include "jkolab/torus.hpp"
#include "jkolab/transport.hpp"

namespace jkolab {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::io, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Grid fields and plans
// ---------------------------------------------------------------------------

inline json grid_header(const TorusGrid& g, const std::string& kind) {
  return json{{"dim", g.dim()}, {"M", g.points_per_dim()}, {"kind", kind}};
}

/// One value per line in row-major node order, plus `<stem>.json` header.
inline void write_field(const fs::path& csv, const GridField& f, const std::string& kind) {
  std::string text;
  text.reserve(f.size() * 24);
  for (double v : f.values()) {
    text += format_real(v);
    text += '\n';
  }
  write_text(csv, text);
  fs::path header = csv;
  header.replace_extension(".json");
  write_json(header, grid_header(f.grid(), kind));
}

inline GridField read_field(const fs::path& csv, const TorusGrid& grid) {
  std::istringstream in(read_text(csv));
  std::vector<double> v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      v.push_back(std::stod(line));
    } catch (const std::exception&) {
      throw Error(ErrorCode::io, csv.string() + ": bad number '" + line + "'");
    }
  }
  if (v.size() != grid.node_count())
    throw Error(ErrorCode::io, csv.string() + ": expected " + std::to_string(grid.node_count()) + " values, found " +
                                   std::to_string(v.size()));
  return GridField(grid, std::move(v));
}

/// Sparse triplets i,j,mass for entries above `threshold`, plus a JSON header.
inline void write_plan(const fs::path& csv, const TransportPlan& plan, const TorusGrid& grid,
                       double threshold = 0.0) {
  std::string text = "i,j,mass\n";
  std::size_t nnz = 0;
  for (std::size_t i = 0; i < plan.rows; ++i)
    for (std::size_t j = 0; j < plan.cols; ++j) {
      double m = plan(i, j);
      if (m <= threshold) continue;
      text += std::to_string(i) + "," + std::to_string(j) + "," + format_real(m) + "\n";
      ++nnz;
    }
  write_text(csv, text);
  fs::path header = csv;
  header.replace_extension(".json");
  json h = grid_header(grid, "plan");
  h["rows"] = plan.rows;
  h["cols"] = plan.cols;
  h["nnz"] = nnz;
  h["threshold"] = threshold;
  h["cost_value"] = plan.cost_value;
  write_json(header, h);
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

inline std::string density_file_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rho_%04d.csv", k);
  return buf;
}

inline json diagnostics_json(const StepDiagnostics& d) {
  json j{{"iterations", d.iterations},
         {"inner_residual", d.inner_residual},
         {"eps", d.eps},
         {"used_log_domain", d.used_log_domain},
         {"w2_sq_plan", d.w2_sq_plan},
         {"w2_sq_dual", d.w2_sq_dual},
         {"entropy", d.entropy},
         {"objective", d.objective},
         {"entropic_objective", d.entropic_objective},
         {"min_density", d.min_density}};
  if (d.oracle_objective_gap) j["oracle_objective_gap"] = *d.oracle_objective_gap;
  if (d.oracle_l1) j["oracle_l1"] = *d.oracle_l1;
  return j;
}

/// Densities under <dir>/densities; the manifest is written by the caller.
inline void write_densities(const fs::path& dir, const JkoTrajectory& traj) {
  for (int k = 0; k <= traj.steps(); ++k)
    write_field(dir / "densities" / density_file_name(k), traj[static_cast<std::size_t>(k)].field(), "density");
}

/// Rebuilds a trajectory from a directory written by the run command.
inline JkoTrajectory read_trajectory(const fs::path& dir) {
  json m = read_json(dir / "manifest.json");
  JkoConfig cfg;
  try {
    cfg.K = m.at("K").get<double>();
    cfg.N = m.at("N").get<int>();
    cfg.grid = TorusGrid(m.at("n").get<int>(), m.at("M").get<int>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, "manifest: " + std::string(e.what()));
  }
  std::vector<DensityField> rho;
  for (int k = 0; k <= cfg.N; ++k)
    rho.emplace_back(read_field(dir / "densities" / density_file_name(k), cfg.grid));
  return JkoTrajectory(cfg, std::move(rho));
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const DiffHarnackReport& r) {
  json rows = json::array();
  for (const auto& x : r.rows)
    rows.push_back({{"k", x.k}, {"t", x.t}, {"a", x.a}, {"bound", x.bound}, {"slack", x.slack}, {"pass", x.pass}});
  json j{{"kind", "diff_harnack"}, {"C", r.C}, {"tol_abs", r.tol_abs}, {"tol_rel", r.tol_rel},
         {"pass", r.pass},         {"worst_slack", nullable(r.worst_slack)}};
  j["smallest_feasible_C"] = r.smallest_feasible_C ? json(*r.smallest_feasible_C) : json(nullptr);
  j["rows"] = rows;
  return j;
}

inline json to_json(const RecursionReport& r) {
  json rows = json::array();
  for (const auto& x : r.rows)
    rows.push_back({{"k", x.k},
                    {"a_prev", x.a_prev},
                    {"a", x.a},
                    {"lhs", nullable(x.lhs)},
                    {"rhs", nullable(x.rhs)},
                    {"satisfied", x.satisfied},
                    {"skipped", x.skipped}});
  return json{{"kind", "recursion"}, {"tol_abs", r.tol_abs}, {"pass", r.pass},
              {"worst_margin", nullable(r.worst_margin)}, {"skipped", r.skipped}, {"rows", rows}};
}

inline json to_json(const LemmaTable& t) {
  json rows = json::array();
  for (const auto& x : t.rows)
    rows.push_back({{"k", x.k}, {"lhs", x.lhs}, {"rhs", x.rhs}, {"inequality", x.inequality},
                    {"threshold", x.threshold}, {"agree", x.agree}});
  return json{{"C", t.C}, {"threshold", t.threshold}, {"all_agree", t.all_agree}, {"rows", rows}};
}

inline json to_json(const HarnackTuple& t) {
  return json{{"x", t.x},     {"y", t.y},     {"t1", t.t1},       {"t2", t.t2},     {"k1", t.k1},
              {"k2", t.k2},   {"lhs", t.lhs}, {"rhs", t.rhs},     {"ratio", t.ratio}, {"pass", t.pass}};
}

inline json to_json(const HarnackReport& r) {
  json tuples = json::array(), viol = json::array();
  for (const auto& t : r.tuples) tuples.push_back(to_json(t));
  for (const auto& t : r.violations) viol.push_back(to_json(t));
  return json{{"kind", "harnack"},
              {"tol_rel", r.tol_rel},
              {"pass", r.pass},
              {"evaluated", r.evaluated},
              {"rejected_times", r.rejected_times},
              {"worst_ratio", nullable(r.worst_ratio)},
              {"worst", to_json(r.worst)},
              {"violations", viol},
              {"tuples", tuples}};
}

inline json to_json(const ChainRecord& c) {
  return json{{"x", c.x},
              {"y", c.y},
              {"k1", c.k1},
              {"k2", c.k2},
              {"values", c.values},
              {"chained", c.chained},
              {"final_bound", c.final_bound},
              {"worst_link_ratio", c.worst_link_ratio},
              {"pass", c.pass}};
}

inline json to_json(const std::vector<ConvergenceRow>& rows) {
  json a = json::array();
  for (const auto& r : rows)
    a.push_back({{"N", r.N}, {"l1_gap", r.l1_gap}, {"linf_gap", r.linf_gap}, {"runtime_ms", r.runtime_ms}});
  return a;
}

inline std::string convergence_csv(const std::vector<ConvergenceRow>& rows) {
  std::string s = "N,l1_gap,linf_gap,runtime_ms\n";
  for (const auto& r : rows)
    s += std::to_string(r.N) + "," + format_real(r.l1_gap) + "," + format_real(r.linf_gap) + "," +
         format_real(r.runtime_ms) + "\n";
  return s;
}

/// Fixed-width text table; every cell is right-aligned to its column width.
inline std::string text_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) w[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size() && c < w.size(); ++c) w[c] = std::max(w[c], r[c].size());
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t c = 0; c < w.size(); ++c) {
      const std::string& v = c < cells.size() ? cells[c] : std::string();
      if (c) s += "  ";
      s += std::string(w[c] - v.size(), ' ') + v;
    }
    return s + "\n";
  };
  std::string out = line(header);
  std::size_t total = 0;
  for (auto x : w) total += x;
  out += std::string(total + 2 * (w.size() - 1), '-') + "\n";
  for (const auto& r : rows) out += line(r);
  return out;
}

inline std::string short_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string to_text(const DiffHarnackReport& r) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& x : r.rows)
    rows.push_back({std::to_string(x.k), short_real(x.t), short_real(x.a), short_real(x.bound), short_real(x.slack),
                    x.pass ? "pass" : "FAIL"});
  std::string s = "differential Harnack, C = " + short_real(r.C) + ": " + (r.pass ? "pass" : "FAIL") + "\n";
  return s + text_table({"k", "t", "a_k", "bound", "slack", "verdict"}, rows);
}

inline std::string to_text(const RecursionReport& r) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& x : r.rows)
    rows.push_back({std::to_string(x.k), short_real(x.a_prev), short_real(x.a),
                    x.skipped ? "-" : short_real(x.lhs), x.skipped ? "-" : short_real(x.rhs),
                    x.skipped ? "skipped" : (x.satisfied ? "pass" : "FAIL")});
  std::string s = std::string("recursion: ") + (r.pass ? "pass" : "FAIL") + "\n";
  return s + text_table({"k", "a_{k-1}", "a_k", "lhs", "rhs", "verdict"}, rows);
}

inline std::string to_text(const HarnackReport& r) {
  std::vector<std::vector<std::string>> rows;
  auto add = [&](const char* label, const HarnackTuple& t) {
    rows.push_back({label, std::to_string(t.x), std::to_string(t.y), short_real(t.t1), short_real(t.t2),
                    short_real(t.ratio), t.pass ? "pass" : "FAIL"});
  };
  add("worst", r.worst);
  for (const auto& t : r.violations) add("violation", t);
  std::string s = "Harnack inequality: " + std::to_string(r.evaluated) + " tuples, worst ratio " +
                  short_real(r.worst_ratio) + ", " + (r.pass ? "pass" : "FAIL") + "\n";
  return s + text_table({"", "x", "y", "t1", "t2", "ratio", "verdict"}, rows);
}

/// Columns separated by single spaces, one row per line (gnuplot friendly).
inline std::string plot_data(const std::vector<std::string>& columns, const std::vector<std::vector<double>>& rows) {
  std::string s = "#";
  for (const auto& c : columns) s += " " + c;
  s += "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) s += ' ';
      s += format_real(r[i]);
    }
    s += '\n';
  }
  return s;
}

}  // namespace jkolab
