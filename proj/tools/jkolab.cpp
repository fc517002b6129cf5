// Command-line driver: run, convergence, harnack and ot-selftest.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "jkolab/jkolab.hpp"

int main(int argc, char** argv) {
  CLI::App app{"JKO heat-flow experiments and Harnack checks on the flat torus"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "progress messages on stderr");

  std::string run_config;
  auto* run = app.add_subcommand("run", "run a trajectory and the configured checks");
  run->add_option("config", run_config, "experiment config (JSON)")->required();

  std::string conv_config;
  auto* conv = app.add_subcommand("convergence", "L1 gap to the heat solution for a list of step counts");
  conv->add_option("config", conv_config, "experiment config (JSON)")->required();

  std::string harnack_dir;
  auto* harnack = app.add_subcommand("harnack", "re-check Harnack inequalities on a stored trajectory");
  harnack->add_option("dir", harnack_dir, "output directory of a previous run")->required();

  std::string battery;
  auto* ot = app.add_subcommand("ot-selftest", "exact and entropic OT solvers against independent references");
  ot->add_option("battery", battery, "battery JSON (bundled battery when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : jkolab::exit_usage;
  }

  jkolab::Console con{std::cout, std::cerr, verbose};
  if (*run) return jkolab::cmd_run(run_config, con);
  if (*conv) return jkolab::cmd_convergence(conv_config, con);
  if (*harnack) return jkolab::cmd_harnack(harnack_dir, con);
  if (*ot) return jkolab::cmd_ot_selftest(battery.empty() ? std::nullopt : std::optional<jkolab::fs::path>(battery), con);
  return jkolab::exit_usage;
}
