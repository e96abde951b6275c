#include <cstdio>
#include <exception>

#include <omp.h>

#include <CLI11.hpp>

#include "commands.hpp"
#include "dynainfer/errors.hpp"

namespace {

int exit_code(const dynainfer::Error& e) {
  if (dynamic_cast<const dynainfer::NumericError*>(&e) ||
      dynamic_cast<const dynainfer::RankDeficiencyError*>(&e) ||
      dynamic_cast<const dynainfer::StiffnessError*>(&e)) {
    return 3;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace dynainfer::cli;
  CLI::App app{"Multi-environment dynamics learning with inferred environment labels"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  std::uint64_t seed = 0;
  std::string out;
  auto* seed_opt = app.add_option("--seed", seed, "Run this seed only");
  auto* out_opt = app.add_option("--out", out, "Output directory");
  app.add_option("--config", g.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--threads", g.threads, "OpenMP threads")->check(CLI::NonNegativeNumber);

  CommandOptions o;
  auto* gen = app.add_subcommand("gen", "Generate datasets");
  auto* train = app.add_subcommand("train", "Train and evaluate on the test split");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  auto* adapt = app.add_subcommand("adapt", "Fit new environment blocks with the shared part frozen");
  auto* sweep = app.add_subcommand("sweep-m", "Train over a list of assumed environment counts");
  auto* lm = app.add_subcommand("loss-matrix", "Per-trajectory per-environment losses");
  auto* report = app.add_subcommand("report", "Aggregate metrics of all runs under the output directory");
  for (CLI::App* sub : {eval, adapt, lm}) {
    sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  }
  eval->add_flag("--oracle-env", o.oracle_env, "Use the true environment of every test trajectory");
  sweep->add_option("--m", o.m_list, "Environment counts")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed;
  if (*out_opt) g.out = out;
  if (g.threads > 0) omp_set_num_threads(g.threads);

  try {
    const dynainfer::ExperimentConfig c = resolve(g);
    if (*gen) return cmd_gen(c);
    if (*train) return cmd_train(c);
    if (*eval) return cmd_eval(c, o);
    if (*adapt) return cmd_adapt(c, o);
    if (*sweep) return cmd_sweep_m(c, o);
    if (*lm) return cmd_loss_matrix(c, o);
    if (*report) return cmd_report(c);
  } catch (const dynainfer::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
