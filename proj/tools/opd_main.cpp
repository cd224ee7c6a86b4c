// Command-line harness for on-policy prefix distillation experiments.
//
// Exit status: 0 success, 1 runtime failure (including failed oracle-check
// gates), 2 usage or configuration errors.

#include "opd/errors.hpp"
#include "opd/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

int main(int argc, char** argv) {
  CLI::App app{"On-policy prefix distillation experiments on synthetic tasks"};
  app.require_subcommand(1);

  const std::vector<std::string> subcommands = {
      "train-opd",  "train-seqkd", "probe",        "ablate-window",
      "bins-report", "cost-report", "oracle-check", "sweep-lr"};
  const std::vector<std::string> descriptions = {
      "On-policy distillation training run",
      "Sequence-level distillation (SFT on teacher outputs)",
      "Teacher-prefix continuation study",
      "Masking-window ablation (prefix, interior windows, tail)",
      "OPD run with positional-loss bin and trend reports",
      "Project per-step and cumulative training FLOP from a config",
      "Estimator-vs-oracle gates; fails when any gate fails",
      "Learning-rate sweep of OPD runs"};

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed_flag = 0;
  bool seed_given = false;
  int workers = 1;

  for (std::size_t i = 0; i < subcommands.size(); ++i) {
    CLI::App* sub = app.add_subcommand(subcommands[i], descriptions[i]);
    sub->add_option("--config", config_path, "Run configuration file")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "Output directory for result tables")->required();
    sub->add_option("--seed", seed_flag, "Override the config seed")
        ->each([&seed_given](const std::string&) { seed_given = true; });
    sub->add_option("--workers", workers, "Worker threads for rollouts and scoring")
        ->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  opd::ExperimentOptions options;
  options.config_path = config_path;
  options.out_dir = out_dir;
  if (seed_given) options.seed = seed_flag;
  options.workers = workers;

  try {
    return opd::run_experiment(app.get_subcommands().front()->get_name(), options);
  } catch (const opd::OpdError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == opd::Errc::config_error ? 2 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
