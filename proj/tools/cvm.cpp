#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cvm/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with a frozen conceptual vector space"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "Train every configured strategy and seed");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", seed, "Run a single seed instead of the configured list");

  std::string axis;
  auto* sweep = app.add_subcommand("sweep", "Repeat the run over a memory-size or beta grid");
  sweep->add_option("--config", config_path, "Experiment config (JSON)")->required();
  sweep->add_option("--axis", axis, "Swept hyperparameter")
      ->required()
      ->check(CLI::IsMember({"memory", "beta"}));

  std::string run_dir;
  auto* probe = app.add_subcommand("probe", "Linear-probe and zero-shot evaluation of a run");
  probe->add_option("--run-dir", run_dir, "Directory written by `cvm run`")->required();

  CLI11_PARSE(app, argc, argv);

  if (*run) return cvm::cmd_run(config_path, seed, std::cout, std::cerr);
  if (*sweep) return cvm::cmd_sweep(config_path, axis, std::cout, std::cerr);
  if (*probe) return cvm::cmd_probe(run_dir, std::cout, std::cerr);
  return 1;
}
