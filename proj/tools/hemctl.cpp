// hemctl: dataset generation, training, gradient checks, sweeps and per-layer
// ELBO and gradient diagnostics for highway-EM stacks.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hem/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Highway-EM experiment harness"};
  app.require_subcommand(1);

  struct Flags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
  };
  Flags flags;
  const char* help[] = {
      "generate a dataset file",
      "train the toy segmentation model",
      "run the randomized gradient and ELBO checks",
      "train over an (eta, T) grid and evaluate at several depths",
      "per-layer ELBO and gradient profiles over a step-size grid",
  };
  std::size_t i = 0;
  for (const char* name : hem::cli::kCommands) {
    auto* sub = app.add_subcommand(name, help[i++]);
    sub->add_option("--config", flags.config, "JSON config file")->required();
    sub->add_option("--out", flags.out, "output directory")->required();
    sub->add_option("--seed", flags.seed, "overrides the config seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return hem::cli::kExitConfig;
  }

  hem::cli::Invocation inv;
  inv.command = app.get_subcommands().front()->get_name();
  inv.config_path = flags.config;
  inv.out_dir = flags.out;
  inv.seed = flags.seed;
  return hem::cli::run(inv, std::cout, std::cerr);
}
