// Command-line front end: verbs wiring config resolution to the library.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "das1d/config.hpp"

int main(int argc, char** argv) {
  CLI::App app{"differentiable architecture search on 1d inverse problems"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  const std::pair<const char*, const char*> verbs[] = {
      {"search", "run one search (and retrain of the found architecture)"},
      {"retrain", "train a given discrete architecture from scratch"},
      {"study", "run a multi-trial study and summarize it"},
      {"baseline", "run a baseline study (random | random-search | fixed-op)"},
      {"bohb", "hyperparameter optimization over epoch budgets"},
      {"report", "recompute a summary from an exported study"},
  };
  for (const auto& [name, desc] : verbs) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("-c,--config", config_path, "JSON config file");
    sub->add_option("overrides", overrides,
                    "key=value settings applied after the config file");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help exits clean, parse errors are usage
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  das1d::ExperimentConfig cfg;
  try {
    cfg = das1d::load_config(config_path, overrides);
  } catch (const std::exception& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }
  return das1d::run_command(verb, cfg, std::cout, std::cerr);
}
