// SPDX-License-Identifier: Apache-2.0
//
// alignlab <command> [--config PATH] [--seed N] [--out DIR] [--preset NAME]
//
// Flags override the matching keys of the config file. ALIGNLAB_LOG=quiet
// suppresses the summary line, ALIGNLAB_LOG=debug also lists written files.
#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>

#include "alignlab/commands.h"
#include "alignlab/errors.h"
#include "alignlab/io.h"

namespace {

struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> preset;
};

alignlab::RunConfig build_config(const std::string& command, const Flags& flags) {
  alignlab::RunConfig config;
  if (!flags.config_path.empty()) {
    std::string text;
    try {
      text = alignlab::read_file(flags.config_path);
    } catch (const std::exception& e) {
      throw alignlab::ConfigError("--config", e.what());
    }
    try {
      config = alignlab::parse_run_config(text);
    } catch (const alignlab::FormatError& e) {
      throw alignlab::ConfigError(flags.config_path, e.what());
    }
    if (!config.command.empty() && config.command != command) {
      throw alignlab::ConfigError("command", "config is for '" + config.command + "', not '" + command + "'");
    }
  }
  config.command = command;
  if (flags.seed) config.seed = *flags.seed;
  if (flags.out) config.out = *flags.out;
  if (flags.preset) {
    try {
      (void)alignlab::find_preset(*flags.preset);
    } catch (const alignlab::ValueError& e) {
      throw alignlab::ConfigError("--preset", e.what());
    }
    config.preset = *flags.preset;
  }
  return config;
}

const std::map<std::string, std::string> kDescriptions = {
    {"train-sft", "Supervised fine-tuning on the toy tasks"},
    {"train-pref", "Offline preference training (DPO, IPO or SLiC)"},
    {"train-rm", "Bradley-Terry reward model with packed pairs"},
    {"merge", "Linear merge of checkpoints"},
    {"soup-exp", "Expert soup experiment with a polish phase"},
    {"polish", "Best-of-N SFT, offline preference and online CoPG rounds"},
    {"tabular", "Tabular CoPG or SRPO solver checks"},
    {"cost-model", "Communication events and exposed time for a device mesh"},
    {"eval", "Task accuracy and win rate against a reference"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"alignlab: toy-scale post-training experiments"};
  app.require_subcommand(1);
  Flags flags;
  std::string chosen;
  for (const auto& name : alignlab::command_names()) {
    CLI::App* sub = app.add_subcommand(name, kDescriptions.at(name));
    sub->add_option("--config", flags.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "Seed for every random stream");
    sub->add_option("--out", flags.out, "Output directory");
    sub->add_option("--preset", flags.preset, "Named hyperparameter preset");
    sub->callback([&chosen, name] { chosen = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const alignlab::LogLevel level = alignlab::log_level_from_env();
  try {
    const alignlab::RunConfig config = build_config(chosen, flags);
    const alignlab::CommandResult result = alignlab::run_command(config);
    if (level != alignlab::LogLevel::Quiet) std::cout << result.summary << "\n";
    if (level == alignlab::LogLevel::Debug) {
      for (const auto& f : result.files) std::cerr << "wrote " << config.out << "/" << f << "\n";
    }
    return 0;
  } catch (...) {
    const alignlab::Failure f = alignlab::classify_failure(std::current_exception());
    std::cerr << "alignlab " << chosen << ": " << f.category << " error: " << f.message << "\n";
    return f.exit_code;
  }
}
