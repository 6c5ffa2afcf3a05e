// SPDX-License-Identifier: Apache-2.0
//
// Subcommand implementations behind the command-line front end. Each command
// reads a RunConfig, writes its checkpoints and metric files into config.out and
// returns a one-line summary.
#pragma once

#include <exception>
#include <string>
#include <vector>

#include "alignlab/errors.h"
#include "alignlab/io.h"

namespace alignlab {

/// A RunConfig field holds a value the selected command cannot use. The message
/// starts with the dotted field path.
class ConfigError : public ValueError {
 public:
  ConfigError(const std::string& field, const std::string& what) : ValueError(field + ": " + what) {}
};

/// train-sft, train-pref, train-rm, merge, soup-exp, polish, tabular, cost-model, eval.
const std::vector<std::string>& command_names();

struct CommandResult {
  std::string summary;
  Metrics metrics;
  /// Files written, relative to config.out, in write order.
  std::vector<std::string> files;
};

/// Runs config.command. metrics.json and metrics.csv are always among the
/// files written; nothing in them depends on the output directory.
CommandResult run_command(const RunConfig& config);

struct Failure {
  int exit_code = 1;
  /// config, input, format, numeric or runtime.
  std::string category;
  std::string message;
};

/// Maps an exception from parsing or run_command to an exit code and category.
Failure classify_failure(std::exception_ptr error);

enum class LogLevel { Quiet, Info, Debug };

/// Reads ALIGNLAB_LOG (quiet, info, debug); unset means info.
LogLevel log_level_from_env();

}  // namespace alignlab
