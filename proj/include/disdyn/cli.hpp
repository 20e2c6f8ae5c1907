/**
 * @file cli.hpp
 * @brief Subcommands of the `disdyn` executable, callable as a library.
 *
 * generate | train | grid | eval | report. Diagnostics go to `err`, data to
 * `out`. Misconfiguration exits with status 2, other failures with 1.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "disdyn/config.hpp"
#include "disdyn/evalkit.hpp"
#include "disdyn/run_record.hpp"

namespace disdyn::cli {

struct RunOptions {
  bool force = false;
  bool dry_run = false;
  std::size_t workers = 1;
};

/// Writes the five splits and manifest.json into out_dir.
void cmd_generate(const config::ProjectConfig& cfg, const std::filesystem::path& out_dir, const RunOptions& opts,
                  std::ostream& out);

/// Trains one model; writes record.json, checkpoint/ and manifest.json.
trainer::RunRecord cmd_train(const config::ProjectConfig& cfg, const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_dir, const RunOptions& opts, std::ostream& out);

/// Runs the configured grid; one run-NNNN directory per configuration.
std::vector<trainer::RunRecord> cmd_grid(const config::ProjectConfig& cfg, const std::filesystem::path& data_dir,
                                         const std::filesystem::path& out_dir, const RunOptions& opts,
                                         std::ostream& out);

/// Evaluates checkpoints (checkpoint dirs or run dirs) on the test and OOD splits.
evalkit::EvalReport cmd_eval(const std::vector<std::filesystem::path>& checkpoints,
                             const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                             const config::EvalConfig& eval, const RunOptions& opts, std::ostream& out);

/// Selects the top-k runs per family under records_dir and reports them.
evalkit::EvalReport cmd_report(const std::filesystem::path& records_dir, const std::filesystem::path& data_dir,
                               const std::filesystem::path& out_dir, const config::EvalConfig& eval,
                               const RunOptions& opts, std::ostream& out, std::ostream& err);

/// Entry point; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace disdyn::cli
