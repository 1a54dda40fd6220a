#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace stp::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kUsage = 2, kRuntime = 3 };

enum class CheckStatus { pass, fail, expected_absent };

struct CheckResult {
  std::string name;
  CheckStatus status = CheckStatus::pass;
  std::string detail;
};

struct VerifyOptions {
  /// Un-freezes one spatial parameter before the checks.
  bool poison_spatial = false;
};

/// gradcheck, isolation, accounting and zero-init, in that order.
std::vector<CheckResult> run_checks(const RunConfig& cfg, const VerifyOptions& opts);

int cmd_train(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& out, std::ostream& err);
int cmd_bench(const RunConfig& cfg, bool cross, const std::filesystem::path& out_dir, std::ostream& out,
              std::ostream& err);
int cmd_verify(const RunConfig& cfg, const VerifyOptions& opts, const std::filesystem::path& out_dir,
               std::ostream& out, std::ostream& err);
/// `cfg` must already hold the checkpoint's config with overrides applied.
int cmd_sample(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir,
               std::ostream& out, std::ostream& err);
int cmd_analyze(const RunConfig& cfg, std::ostream& out);

/// Checkpoint directory inside `path`: `path` itself or a train run's
/// `checkpoint/` subdirectory. Empty if neither holds a manifest.
std::filesystem::path find_checkpoint(const std::filesystem::path& path);

/// Parses flags, resolves the config and dispatches to a subcommand.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stp::cli
