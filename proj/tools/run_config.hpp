#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "stp/trainer.hpp"
#include "stp/unet.hpp"

namespace stp::cli {

/// Bad key, bad value or inconsistent settings. Maps to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  UNetConfig model;
  TuningMode tuning = TuningMode::delta;
  /// Drives model construction, the dataset, the step draws and sampling.
  std::uint64_t seed = 0;

  double beta_start = 1e-4;
  double beta_end = 0.02;

  std::size_t steps = 500;
  std::size_t batch = 2;
  std::size_t accumulation = 2;
  double lr = 1e-3;
  std::size_t clips_per_class = 16;
  std::size_t shape_size = 8;

  std::size_t sample_steps = 20;
  std::size_t sample_class = 0;

  std::size_t warmup = 3;
  std::size_t repetitions = 10;
  std::size_t bench_batch = 1;

  std::size_t gradcheck_samples = 40;
  std::uint64_t gradcheck_seed = 1;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  /// The model config with the run seed applied.
  UNetConfig unet() const;
  SyntheticVideoSpec dataset_spec() const;
  TrainOptions train_options() const;
};

/// Every key accepted by set_key, in echo order.
const std::vector<std::string>& config_keys();

/// Sets one field from its text form. Throws ConfigError for unknown keys or
/// malformed values.
void set_key(RunConfig& cfg, std::string_view key, std::string_view value);

/// Applies a key=value file body: one setting per line, `#` starts a
/// comment, blank lines ignored, repeated keys rejected. Returns the keys set.
std::vector<std::string> apply_config_text(RunConfig& cfg, std::string_view text);

/// Fully resolved config as key=value lines; apply_config_text on a default
/// RunConfig reproduces `cfg` exactly.
std::string echo(const RunConfig& cfg);

/// Reads MOBIUS_SEED; empty when unset. Throws ConfigError when malformed.
std::optional<std::uint64_t> env_seed();

}  // namespace stp::cli
