#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stp/autodiff.hpp"
#include "stp/trainer.hpp"
#include "stp/unet.hpp"

namespace stp {

/// Attention ops are alpha, convolutions beta.
struct OpCounts {
  std::size_t attn_spatial = 0;
  std::size_t attn_temporal = 0;
  std::size_t conv_spatial = 0;
  std::size_t conv_temporal = 0;
  std::size_t fuse_conv = 0;

  std::size_t alpha() const { return attn_spatial + attn_temporal; }
  std::size_t beta() const { return conv_spatial + conv_temporal + fuse_conv; }
  bool operator==(const OpCounts&) const = default;
};

struct CostReport {
  /// Every op executed while recording, recorded or not.
  OpCounts forward;
  /// Ops in the required set, i.e. those whose VJP runs.
  OpCounts visited;
  /// Longest chain of sub-layers (sc, tc, sa, ta, merge) per block label.
  std::map<std::string, std::size_t> block_depth;
  std::size_t max_block_depth = 0;
};

CostReport op_count(const Tape& tape, const NodeSet& req);

/// Sub-layer chain length inside one block scope, counted from the trace.
std::size_t block_critical_path(const Tape& tape, const std::string& block_label);

/// Which parameters receive gradients, by name.
using TrainablePredicate = std::function<bool(const std::string& name)>;

/// Name-based rule: delta trains temporal sub-layers, t-stream adapters and
/// the fusion conv; full trains everything.
TrainablePredicate trainable_by_name(TuningMode mode);

struct MemoryPrediction {
  std::size_t retained_bytes = 0;
  std::size_t required_nodes = 0;
  std::size_t spatial_nodes = 0;
};

/// Retained-activation bytes of one denoising-loss step, predicted by walking
/// the architecture's tensor shapes without running any arithmetic.
MemoryPrediction predict_retained_bytes(const UNetConfig& cfg, std::size_t batch, const TrainablePredicate& trainable);

struct StepMeasurement {
  std::size_t retained_bytes = 0;
  double fwd_ms = 0.0;
  double bwd_ms = 0.0;
  double step_ms = 0.0;
  std::size_t repetitions = 0;
};

struct MeasureOptions {
  std::size_t warmup = 3;
  std::size_t repetitions = 10;
  std::uint64_t seed = 0;
};

/// Median forward and backward time of one loss step on fixed inputs under
/// the model's current frozen flags.
StepMeasurement measure_step(UNetModel& model, std::size_t batch, const MeasureOptions& opts = {});

/// Hash of every config field except the wiring mode.
std::uint64_t config_hash(const UNetConfig& cfg);

struct BenchRow {
  WiringMode mode = WiringMode::parallel;
  TuningMode tuning = TuningMode::delta;
  std::size_t retained_bytes = 0;
  std::size_t params_total = 0;
  std::size_t params_trainable = 0;
  double fwd_ms = 0.0;
  double bwd_ms = 0.0;
  double step_ms = 0.0;
  std::uint64_t config_hash = 0;
};

struct BenchRatios {
  double memory_ratio = 0.0;
  double bwd_time_ratio = 0.0;
};

struct BenchTable {
  std::vector<BenchRow> rows;

  /// Parallel over serial for the given tuning. Empty if either row is
  /// missing; throws std::logic_error if the rows come from different configs.
  std::optional<BenchRatios> ratios(TuningMode tuning = TuningMode::delta) const;
  std::string csv() const;
  std::string summary() const;
};

inline constexpr const char* kBenchHeader = "mode,tuning,retained_bytes,params_total,params_trainable,fwd_ms,bwd_ms,step_ms";

/// Measures each (mode, tuning) pair on `cfg` with its mode swapped in and
/// writes the CSV to `out_path` when it is non-empty.
BenchTable run_bench(const UNetConfig& cfg, const std::vector<std::pair<WiringMode, TuningMode>>& pairs,
                     const std::string& out_path, std::size_t batch = 1, const MeasureOptions& opts = {});

/// key: value lines with element counts and bytes per tag.
std::string census_text(const ParamCensus& c);

}  // namespace stp
