#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "stp/diffusion.hpp"
#include "stp/unet.hpp"

namespace stp {

enum class TuningMode { full, delta };

std::string_view to_string(TuningMode mode);
TuningMode parse_tuning_mode(std::string_view text);

/// delta freezes exactly the spatial-tagged parameters; full freezes nothing.
void set_tuning_mode(UNetModel& model, TuningMode mode);

enum class ShapeKind { square, disk, cross, ring };

struct ClassMotion {
  ShapeKind shape = ShapeKind::square;
  int vx = 0;  // pixels per frame
  int vy = 0;
};

struct SyntheticVideoSpec {
  std::size_t num_classes = 4;
  std::size_t frames = 8;
  std::size_t channels = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t shape_size = 8;
  std::size_t clips_per_class = 16;
  std::uint64_t seed = 0;
  /// One entry per class; empty selects the built-in table.
  std::vector<ClassMotion> motions;
};

struct Clip {
  Tensor video;  // [F, C, H, W], values in [-1, 1]
  std::size_t cls = 0;
};

class Dataset {
 public:
  explicit Dataset(SyntheticVideoSpec spec);

  std::size_t size() const { return spec_.num_classes * spec_.clips_per_class; }
  /// Item i is clip i / num_classes of class i % num_classes.
  Clip get(std::size_t i) const;
  Clip clip(std::size_t cls, std::size_t index) const;
  const SyntheticVideoSpec& spec() const { return spec_; }
  const ClassMotion& motion(std::size_t cls) const { return motions_.at(cls); }

 private:
  SyntheticVideoSpec spec_;
  std::vector<ClassMotion> motions_;
};

/// Throws std::invalid_argument if the shape does not fit the frame.
Dataset make_dataset(const SyntheticVideoSpec& spec);

/// Stacks items into x0 [B, F, C, H, W] and class ids.
void assemble_batch(const Dataset& data, const std::vector<std::size_t>& items, Tensor& x0,
                    std::vector<std::size_t>& cond);

struct TrainOptions {
  std::size_t steps = 500;
  std::size_t batch = 2;
  std::size_t accumulation = 2;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  /// Called after each optimizer step with the step index (0-based).
  std::function<void(std::size_t step, double loss)> on_step;
};

struct TrainReport {
  std::vector<double> loss;
  std::vector<double> step_ms;
  std::vector<std::size_t> retained_bytes;
  /// Parameters that received an optimizer update.
  std::set<std::string> updated;
};

/// Raised when a step produces a non-finite loss or gradient.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Per-step draws for the whole effective batch: item indices, then
/// timesteps, then noise item by item.
struct StepDraw {
  std::vector<std::size_t> items;
  NoiseDraw noise;
};

StepDraw draw_step(const Dataset& data, std::size_t effective_batch, std::size_t T, std::uint64_t seed,
                   std::size_t step);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  /// Updates every non-frozen parameter holding a gradient, then clears
  /// gradients. Returns the names touched.
  std::vector<std::string> step(std::deque<Parameter>& params);

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

TrainReport train(UNetModel& model, const Dataset& data, const NoiseSchedule& schedule, TuningMode mode,
                  const TrainOptions& opts);

/// Loss report as CSV: step,loss,ms,retained_bytes.
std::string report_csv(const TrainReport& r);

/// Writes one MOBT file per parameter plus manifest.txt and, if non-empty,
/// config.txt, into `dir`.
void save_checkpoint(const UNetModel& model, const std::filesystem::path& dir, const std::string& config_text = {});
/// Loads parameter values by manifest into an already built model.
void load_checkpoint(UNetModel& model, const std::filesystem::path& dir);

}  // namespace stp
