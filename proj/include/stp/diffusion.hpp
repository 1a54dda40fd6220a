#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "stp/rng.hpp"
#include "stp/unet.hpp"

namespace stp {

/// Linear beta schedule. Index 0 of alpha_bars holds the t = 0 convention
/// (alpha_bar = 1); entries 1..T follow the betas.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> betas;       // betas[t - 1] = beta_t
  std::vector<double> alphas;      // alphas[t - 1] = 1 - beta_t
  std::vector<double> alpha_bars;  // alpha_bars[t] = prod_{s <= t} alpha_s, size T + 1

  double alpha_bar(std::size_t t) const;
};

NoiseSchedule make_schedule(std::size_t T, double beta_start = 1e-4, double beta_end = 0.02);

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps for t in [0, T]; t = 0 returns x0.
Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& s);

/// Predicts noise for x_t. `model_t` holds t - 1 so it indexes [0, T).
using Denoiser = std::function<Tensor(Tape& tape, const Tensor& x_t, const std::vector<std::size_t>& model_t,
                                      const std::vector<std::size_t>& cond)>;

Denoiser unet_denoiser(const UNetModel& model, ForwardOptions opts = {});

/// Per-item diffusion draws: timesteps in [1, T] and one noise tensor shaped
/// like the batch.
struct NoiseDraw {
  std::vector<std::size_t> timesteps;
  Tensor eps;
};

/// Draws all timesteps first, then noise item by item.
NoiseDraw draw_noising(const Shape& batch_shape, std::size_t T, Rng& rng);

/// scale * sum((eps_hat - eps)^2). scale = 0 means 1 / numel, the plain mean.
Tensor denoise_loss(const Denoiser& model, Tape& tape, const Tensor& x0, const std::vector<std::size_t>& cond,
                    const NoiseDraw& draw, const NoiseSchedule& s, double scale = 0.0);

/// Draws with `rng` and evaluates the UNet loss.
Tensor denoise_loss(const UNetModel& model, Tape& tape, const Tensor& x0, const std::vector<std::size_t>& cond,
                    const NoiseSchedule& s, Rng& rng);

/// Evenly strided sampling grid tau_i = (i + 1) * T / steps, i < steps.
std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps);

/// Deterministic DDIM (eta = 0) from seeded Gaussian noise, run on `tape`
/// with recording switched off.
Tensor ddim_sample(const Denoiser& model, Tape& tape, const NoiseSchedule& s, std::size_t steps, const Shape& shape,
                   const std::vector<std::size_t>& cond, std::uint64_t seed);

Tensor ddim_sample(const UNetModel& model, const NoiseSchedule& s, std::size_t steps,
                   const std::vector<std::size_t>& cond, std::size_t batch, std::uint64_t seed);

/// Binary PGM of one frame of item `b`, values mapped from [-1, 1] to
/// [0, 255]. Three channels become a PPM; otherwise channels are laid side by
/// side as grey panels.
std::string encode_frame_image(const Tensor& video, std::size_t b, std::size_t f);

/// Writes frame_000.pgm (or .ppm) ... for item `b`; returns the paths.
std::vector<std::filesystem::path> write_frame_images(const std::filesystem::path& dir, const Tensor& video,
                                                      std::size_t b = 0);

}  // namespace stp
