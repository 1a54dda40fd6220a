#include "stp/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "stp/snapshot.hpp"

namespace stp {

double NoiseSchedule::alpha_bar(std::size_t t) const {
  if (t > T) throw std::out_of_range("alpha_bar: t=" + std::to_string(t) + " exceeds T=" + std::to_string(T));
  return alpha_bars[t];
}

NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T == 0) throw std::invalid_argument("make_schedule: T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alphas.resize(T);
  s.alpha_bars.assign(T + 1, 1.0);
  for (std::size_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    s.alphas[i] = 1.0 - s.betas[i];
    s.alpha_bars[i + 1] = s.alpha_bars[i] * s.alphas[i];
  }
  return s;
}

Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& s) {
  if (eps.shape() != x0.shape()) {
    throw ShapeError("q_sample: noise " + shape_str(eps.shape()) + " vs data " + shape_str(x0.shape()));
  }
  if (t > s.T) throw std::out_of_range("q_sample: t=" + std::to_string(t) + " outside [0, " + std::to_string(s.T) + "]");
  if (t == 0) return x0.clone();
  const double a = std::sqrt(s.alpha_bars[t]);
  const double b = std::sqrt(1.0 - s.alpha_bars[t]);
  Tensor out(x0.shape());
  auto o = out.mutable_data();
  auto x = x0.data();
  auto e = eps.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a * x[i] + b * e[i];
  return out;
}

Denoiser unet_denoiser(const UNetModel& model, ForwardOptions opts) {
  return [&model, opts](Tape& tape, const Tensor& x, const std::vector<std::size_t>& t,
                        const std::vector<std::size_t>& cond) { return unet_forward(model, tape, x, t, cond, opts); };
}

NoiseDraw draw_noising(const Shape& batch_shape, std::size_t T, Rng& rng) {
  NoiseDraw d;
  const std::size_t B = batch_shape.at(0);
  d.timesteps.resize(B);
  for (auto& t : d.timesteps) t = 1 + rng.below(T);
  d.eps = Tensor(batch_shape);
  for (auto& v : d.eps.mutable_data()) v = rng.normal();
  return d;
}

Tensor denoise_loss(const Denoiser& model, Tape& tape, const Tensor& x0, const std::vector<std::size_t>& cond,
                    const NoiseDraw& draw, const NoiseSchedule& s, double scale) {
  if (x0.rank() == 0 || draw.eps.shape() != x0.shape() || draw.timesteps.size() != x0.dim(0)) {
    throw ShapeError("denoise_loss: draw does not match batch " + shape_str(x0.shape()));
  }
  const std::size_t B = x0.dim(0);
  const std::size_t item = x0.numel() / B;
  Tensor xt(x0.shape());
  auto o = xt.mutable_data();
  auto x = x0.data();
  auto e = draw.eps.data();
  std::vector<std::size_t> model_t(B);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t t = draw.timesteps[b];
    if (t < 1 || t > s.T) {
      throw std::out_of_range("denoise_loss: timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
    }
    model_t[b] = t - 1;
    const double a = std::sqrt(s.alpha_bars[t]);
    const double c = std::sqrt(1.0 - s.alpha_bars[t]);
    for (std::size_t i = b * item; i < (b + 1) * item; ++i) o[i] = a * x[i] + c * e[i];
  }
  const Tensor pred = model(tape, xt, model_t, cond);
  if (scale == 0.0) scale = 1.0 / static_cast<double>(x0.numel());
  return reduce_mean_sq(tape, pred, draw.eps, scale);
}

Tensor denoise_loss(const UNetModel& model, Tape& tape, const Tensor& x0, const std::vector<std::size_t>& cond,
                    const NoiseSchedule& s, Rng& rng) {
  const NoiseDraw d = draw_noising(x0.shape(), s.T, rng);
  return denoise_loss(unet_denoiser(model), tape, x0, cond, d, s);
}

std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps) {
  if (steps == 0 || steps > T) {
    throw std::invalid_argument("ddim: steps=" + std::to_string(steps) + " must be in [1, T=" + std::to_string(T) + "]");
  }
  std::vector<std::size_t> tau(steps);
  for (std::size_t i = 0; i < steps; ++i) tau[i] = (i + 1) * T / steps;
  return tau;
}

Tensor ddim_sample(const Denoiser& model, Tape& tape, const NoiseSchedule& s, std::size_t steps, const Shape& shape,
                   const std::vector<std::size_t>& cond, std::uint64_t seed) {
  const std::vector<std::size_t> tau = ddim_timesteps(s.T, steps);
  NoGradGuard guard(tape);
  Rng rng(seed);
  Tensor x(shape);
  for (auto& v : x.mutable_data()) v = rng.normal();
  const std::size_t B = shape.at(0);
  for (std::size_t i = steps; i-- > 0;) {
    const std::size_t t = tau[i];
    const std::size_t t_prev = i == 0 ? 0 : tau[i - 1];
    const Tensor eps = model(tape, x, std::vector<std::size_t>(B, t - 1), cond);
    if (eps.shape() != shape) throw ShapeError("ddim_sample: model returned " + shape_str(eps.shape()));
    const double ab = s.alpha_bars[t], ab_prev = s.alpha_bars[t_prev];
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double pa = std::sqrt(ab_prev), pb = std::sqrt(1.0 - ab_prev);
    Tensor next(shape);
    auto n = next.mutable_data();
    auto xv = x.data();
    auto ev = eps.data();
    for (std::size_t k = 0; k < n.size(); ++k) {
      const double x0 = (xv[k] - sb * ev[k]) / sa;
      n[k] = pa * x0 + pb * ev[k];
    }
    x = std::move(next);
  }
  return x;
}

Tensor ddim_sample(const UNetModel& model, const NoiseSchedule& s, std::size_t steps,
                   const std::vector<std::size_t>& cond, std::size_t batch, std::uint64_t seed) {
  Tape tape;
  return ddim_sample(unet_denoiser(model), tape, s, steps, model.cfg.input_shape(batch), cond, seed);
}

namespace {

unsigned char to_byte(double v) {
  const double u = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(u * 255.0));
}

}  // namespace

std::string encode_frame_image(const Tensor& video, std::size_t b, std::size_t f) {
  if (video.rank() != 5) throw ShapeError("encode_frame_image: expected [B, F, C, H, W], got " + shape_str(video.shape()));
  const auto& s = video.shape();
  if (b >= s[0] || f >= s[1]) throw std::out_of_range("encode_frame_image: item or frame out of range");
  const std::size_t C = s[2], H = s[3], W = s[4];
  const double* base = video.data().data() + ((b * s[1] + f) * C) * H * W;
  std::string out;
  if (C == 3) {
    out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(base[(c * H + y) * W + x])));
    return out;
  }
  out = "P5\n" + std::to_string(W * C) + " " + std::to_string(H) + "\n255\n";
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t x = 0; x < W; ++x) out.push_back(static_cast<char>(to_byte(base[(c * H + y) * W + x])));
  return out;
}

std::vector<std::filesystem::path> write_frame_images(const std::filesystem::path& dir, const Tensor& video,
                                                      std::size_t b) {
  std::filesystem::create_directories(dir);
  const char* ext = video.rank() == 5 && video.dim(2) == 3 ? ".ppm" : ".pgm";
  std::vector<std::filesystem::path> paths;
  for (std::size_t f = 0; f < video.dim(1); ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu%s", f, ext);
    paths.push_back(dir / name);
    write_file_atomic(paths.back(), encode_frame_image(video, b, f));
  }
  return paths;
}

}  // namespace stp
