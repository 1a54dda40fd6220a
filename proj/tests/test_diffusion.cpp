#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "stp/diffusion.hpp"
#include "stp/gradcheck.hpp"
#include "test_support.hpp"

using namespace stp;
using testing_support::random_input;
using testing_support::random_tensor;

namespace {

UNetConfig tiny(WiringMode mode) {
  UNetConfig cfg;
  cfg.mode = mode;
  cfg.in_channels = 2;
  cfg.base_width = 4;
  cfg.channel_multipliers = {1, 1, 2, 2};
  cfg.frames = 3;
  cfg.height = 8;
  cfg.width = 8;
  cfg.num_timesteps = 20;
  cfg.cond_vocab = 2;
  cfg.norm_groups = 2;
  cfg.seed = 3;
  return cfg;
}

Denoiser constant_predictor(double value) {
  return [value](Tape&, const Tensor& x, const std::vector<std::size_t>&, const std::vector<std::size_t>&) {
    return Tensor(x.shape(), value);
  };
}

}  // namespace

TEST_SUITE("schedule") {
  TEST_CASE("single step with beta 0.5") {
    const NoiseSchedule s = make_schedule(1, 0.5, 0.5);
    CHECK(s.alpha_bar(1) == 0.5);
    CHECK(s.alpha_bar(0) == 1.0);
  }

  TEST_CASE("two steps by hand product") {
    const NoiseSchedule s = make_schedule(2, 0.1, 0.2);
    CHECK(s.betas[0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(s.betas[1] == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(s.alpha_bar(2) == doctest::Approx(0.72).epsilon(1e-15));
  }

  TEST_CASE("default schedule is strictly decreasing in (0, 1]") {
    const NoiseSchedule s = make_schedule(1000);
    CHECK(s.betas.front() == 1e-4);
    CHECK(s.betas.back() == doctest::Approx(0.02).epsilon(1e-14));
    for (std::size_t t = 1; t <= 1000; ++t) {
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      CHECK(s.alpha_bar(t) > 0.0);
    }
    CHECK_THROWS_AS(s.alpha_bar(1001), std::out_of_range);
  }

  TEST_CASE("bounds") {
    CHECK_THROWS_AS(make_schedule(0), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), std::invalid_argument);
  }
}

TEST_SUITE("q_sample") {
  TEST_CASE("t = 0 returns x0 and eps = 0 scales x0") {
    const NoiseSchedule s = make_schedule(10, 0.01, 0.2);
    Rng rng(1);
    const Tensor x0 = random_tensor({2, 3}, rng);
    const Tensor eps = random_tensor({2, 3}, rng);
    CHECK(q_sample(x0, 0, eps, s).bitwise_equal(x0));
    const Tensor y = q_sample(x0, 4, Tensor({2, 3}), s);
    for (std::size_t i = 0; i < 6; ++i) CHECK(y[i] == std::sqrt(s.alpha_bar(4)) * x0[i]);
  }

  TEST_CASE("errors") {
    const NoiseSchedule s = make_schedule(10);
    CHECK_THROWS_AS(q_sample(Tensor({2}), 11, Tensor({2}), s), std::out_of_range);
    CHECK_THROWS_AS(q_sample(Tensor({2}), 1, Tensor({3}), s), ShapeError);
  }

  TEST_CASE("composing three single steps gives the closed-form mean and variance") {
    const NoiseSchedule s = make_schedule(3, 0.05, 0.3);
    double mean_coef = 1.0, var = 0.0;
    for (std::size_t t = 1; t <= 3; ++t) {
      const double beta = s.betas[t - 1];
      mean_coef *= std::sqrt(1.0 - beta);
      var = (1.0 - beta) * var + beta;
      CHECK(mean_coef == doctest::Approx(std::sqrt(s.alpha_bar(t))).epsilon(1e-14));
      CHECK(var == doctest::Approx(1.0 - s.alpha_bar(t)).epsilon(1e-14));
    }
  }

  TEST_CASE("empirical variance at x0 = 0 within three sigma") {
    const NoiseSchedule s = make_schedule(100);
    const std::size_t n = 100000;
    Rng rng(99);
    Tensor eps({n});
    for (auto& v : eps.mutable_data()) v = rng.normal();
    for (std::size_t t : {1, 50, 100}) {
      const Tensor x = q_sample(Tensor({n}), t, eps, s);
      double m = 0, m2 = 0;
      for (double v : x.data()) m += v;
      m /= n;
      for (double v : x.data()) m2 += (v - m) * (v - m);
      m2 /= (n - 1);
      const double target = 1.0 - s.alpha_bar(t);
      CHECK(std::abs(m2 - target) < 3.0 * target * std::sqrt(2.0 / (n - 1)));
    }
  }
}

TEST_SUITE("loss") {
  TEST_CASE("draw order is timesteps then noise") {
    Rng a(5), b(5);
    const NoiseDraw d = draw_noising({3, 2}, 10, a);
    for (std::size_t i = 0; i < 3; ++i) CHECK(d.timesteps[i] == 1 + b.below(10));
    for (std::size_t i = 0; i < 6; ++i) CHECK(d.eps[i] == b.normal());
  }

  TEST_CASE("zero predictor gives the mean squared noise") {
    const NoiseSchedule s = make_schedule(10);
    Rng rng(6);
    const Tensor x0 = random_tensor({2, 5}, rng);
    const NoiseDraw d = draw_noising(x0.shape(), 10, rng);
    Tape tape;
    const double loss = denoise_loss(constant_predictor(0.0), tape, x0, {0, 0}, d, s).item();
    double ref = 0;
    for (double e : d.eps.data()) ref += e * e;
    CHECK(loss == doctest::Approx(ref / 10.0).epsilon(1e-15));
  }

  TEST_CASE("noise-injecting predictor gives zero and sees t - 1 and x_t") {
    const NoiseSchedule s = make_schedule(10);
    Rng rng(7);
    const Tensor x0 = random_tensor({2, 4}, rng);
    const NoiseDraw d = draw_noising(x0.shape(), 10, rng);
    Denoiser oracle = [&](Tape&, const Tensor& xt, const std::vector<std::size_t>& t,
                          const std::vector<std::size_t>&) {
      for (std::size_t b = 0; b < 2; ++b) {
        CHECK(t[b] == d.timesteps[b] - 1);
        for (std::size_t i = 0; i < 4; ++i) {
          const double ab = s.alpha_bar(d.timesteps[b]);
          CHECK(xt[b * 4 + i] == doctest::Approx(std::sqrt(ab) * x0[b * 4 + i] + std::sqrt(1 - ab) * d.eps[b * 4 + i]));
        }
      }
      return d.eps;
    };
    Tape tape;
    CHECK(denoise_loss(oracle, tape, x0, {1, 0}, d, s).item() == 0.0);
  }

  TEST_CASE("bad draws are rejected") {
    const NoiseSchedule s = make_schedule(10);
    NoiseDraw d{{0}, Tensor({1, 2})};
    Tape tape;
    CHECK_THROWS_AS(denoise_loss(constant_predictor(0), tape, Tensor({1, 2}), {0}, d, s), std::out_of_range);
    d.timesteps = {1, 2};
    CHECK_THROWS_AS(denoise_loss(constant_predictor(0), tape, Tensor({1, 2}), {0}, d, s), ShapeError);
  }

  TEST_CASE("unet loss passes a finite-difference check") {
    auto m = build_unet(tiny(WiringMode::parallel));
    testing_support::natural_init_zeros(m->params, 8);
    testing_support::freeze_spatial(m->params);
    const NoiseSchedule s = make_schedule(m->cfg.num_timesteps);
    Rng rng(9);
    const Tensor x0 = random_input(m->cfg, 1, 10);
    const NoiseDraw d = draw_noising(x0.shape(), s.T, rng);
    auto net = unet_denoiser(*m);
    auto closure = [&](Tape& tape) { return denoise_loss(net, tape, x0, {1}, d, s); };
    GradCheckOptions o;
    o.samples = 24;
    o.seed = 4;
    const CheckReport r = finite_diff_check(closure, m->params.pointers(), o);
    REQUIRE(r.coords.size() == 24);
    Tape tape;
    tape.set_recording(false);
    const double loss = closure(tape).item();
    // A central difference cannot resolve less than the loss's own rounding.
    const double noise = 8.0 * std::numeric_limits<double>::epsilon() * loss / (2.0 * o.step);
    std::size_t strict = 0;
    for (const auto& c : r.coords) {
      CAPTURE(c.param);
      CAPTURE(c.index);
      CHECK(std::abs(c.analytic - c.numeric) <= 1e-6 * std::max(std::abs(c.analytic), std::abs(c.numeric)) + noise);
      if (std::abs(c.analytic) > 1e-4) {
        ++strict;
        CHECK(c.rel_error <= 1e-6);
      }
    }
    CHECK(strict >= 4);
  }
}

TEST_SUITE("ddim") {
  TEST_CASE("strided grid") {
    CHECK(ddim_timesteps(10, 3) == std::vector<std::size_t>{3, 6, 10});
    CHECK(ddim_timesteps(4, 4) == std::vector<std::size_t>{1, 2, 3, 4});
    CHECK_THROWS_AS(ddim_timesteps(4, 5), std::invalid_argument);
    CHECK_THROWS_AS(ddim_timesteps(4, 0), std::invalid_argument);
  }

  TEST_CASE("zero predictor in one step rescales the start noise") {
    const NoiseSchedule s = make_schedule(50);
    Tape tape;
    const Tensor out = ddim_sample(constant_predictor(0.0), tape, s, 1, {1, 2, 3}, {0}, 17);
    Rng rng(17);
    for (std::size_t i = 0; i < 6; ++i) CHECK(out[i] == rng.normal() / std::sqrt(s.alpha_bar(50)));
  }

  TEST_CASE("two steps follow the hand-iterated update") {
    const NoiseSchedule s = make_schedule(10, 0.02, 0.2);
    Denoiser half = [](Tape&, const Tensor& x, const std::vector<std::size_t>&, const std::vector<std::size_t>&) {
      Tensor e(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) e.mutable_data()[i] = 0.5 * x[i];
      return e;
    };
    Tape tape;
    const Tensor out = ddim_sample(half, tape, s, 2, {3}, {0}, 21);
    Rng rng(21);
    for (std::size_t i = 0; i < 3; ++i) {
      double x = rng.normal();
      for (auto [t, tp] : {std::pair<std::size_t, std::size_t>{10, 5}, {5, 0}}) {
        const double e = 0.5 * x;
        const double ab = s.alpha_bar(t), abp = s.alpha_bar(tp);
        const double x0 = (x - std::sqrt(1 - ab) * e) / std::sqrt(ab);
        x = std::sqrt(abp) * x0 + std::sqrt(1 - abp) * e;
      }
      CHECK(out[i] == doctest::Approx(x).epsilon(1e-14));
    }
  }

  TEST_CASE("unet sampling records nothing and is seed-deterministic") {
    auto m = build_unet(tiny(WiringMode::parallel));
    const NoiseSchedule s = make_schedule(m->cfg.num_timesteps);
    Tape tape;
    const Tensor a = ddim_sample(unet_denoiser(*m), tape, s, 4, m->cfg.input_shape(2), {0, 1}, 5);
    CHECK(tape.size() == 0);
    CHECK(tape.trace().empty());
    CHECK(tape.recording());
    CHECK(a.shape() == m->cfg.input_shape(2));
    const Tensor b = ddim_sample(*m, s, 4, {0, 1}, 2, 5);
    const Tensor c = ddim_sample(*m, s, 4, {0, 1}, 2, 6);
    CHECK(a.bitwise_equal(b));
    CHECK_FALSE(a.bitwise_equal(c));
    CHECK_THROWS_AS(ddim_sample(*m, s, 21, {0}, 1, 5), std::invalid_argument);
  }
}

TEST_SUITE("images") {
  TEST_CASE("grey panels map [-1, 1] to bytes") {
    Tensor v({1, 1, 2, 1, 2});
    auto d = v.mutable_data();
    d[0] = -1.0;
    d[1] = 1.0;
    d[2] = 0.0;
    d[3] = 5.0;
    const std::string img = encode_frame_image(v, 0, 0);
    const std::string header = "P5\n4 1\n255\n";
    REQUIRE(img.size() == header.size() + 4);
    CHECK(img.substr(0, header.size()) == header);
    CHECK(static_cast<unsigned char>(img[header.size() + 0]) == 0);
    CHECK(static_cast<unsigned char>(img[header.size() + 1]) == 255);
    CHECK(static_cast<unsigned char>(img[header.size() + 2]) == 128);
    CHECK(static_cast<unsigned char>(img[header.size() + 3]) == 255);
  }

  TEST_CASE("three channels become a colour image, one file per frame") {
    Rng rng(2);
    const Tensor v = random_tensor({1, 4, 3, 2, 2}, rng);
    CHECK(encode_frame_image(v, 0, 1).rfind("P6\n2 2\n255\n", 0) == 0);
    const auto dir = std::filesystem::temp_directory_path() / "stp_frames_test";
    std::filesystem::remove_all(dir);
    const auto paths = write_frame_images(dir, v);
    CHECK(paths.size() == 4);
    for (const auto& p : paths) CHECK(std::filesystem::exists(p));
    CHECK(paths[0].extension() == ".ppm");
    std::filesystem::remove_all(dir);
  }
}
