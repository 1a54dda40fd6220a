#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <limits>

#include "stp/trainer.hpp"
#include "test_support.hpp"

using namespace stp;

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
  cfg.seed = 5;
  return cfg;
}

SyntheticVideoSpec data_for(const UNetConfig& cfg) {
  SyntheticVideoSpec s;
  s.num_classes = cfg.cond_vocab;
  s.frames = cfg.frames;
  s.channels = cfg.in_channels;
  s.height = cfg.height;
  s.width = cfg.width;
  s.shape_size = 3;
  s.clips_per_class = 4;
  s.seed = 1;
  return s;
}

std::set<std::string> non_spatial(const UNetModel& m) {
  std::set<std::string> out;
  for (const auto& p : m.params.all())
    if (p.tag != LayerTag::spatial) out.insert(p.name);
  return out;
}

std::vector<Tensor> snapshot(const UNetModel& m) {
  std::vector<Tensor> v;
  for (const auto& p : m.params.all()) v.push_back(p.value.clone());
  return v;
}

}  // namespace

TEST_SUITE("tuning") {
  TEST_CASE("delta freezes exactly the spatial census, full freezes nothing") {
    auto m = build_unet(tiny(WiringMode::parallel));
    set_tuning_mode(*m, TuningMode::delta);
    ParamCensus c = census(m->params);
    CHECK(c.frozen_elements == c.elements[LayerTag::spatial]);
    set_tuning_mode(*m, TuningMode::full);
    CHECK(census(m->params).frozen_elements == 0);
    CHECK(parse_tuning_mode("delta") == TuningMode::delta);
    CHECK_THROWS_AS(parse_tuning_mode("lora"), std::invalid_argument);
  }

  TEST_CASE("delta gradients reach exactly the temporal, adapter and fusion parameters") {
    auto m = build_unet(tiny(WiringMode::parallel));
    set_tuning_mode(*m, TuningMode::delta);
    const NoiseSchedule s = make_schedule(m->cfg.num_timesteps);
    Rng rng(2);
    Tape tape;
    const Tensor loss = denoise_loss(*m, tape, testing_support::random_input(m->cfg, 1, 3), {1}, s, rng);
    std::set<std::string> keys;
    for (const auto& [name, g] : backward(tape, loss).grads) keys.insert(name);
    CHECK(keys == non_spatial(*m));
    CHECK(keys.count("fusion.weight") == 1);
    CHECK(keys.count("up.2.bridge_t.weight") == 1);
  }
}

TEST_SUITE("dataset") {
  TEST_CASE("static shapes give identical frames") {
    SyntheticVideoSpec s;
    s.num_classes = 1;
    s.motions = {{ShapeKind::disk, 0, 0}};
    const Clip c = make_dataset(s).clip(0, 3);
    const std::size_t fr = s.channels * s.height * s.width;
    for (std::size_t f = 1; f < s.frames; ++f)
      for (std::size_t i = 0; i < fr; ++i) CHECK(c.video[f * fr + i] == c.video[i]);
  }

  TEST_CASE("unit horizontal speed rolls frames with wraparound") {
    SyntheticVideoSpec s;
    s.num_classes = 1;
    s.frames = 8;
    s.channels = 2;
    s.height = 8;
    s.width = 8;
    s.shape_size = 3;
    s.motions = {{ShapeKind::cross, 1, 0}};
    const Clip c = make_dataset(s).clip(0, 0);
    const auto at = [&](std::size_t f, std::size_t ch, std::size_t y, std::size_t x) {
      return c.video[((f * 2 + ch) * 8 + y) * 8 + x];
    };
    for (std::size_t f = 0; f < 8; ++f)
      for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x) CHECK(at(f, ch, y, x) == at(0, ch, y, (x + 8 - f) % 8));
  }

  TEST_CASE("clips are deterministic, bounded and class-indexed") {
    SyntheticVideoSpec s;
    const Dataset d = make_dataset(s);
    CHECK(d.size() == s.num_classes * s.clips_per_class);
    const Clip a = d.get(5), b = d.get(5);
    CHECK(a.video.bitwise_equal(b.video));
    CHECK(a.cls == 5 % s.num_classes);
    CHECK(a.video.shape() == Shape{s.frames, s.channels, s.height, s.width});
    bool has_shape = false;
    for (double v : a.video.data()) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
      has_shape = has_shape || v != -1.0;
    }
    CHECK(has_shape);
    SyntheticVideoSpec other = s;
    other.seed = 9;
    CHECK_FALSE(make_dataset(other).get(5).video.bitwise_equal(a.video));
    CHECK_THROWS_AS(d.get(d.size()), std::out_of_range);
  }

  TEST_CASE("invalid specs") {
    SyntheticVideoSpec s;
    s.shape_size = 33;
    CHECK_THROWS_AS(make_dataset(s), std::invalid_argument);
    s.shape_size = 4;
    s.motions = {{}};
    CHECK_THROWS_AS(make_dataset(s), std::invalid_argument);
  }
}

TEST_SUITE("train") {
  TEST_CASE("Adam matches two hand-computed steps") {
    std::deque<Parameter> ps;
    ps.push_back(testing_support::make_param("w", Tensor({1}, std::vector<double>{0.5})));
    Adam opt(0.1);
    double w = 0.5, m = 0, v = 0;
    for (int t = 1; t <= 2; ++t) {
      const double g = t == 1 ? 2.0 : -1.0;
      ps[0].accumulate_grad(Tensor({1}, std::vector<double>{g}));
      CHECK(opt.step(ps) == std::vector<std::string>{"w"});
      CHECK_FALSE(ps[0].grad.has_value());
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      w -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
      CHECK(ps[0].value[0] == doctest::Approx(w).epsilon(1e-15));
    }
  }

  TEST_CASE("zero learning rate leaves every parameter unchanged") {
    auto m = build_unet(tiny(WiringMode::parallel));
    const Dataset d = make_dataset(data_for(m->cfg));
    const auto before = snapshot(*m);
    TrainOptions o;
    o.steps = 2;
    o.lr = 0.0;
    const TrainReport r = train(*m, d, make_schedule(m->cfg.num_timesteps), TuningMode::full, o);
    CHECK(r.loss.size() == 2);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].bitwise_equal(m->params.all()[i].value));
  }

  TEST_CASE("delta training moves only the trainable set") {
    for (WiringMode mode : {WiringMode::serial, WiringMode::parallel}) {
      CAPTURE(to_string(mode));
      auto m = build_unet(tiny(mode));
      const Dataset d = make_dataset(data_for(m->cfg));
      const auto before = snapshot(*m);
      TrainOptions o;
      o.steps = 3;
      const TrainReport r = train(*m, d, make_schedule(m->cfg.num_timesteps), TuningMode::delta, o);
      std::size_t moved = 0;
      for (std::size_t i = 0; i < before.size(); ++i) {
        const Parameter& p = m->params.all()[i];
        if (p.tag == LayerTag::spatial) CHECK(before[i].bitwise_equal(p.value));
        else moved += !before[i].bitwise_equal(p.value);
      }
      CHECK(moved > 0);
      CHECK(r.updated == non_spatial(*m));
      for (double l : r.loss) CHECK(std::isfinite(l));
      for (std::size_t b : r.retained_bytes) CHECK(b > 0);
    }
  }

  TEST_CASE("accumulating two batches of one equals one batch of two") {
    auto a = build_unet(tiny(WiringMode::parallel));
    auto b = build_unet(tiny(WiringMode::parallel));
    const Dataset d = make_dataset(data_for(a->cfg));
    const NoiseSchedule s = make_schedule(a->cfg.num_timesteps);
    TrainOptions oa;
    oa.steps = 3;
    oa.batch = 1;
    oa.accumulation = 2;
    TrainOptions ob = oa;
    ob.batch = 2;
    ob.accumulation = 1;
    const TrainReport ra = train(*a, d, s, TuningMode::full, oa);
    const TrainReport rb = train(*b, d, s, TuningMode::full, ob);
    for (std::size_t i = 0; i < a->params.size(); ++i) {
      CAPTURE(a->params.all()[i].name);
      CHECK(a->params.all()[i].value.bitwise_equal(b->params.all()[i].value));
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(ra.loss[i] == doctest::Approx(rb.loss[i]).epsilon(1e-13));
  }

  TEST_CASE("non-finite values abort with the step index") {
    auto m = build_unet(tiny(WiringMode::parallel));
    const Dataset d = make_dataset(data_for(m->cfg));
    TrainOptions o;
    o.steps = 5;
    o.on_step = [&](std::size_t step, double) {
      if (step == 1) m->params.get("down.1.tc.conv.bias").value.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    };
    try {
      train(*m, d, make_schedule(m->cfg.num_timesteps), TuningMode::delta, o);
      FAIL("expected TrainingAborted");
    } catch (const TrainingAborted& e) {
      CHECK(e.step() == 2);
      CHECK(std::string(e.what()).find("step 2") != std::string::npos);
    }
  }

  TEST_CASE("mismatched inputs are rejected") {
    auto m = build_unet(tiny(WiringMode::parallel));
    SyntheticVideoSpec s = data_for(m->cfg);
    s.frames = 4;
    CHECK_THROWS_AS(train(*m, make_dataset(s), make_schedule(20), TuningMode::delta, {}), ShapeError);
    CHECK_THROWS_AS(train(*m, make_dataset(data_for(m->cfg)), make_schedule(30), TuningMode::delta, {}),
                    std::invalid_argument);
  }

  TEST_CASE("report csv") {
    TrainReport r;
    r.loss = {0.5, 0.25};
    r.step_ms = {1.0, 2.0};
    r.retained_bytes = {10, 20};
    CHECK(report_csv(r) == "step,loss,ms,retained_bytes\n0,0.5,1,10\n1,0.25,2,20\n");
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip restores every parameter") {
    const auto dir = std::filesystem::temp_directory_path() / "stp_ckpt_test";
    std::filesystem::remove_all(dir);
    auto a = build_unet(tiny(WiringMode::parallel));
    testing_support::randomize_tagged(a->params, LayerTag::temporal, 3, 1.0);
    save_checkpoint(*a, dir, "mode=parallel\n");
    CHECK(std::filesystem::exists(dir / "manifest.txt"));
    CHECK(std::filesystem::exists(dir / "config.txt"));
    UNetConfig c = tiny(WiringMode::parallel);
    c.seed = 77;
    auto b = build_unet(c);
    load_checkpoint(*b, dir);
    for (std::size_t i = 0; i < a->params.size(); ++i) CHECK(a->params.all()[i].value.bitwise_equal(b->params.all()[i].value));

    UNetConfig wide = c;
    wide.base_width = 8;
    auto w = build_unet(wide);
    CHECK_THROWS_AS(load_checkpoint(*w, dir), ShapeError);
    auto serial = build_unet(tiny(WiringMode::serial));
    CHECK_THROWS_AS(load_checkpoint(*serial, dir), std::runtime_error);
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_checkpoint(*b, dir), std::runtime_error);
  }
}
