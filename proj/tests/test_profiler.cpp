#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "stp/profiler.hpp"
#include "test_support.hpp"

using namespace stp;

namespace {

UNetConfig small(WiringMode mode) {
  UNetConfig cfg;
  cfg.mode = mode;
  cfg.in_channels = 2;
  cfg.base_width = 8;
  cfg.frames = 3;
  cfg.height = 8;
  cfg.width = 8;
  cfg.num_timesteps = 20;
  cfg.cond_vocab = 2;
  cfg.norm_groups = 2;
  return cfg;
}

struct Step {
  std::unique_ptr<UNetModel> model;
  Tape tape;
  Tensor loss;
  NodeSet req;
};

std::unique_ptr<Step> record_step(const UNetConfig& cfg, TuningMode tuning, std::size_t batch) {
  auto s = std::make_unique<Step>();
  s->model = build_unet(cfg);
  set_tuning_mode(*s->model, tuning);
  const NoiseSchedule sched = make_schedule(cfg.num_timesteps);
  Rng rng(4);
  const Tensor x0 = testing_support::random_input(cfg, batch, 5);
  std::vector<std::size_t> cond(batch, 1);
  s->loss = denoise_loss(*s->model, s->tape, x0, cond, sched, rng);
  s->req = required_set(s->tape, trainable_params(s->tape));
  return s;
}

}  // namespace

TEST_SUITE("shape walk") {
  TEST_CASE("prediction equals the measured tape for every mode, tuning and batch") {
    for (WiringMode mode : {WiringMode::serial, WiringMode::parallel})
      for (TuningMode tuning : {TuningMode::delta, TuningMode::full})
        for (std::size_t batch : {1, 2}) {
          CAPTURE(to_string(mode));
          CAPTURE(to_string(tuning));
          CAPTURE(batch);
          auto s = record_step(small(mode), tuning, batch);
          const MemoryPrediction p = predict_retained_bytes(small(mode), batch, trainable_by_name(tuning));
          CHECK(p.retained_bytes == retained_bytes(s->tape, s->req));
          CHECK(p.required_nodes == s->req.size());
          CHECK(p.spatial_nodes == count_tagged(s->tape, s->req, LayerTag::spatial));
        }
  }

  TEST_CASE("ordering between modes and tunings") {
    auto bytes = [](WiringMode m, TuningMode t) {
      return predict_retained_bytes(small(m), 1, trainable_by_name(t)).retained_bytes;
    };
    CHECK(bytes(WiringMode::parallel, TuningMode::delta) < bytes(WiringMode::serial, TuningMode::delta));
    CHECK(bytes(WiringMode::parallel, TuningMode::delta) <= bytes(WiringMode::parallel, TuningMode::full));
    CHECK(bytes(WiringMode::serial, TuningMode::delta) <= bytes(WiringMode::serial, TuningMode::full));
  }

  TEST_CASE("one trainable spatial weight brings spatial nodes into the parallel set") {
    const auto delta = trainable_by_name(TuningMode::delta);
    TrainablePredicate poisoned = [&](const std::string& n) { return delta(n) || n == "up.4.sa.attn.q.weight"; };
    CHECK(predict_retained_bytes(small(WiringMode::parallel), 1, delta).spatial_nodes == 0);
    CHECK(predict_retained_bytes(small(WiringMode::parallel), 1, poisoned).spatial_nodes > 0);
  }

  TEST_CASE("name rule agrees with the tags") {
    auto m = build_unet(small(WiringMode::parallel));
    const auto delta = trainable_by_name(TuningMode::delta);
    for (const auto& p : m->params.all()) CHECK(delta(p.name) == (p.tag != LayerTag::spatial));
  }
}

TEST_SUITE("op count") {
  TEST_CASE("delta tuning: spatial ops visited only in serial wiring") {
    auto s = record_step(small(WiringMode::serial), TuningMode::delta, 1);
    auto p = record_step(small(WiringMode::parallel), TuningMode::delta, 1);
    const CostReport cs = op_count(s->tape, s->req);
    const CostReport cp = op_count(p->tape, p->req);
    CHECK(cs.visited.attn_spatial + cs.visited.conv_spatial > 0);
    CHECK(cp.visited.attn_spatial + cp.visited.conv_spatial == 0);
    CHECK(cs.forward.alpha() == cp.forward.alpha());
    CHECK(cs.forward.alpha() == 18);
    CHECK(cp.visited.attn_temporal == 9);
    CHECK(cs.visited.alpha() <= cs.forward.alpha());
    CHECK(cp.visited.beta() <= cp.forward.beta());
    CHECK(cp.forward.fuse_conv == 1);
  }

  TEST_CASE("sub-layer depth is four in serial blocks and three in parallel blocks") {
    auto s = record_step(small(WiringMode::serial), TuningMode::delta, 1);
    auto p = record_step(small(WiringMode::parallel), TuningMode::delta, 1);
    const CostReport cs = op_count(s->tape, s->req);
    const CostReport cp = op_count(p->tape, p->req);
    CHECK(cs.block_depth.size() == 9);
    CHECK(cp.block_depth.size() == 9);
    for (const auto& [label, d] : cs.block_depth) CHECK(d == 4);
    for (const auto& [label, d] : cp.block_depth) CHECK(d == 3);
    CHECK(block_critical_path(p->tape, "nowhere") == 0);
  }
}

TEST_SUITE("bench") {
  TEST_CASE("config hash ignores the wiring mode only") {
    UNetConfig a = small(WiringMode::serial), b = small(WiringMode::parallel);
    CHECK(config_hash(a) == config_hash(b));
    b.base_width = 16;
    CHECK(config_hash(a) != config_hash(b));
  }

  TEST_CASE("ratio guard and csv format") {
    BenchTable t;
    t.rows.push_back({WiringMode::serial, TuningMode::delta, 200, 10, 4, 1.0, 4.0, 5.0, 7});
    CHECK_FALSE(t.ratios().has_value());
    t.rows.push_back({WiringMode::parallel, TuningMode::delta, 50, 10, 4, 1.0, 2.0, 3.0, 7});
    REQUIRE(t.ratios().has_value());
    CHECK(t.ratios()->memory_ratio == 0.25);
    CHECK(t.ratios()->bwd_time_ratio == 0.5);
    CHECK_FALSE(t.ratios(TuningMode::full).has_value());
    CHECK(t.csv() ==
          "mode,tuning,retained_bytes,params_total,params_trainable,fwd_ms,bwd_ms,step_ms\n"
          "serial,delta,200,10,4,1.000,4.000,5.000\n"
          "parallel,delta,50,10,4,1.000,2.000,3.000\n");
    t.rows[1].config_hash = 8;
    CHECK_THROWS_AS(t.ratios(), std::logic_error);
    CHECK(t.summary().find("parallel/delta") != std::string::npos);
  }

  TEST_CASE("full cross on a small config") {
    const auto path = std::filesystem::temp_directory_path() / "stp_bench_test.csv";
    MeasureOptions o;
    o.warmup = 1;
    o.repetitions = 3;
    const BenchTable t = run_bench(small(WiringMode::parallel),
                                   {{WiringMode::serial, TuningMode::delta},
                                    {WiringMode::parallel, TuningMode::delta},
                                    {WiringMode::serial, TuningMode::full},
                                    {WiringMode::parallel, TuningMode::full}},
                                   path.string(), 1, o);
    CHECK(t.rows.size() == 4);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == kBenchHeader);
    REQUIRE(t.ratios().has_value());
    CHECK(t.ratios()->memory_ratio < 1.0);
    for (const auto& r : t.rows) {
      CHECK(r.retained_bytes == predict_retained_bytes([&] {
                                  UNetConfig c = small(r.mode);
                                  return c;
                                }(),
                                                       1, trainable_by_name(r.tuning))
                                    .retained_bytes);
      CHECK(r.fwd_ms > 0.0);
      CHECK(r.params_trainable <= r.params_total);
    }
    std::filesystem::remove(path);
    CHECK_THROWS_AS(run_bench(small(WiringMode::parallel), {{WiringMode::parallel, TuningMode::delta}},
                              "/nonexistent_dir/x.csv", 1, o),
                    std::runtime_error);
  }

  TEST_CASE("measurement repeats at least the requested count") {
    auto m = build_unet(small(WiringMode::parallel));
    set_tuning_mode(*m, TuningMode::delta);
    MeasureOptions o;
    o.warmup = 1;
    o.repetitions = 4;
    const StepMeasurement s = measure_step(*m, 1, o);
    CHECK(s.repetitions >= 4);
    CHECK(s.retained_bytes == predict_retained_bytes(small(WiringMode::parallel), 1, trainable_by_name(TuningMode::delta)).retained_bytes);
  }
}

TEST_SUITE("census") {
  TEST_CASE("text report sums its parts") {
    auto m = build_unet(small(WiringMode::parallel));
    set_tuning_mode(*m, TuningMode::delta);
    const ParamCensus c = census(m->params);
    const std::string t = census_text(c);
    CHECK(t.find("total_elements: " + std::to_string(c.total_elements) + "\n") != std::string::npos);
    CHECK(t.find("spatial_bytes: " + std::to_string(c.elements.at(LayerTag::spatial) * 8) + "\n") != std::string::npos);
    CHECK(c.elements.at(LayerTag::spatial) + c.elements.at(LayerTag::temporal) + c.elements.at(LayerTag::plumbing) ==
          c.total_elements);
  }
}
