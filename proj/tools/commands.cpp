#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "stp/diffusion.hpp"
#include "stp/gradcheck.hpp"
#include "stp/profiler.hpp"
#include "stp/snapshot.hpp"
#include "stp/trainer.hpp"

namespace fs = std::filesystem;

namespace stp::cli {

namespace {

constexpr const char* kRunManifest = "run_manifest.txt";

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Relative path and size of every file under `dir`, sorted.
void write_run_manifest(const fs::path& dir) {
  std::vector<std::pair<std::string, std::uintmax_t>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == kRunManifest) continue;
    files.emplace_back(rel, e.file_size());
  }
  std::sort(files.begin(), files.end());
  std::ostringstream os;
  for (const auto& [name, size] : files) os << name << '\t' << size << '\n';
  write_file_atomic(dir / kRunManifest, os.str());
}

void prepare_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create output directory " + dir.string());
}

NoiseSchedule schedule_of(const RunConfig& cfg) {
  return make_schedule(cfg.model.num_timesteps, cfg.beta_start, cfg.beta_end);
}

double window_mean(const std::vector<double>& v, std::size_t begin, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = begin; i < begin + n; ++i) s += v[i];
  return s / static_cast<double>(n);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

std::string_view status_text(CheckStatus s) {
  switch (s) {
    case CheckStatus::pass:
      return "PASS";
    case CheckStatus::fail:
      return "FAIL";
    case CheckStatus::expected_absent:
      return "EXPECTED-ABSENT";
  }
  return "?";
}

}  // namespace

fs::path find_checkpoint(const fs::path& path) {
  if (fs::is_regular_file(path / "checkpoint" / "manifest.txt")) return path / "checkpoint";
  if (fs::is_regular_file(path / "manifest.txt")) return path;
  return {};
}

std::vector<CheckResult> run_checks(const RunConfig& cfg, const VerifyOptions& opts) {
  const UNetConfig ucfg = cfg.unet();
  auto model = build_unet(ucfg);
  set_tuning_mode(*model, cfg.tuning);
  if (opts.poison_spatial) model->params.get(model->up[3].sa.attn.q_weight->name).frozen = false;

  const NoiseSchedule sched = schedule_of(cfg);
  const Dataset data = make_dataset(cfg.dataset_spec());
  const StepDraw draw = draw_step(data, 1, sched.T, cfg.seed, 0);
  Tensor x0;
  std::vector<std::size_t> cond;
  assemble_batch(data, draw.items, x0, cond);
  auto net = unet_denoiser(*model);
  auto closure = [&](Tape& tape) { return denoise_loss(net, tape, x0, cond, draw.noise, sched); };

  std::vector<CheckResult> results;

  {
    GradCheckOptions o;
    o.samples = cfg.gradcheck_samples;
    o.seed = cfg.gradcheck_seed;
    const CheckReport r = finite_diff_check(closure, model->params.pointers(), o);
    std::size_t nonzero = 0;
    for (const auto& c : r.coords) nonzero += c.analytic != 0.0 || c.numeric != 0.0;
    results.push_back({"gradcheck", r.passed ? CheckStatus::pass : CheckStatus::fail,
                       "max_rel=" + fmt("%.3g", r.max_rel_error) + " coords=" + std::to_string(r.coords.size()) +
                           " nonzero=" + std::to_string(nonzero)});
  }

  Tape tape;
  const Tensor loss = closure(tape);
  const NodeSet req = required_set(tape, trainable_params(tape));
  const std::size_t spatial = count_tagged(tape, req, LayerTag::spatial);
  if (ucfg.mode == WiringMode::serial) {
    results.push_back({"isolation", CheckStatus::expected_absent, "serial spatial_nodes=" + std::to_string(spatial)});
  } else {
    results.push_back({"isolation", spatial == 0 ? CheckStatus::pass : CheckStatus::fail,
                       "spatial_nodes=" + std::to_string(spatial)});
  }

  {
    const UNetModel& m = *model;
    TrainablePredicate trainable = [&m](const std::string& name) {
      return m.params.contains(name) && !m.params.get(name).frozen;
    };
    const MemoryPrediction p = predict_retained_bytes(ucfg, 1, trainable);
    const std::size_t measured = retained_bytes(tape, req);
    const bool ok = p.retained_bytes == measured && p.required_nodes == req.size() && p.spatial_nodes == spatial;
    results.push_back({"accounting", ok ? CheckStatus::pass : CheckStatus::fail,
                       "measured=" + std::to_string(measured) + " predicted=" + std::to_string(p.retained_bytes)});
  }

  {
    auto fresh = build_unet(ucfg);
    const std::size_t t = draw.noise.timesteps[0];
    const Tensor xt = q_sample(x0, t, draw.noise.eps, sched);
    Tape a, b;
    a.set_recording(false);
    b.set_recording(false);
    const Tensor full = unet_forward(*fresh, a, xt, {t - 1}, cond);
    ForwardOptions so;
    so.spatial_only = true;
    const Tensor spatial_only = unet_forward(*fresh, b, xt, {t - 1}, cond, so);
    const bool same = bitwise_equal(full, spatial_only);
    results.push_back({"zero-init", same ? CheckStatus::pass : CheckStatus::fail,
                       "max_abs_diff=" + fmt("%.3g", max_abs_diff(full, spatial_only))});
  }
  return results;
}

int cmd_train(const RunConfig& cfg, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  prepare_out_dir(out_dir);
  auto model = build_unet(cfg.unet());
  set_tuning_mode(*model, cfg.tuning);
  const Dataset data = make_dataset(cfg.dataset_spec());
  const NoiseSchedule sched = schedule_of(cfg);
  TrainOptions opts = cfg.train_options();
  opts.on_step = [&](std::size_t step, double loss) {
    if ((step + 1) % 50 == 0 || step + 1 == cfg.steps) out << "step " << step + 1 << " loss " << fmt("%.6f", loss) << '\n';
  };
  TrainReport report;
  try {
    report = train(*model, data, sched, cfg.tuning, opts);
  } catch (const TrainingAborted& e) {
    err << "train: numeric abort at step " << e.step() << ": " << e.what() << '\n';
    return kRuntime;
  } catch (const std::logic_error& e) {
    err << "train: guard failed: " << e.what() << '\n';
    return kRuntime;
  }

  const std::string config_text = echo(cfg);
  save_checkpoint(*model, out_dir / "checkpoint", config_text);
  write_file_atomic(out_dir / "report.csv", report_csv(report));
  write_file_atomic(out_dir / "config.txt", config_text);

  const ParamCensus c = census(model->params);
  std::ostringstream s;
  const std::size_t n = report.loss.size();
  s << "steps: " << n << '\n';
  s << "trainable_elements: " << c.trainable_elements << '\n';
  s << "frozen_elements: " << c.frozen_elements << '\n';
  std::size_t peak = 0;
  for (std::size_t b : report.retained_bytes) peak = std::max(peak, b);
  s << "peak_retained_bytes: " << peak << '\n';
  if (n > 0) {
    s << "first_loss: " << fmt("%.17g", report.loss.front()) << '\n';
    s << "final_loss: " << fmt("%.17g", report.loss.back()) << '\n';
  }
  if (n >= 2) {
    const std::size_t w = std::min<std::size_t>(50, n / 2);
    const double first = window_mean(report.loss, 0, w);
    const double last = window_mean(report.loss, n - w, w);
    s << "window: " << w << '\n';
    s << "first_window_mean: " << fmt("%.17g", first) << '\n';
    s << "last_window_mean: " << fmt("%.17g", last) << '\n';
    s << "loss_decreased: " << (last < first ? "yes" : "no") << '\n';
  }
  write_file_atomic(out_dir / "summary.txt", s.str());
  write_run_manifest(out_dir);
  out << s.str();
  return kOk;
}

int cmd_bench(const RunConfig& cfg, bool cross, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  prepare_out_dir(out_dir);
  std::vector<std::pair<WiringMode, TuningMode>> pairs;
  if (cross) {
    pairs = {{WiringMode::serial, TuningMode::delta},
             {WiringMode::parallel, TuningMode::delta},
             {WiringMode::serial, TuningMode::full},
             {WiringMode::parallel, TuningMode::full}};
  } else {
    pairs = {{cfg.model.mode, cfg.tuning}};
  }
  MeasureOptions mo;
  mo.warmup = cfg.warmup;
  mo.repetitions = cfg.repetitions;
  mo.seed = cfg.seed;
  const UNetConfig ucfg = cfg.unet();
  const BenchTable table = run_bench(ucfg, pairs, (out_dir / "bench.csv").string(), cfg.bench_batch, mo);
  write_file_atomic(out_dir / "config.txt", echo(cfg));
  write_run_manifest(out_dir);
  out << table.summary();

  for (const auto& r : table.rows) {
    UNetConfig c = ucfg;
    c.mode = r.mode;
    const std::size_t predicted = predict_retained_bytes(c, cfg.bench_batch, trainable_by_name(r.tuning)).retained_bytes;
    if (predicted != r.retained_bytes) {
      err << "bench: guard failed: " << to_string(r.mode) << '/' << to_string(r.tuning) << " retained "
          << r.retained_bytes << " bytes, shape walk predicts " << predicted << '\n';
      return kRuntime;
    }
  }
  std::optional<BenchRatios> ratios;
  try {
    ratios = table.ratios(TuningMode::delta);
  } catch (const std::logic_error& e) {
    err << "bench: guard failed: " << e.what() << '\n';
    return kRuntime;
  }
  if (ratios) {
    out << "memory_ratio=" << fmt("%.6f", ratios->memory_ratio) << '\n';
    out << "bwd_time_ratio=" << fmt("%.6f", ratios->bwd_time_ratio) << '\n';
    if (!(ratios->memory_ratio < 1.0)) {
      err << "bench: guard failed: memory_ratio " << ratios->memory_ratio << " is not below 1\n";
      return kRuntime;
    }
  }
  return kOk;
}

int cmd_verify(const RunConfig& cfg, const VerifyOptions& opts, const fs::path& out_dir, std::ostream& out,
               std::ostream& err) {
  if (!out_dir.empty()) prepare_out_dir(out_dir);
  const std::vector<CheckResult> results = run_checks(cfg, opts);
  std::ostringstream report;
  const CheckResult* first_fail = nullptr;
  for (const auto& r : results) {
    report << status_text(r.status) << ' ' << r.name << ' ' << r.detail << '\n';
    if (r.status == CheckStatus::fail && !first_fail) first_fail = &r;
  }
  out << report.str();
  if (!out_dir.empty()) {
    write_file_atomic(out_dir / "verify.txt", report.str());
    write_file_atomic(out_dir / "config.txt", echo(cfg));
    write_run_manifest(out_dir);
  }
  if (first_fail) {
    err << "verify: first failing check: " << first_fail->name << '\n';
    return kVerifyFailed;
  }
  return kOk;
}

int cmd_sample(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& out_dir, std::ostream& out,
               std::ostream&) {
  prepare_out_dir(out_dir);
  auto model = build_unet(cfg.unet());
  load_checkpoint(*model, checkpoint);
  const NoiseSchedule sched = schedule_of(cfg);
  const Tensor video = ddim_sample(*model, sched, cfg.sample_steps, {cfg.sample_class}, 1, cfg.seed);
  const auto frames = write_frame_images(out_dir / "frames", video);
  write_tensor(out_dir / "sample.mobt", video);
  write_file_atomic(out_dir / "config.txt", echo(cfg));
  write_run_manifest(out_dir);
  out << "frames: " << frames.size() << '\n';
  out << "tensor: " << (out_dir / "sample.mobt").string() << '\n';
  return kOk;
}

int cmd_analyze(const RunConfig& cfg, std::ostream& out) {
  const UNetConfig ucfg = cfg.unet();
  auto model = build_unet(ucfg);
  set_tuning_mode(*model, cfg.tuning);
  const NoiseSchedule sched = schedule_of(cfg);
  Rng rng(cfg.seed);
  Tensor x0(ucfg.input_shape(1));
  for (auto& v : x0.mutable_data()) v = rng.normal();
  Tape tape;
  const Tensor loss = denoise_loss(*model, tape, x0, {0}, sched, rng);
  const NodeSet req = required_set(tape, trainable_params(tape));
  const CostReport cost = op_count(tape, req);
  const MemoryPrediction p = predict_retained_bytes(ucfg, 1, trainable_by_name(cfg.tuning));

  out << census_text(census(model->params));
  out << "forward_alpha: " << cost.forward.alpha() << '\n';
  out << "forward_beta: " << cost.forward.beta() << '\n';
  out << "visited_alpha: " << cost.visited.alpha() << '\n';
  out << "visited_beta: " << cost.visited.beta() << '\n';
  out << "max_block_depth: " << cost.max_block_depth << '\n';
  out << "required_nodes: " << req.size() << '\n';
  out << "spatial_nodes: " << count_tagged(tape, req, LayerTag::spatial) << '\n';
  out << "retained_bytes: " << retained_bytes(tape, req) << '\n';
  out << "predicted_retained_bytes: " << p.retained_bytes << '\n';
  return kOk;
}

namespace {

struct Flags {
  std::string config;
  std::optional<std::string> mode;
  std::optional<std::string> tuning;
  std::optional<std::string> seed;
  std::optional<std::string> steps;
  std::optional<std::string> cls;
  std::vector<std::string> sets;
  std::string out;
  std::string checkpoint;
  std::string poison;
  bool cross = false;
};

void add_common(CLI::App* sub, Flags& f, bool with_mode) {
  sub->add_option("--config", f.config, "key=value config file");
  if (with_mode) {
    sub->add_option("--mode", f.mode, "serial or parallel");
    sub->add_option("--tuning", f.tuning, "delta or full");
  }
  sub->add_option("--seed", f.seed, "run seed (default: MOBIUS_SEED, then 0)");
  sub->add_option("--set", f.sets, "extra key=value override, repeatable");
}

/// Defaults (or `base`), then MOBIUS_SEED, then the config file, then flags.
RunConfig resolve(const Flags& f, const std::string& steps_key, bool need_mode, std::optional<RunConfig> base) {
  RunConfig cfg = base.value_or(RunConfig{});
  if (!base) {
    if (auto s = env_seed()) cfg.seed = *s;
  }
  std::vector<std::string> file_keys;
  if (!f.config.empty()) file_keys = apply_config_text(cfg, read_text(f.config));
  const bool file_mode = std::find(file_keys.begin(), file_keys.end(), "mode") != file_keys.end();
  if (need_mode && !f.mode && !file_mode) throw ConfigError("missing --mode");
  if (f.mode) set_key(cfg, "mode", *f.mode);
  if (f.tuning) set_key(cfg, "tuning", *f.tuning);
  if (f.seed) set_key(cfg, "seed", *f.seed);
  if (f.steps) set_key(cfg, steps_key, *f.steps);
  if (f.cls) set_key(cfg, "sample_class", *f.cls);
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Video diffusion UNet with two-stream temporal fine-tuning", "stp"};
  app.require_subcommand(1);
  Flags f;

  auto* train = app.add_subcommand("train", "fine-tune on the synthetic video dataset");
  add_common(train, f, true);
  train->add_option("--steps", f.steps, "optimizer steps");
  train->add_option("--out", f.out, "run directory")->required();

  auto* bench = app.add_subcommand("bench", "memory and wall-time table");
  add_common(bench, f, true);
  bench->add_flag("--cross", f.cross, "serial/parallel x delta/full");
  bench->add_option("--out", f.out, "run directory")->required();

  auto* verify = app.add_subcommand("verify", "gradcheck, isolation, accounting and zero-init checks");
  add_common(verify, f, true);
  verify->add_option("--poison", f.poison, "test hook: 'spatial' un-freezes one spatial parameter")
      ->check(CLI::IsMember({"spatial"}));
  verify->add_option("--out", f.out, "optional run directory");

  auto* sample = app.add_subcommand("sample", "DDIM sampling from a checkpoint");
  add_common(sample, f, false);
  sample->add_option("--checkpoint", f.checkpoint, "checkpoint or train run directory")->required();
  sample->add_option("--steps", f.steps, "DDIM steps");
  sample->add_option("--class", f.cls, "class id");
  sample->add_option("--out", f.out, "run directory")->required();

  auto* analyze = app.add_subcommand("analyze", "parameter census, op counts and memory prediction");
  add_common(analyze, f, true);

  auto usage = [&](const std::string& msg) {
    CLI::App* active = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << msg << "\n\n" << active->help();
    return kUsage;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return usage(e.what());
  }

  try {
    if (train->parsed()) return cmd_train(resolve(f, "steps", true, std::nullopt), f.out, out, err);
    if (bench->parsed()) return cmd_bench(resolve(f, "steps", !f.cross, std::nullopt), f.cross, f.out, out, err);
    if (verify->parsed()) {
      VerifyOptions vo;
      vo.poison_spatial = f.poison == "spatial";
      return cmd_verify(resolve(f, "steps", true, std::nullopt), vo, f.out, out, err);
    }
    if (analyze->parsed()) return cmd_analyze(resolve(f, "steps", true, std::nullopt), out);
    if (sample->parsed()) {
      const fs::path ckpt = find_checkpoint(f.checkpoint);
      if (ckpt.empty()) {
        err << "sample: no checkpoint at " << f.checkpoint << '\n';
        return kUsage;
      }
      if (!fs::is_regular_file(ckpt / "config.txt")) {
        err << "sample: checkpoint " << ckpt.string() << " has no config.txt\n";
        return kUsage;
      }
      RunConfig base;
      apply_config_text(base, read_text(ckpt / "config.txt"));
      return cmd_sample(resolve(f, "sample_steps", false, base), ckpt, f.out, out, err);
    }
  } catch (const ConfigError& e) {
    return usage(e.what());
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}

}  // namespace stp::cli
