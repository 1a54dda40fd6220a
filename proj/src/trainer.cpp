#include "stp/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "stp/snapshot.hpp"

namespace stp {

std::string_view to_string(TuningMode mode) { return mode == TuningMode::full ? "full" : "delta"; }

TuningMode parse_tuning_mode(std::string_view text) {
  if (text == "full") return TuningMode::full;
  if (text == "delta") return TuningMode::delta;
  throw std::invalid_argument("unknown tuning '" + std::string(text) + "' (expected delta or full)");
}

void set_tuning_mode(UNetModel& model, TuningMode mode) {
  for (auto& p : model.params.all()) p.frozen = mode == TuningMode::delta && p.tag == LayerTag::spatial;
}

namespace {

std::vector<ClassMotion> default_motions(std::size_t n) {
  static const ShapeKind kinds[] = {ShapeKind::square, ShapeKind::disk, ShapeKind::cross, ShapeKind::ring};
  static const int vel[][2] = {{1, 0}, {0, 1}, {-1, 1}, {1, -1}, {2, 0}, {0, -2}, {-2, -1}, {1, 2}};
  std::vector<ClassMotion> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = {kinds[k % 4], vel[k % 8][0], vel[k % 8][1]};
  return out;
}

bool in_shape(ShapeKind kind, std::size_t dx, std::size_t dy, std::size_t S) {
  const double c = (static_cast<double>(S) - 1.0) / 2.0;
  const double x = static_cast<double>(dx) - c, y = static_cast<double>(dy) - c;
  const double r = static_cast<double>(S) / 2.0;
  switch (kind) {
    case ShapeKind::square:
      return true;
    case ShapeKind::disk:
      return x * x + y * y <= r * r;
    case ShapeKind::cross:
      return std::abs(x) <= r / 3.0 || std::abs(y) <= r / 3.0;
    case ShapeKind::ring: {
      const double d2 = x * x + y * y;
      return d2 <= r * r && d2 >= (r * 0.5) * (r * 0.5);
    }
  }
  return false;
}

std::size_t wrap(long v, std::size_t n) {
  const long m = static_cast<long>(n);
  return static_cast<std::size_t>(((v % m) + m) % m);
}

}  // namespace

Dataset::Dataset(SyntheticVideoSpec spec) : spec_(std::move(spec)) {
  if (spec_.num_classes == 0 || spec_.frames == 0 || spec_.channels == 0 || spec_.clips_per_class == 0) {
    throw std::invalid_argument("dataset: classes, frames, channels and clips per class must be positive");
  }
  if (spec_.shape_size == 0 || spec_.shape_size > spec_.height || spec_.shape_size > spec_.width) {
    throw std::invalid_argument("dataset: shape size " + std::to_string(spec_.shape_size) + " does not fit a " +
                                std::to_string(spec_.height) + "x" + std::to_string(spec_.width) + " frame");
  }
  motions_ = spec_.motions.empty() ? default_motions(spec_.num_classes) : spec_.motions;
  if (motions_.size() != spec_.num_classes) {
    throw std::invalid_argument("dataset: need one motion per class, got " + std::to_string(motions_.size()));
  }
}

Clip Dataset::get(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("dataset: item " + std::to_string(i) + " of " + std::to_string(size()));
  return clip(i % spec_.num_classes, i / spec_.num_classes);
}

Clip Dataset::clip(std::size_t cls, std::size_t index) const {
  const auto& s = spec_;
  if (cls >= s.num_classes) throw std::out_of_range("dataset: class " + std::to_string(cls));
  Rng rng = Rng::derive(s.seed, cls, index);
  const long px = static_cast<long>(rng.below(s.width));
  const long py = static_cast<long>(rng.below(s.height));
  std::vector<double> colour(s.channels);
  for (auto& c : colour) c = -0.6 + 1.6 * rng.uniform();
  const ClassMotion& m = motions_[cls];
  Clip out{Tensor({s.frames, s.channels, s.height, s.width}, -1.0), cls};
  auto d = out.video.mutable_data();
  for (std::size_t f = 0; f < s.frames; ++f) {
    const long ox = px + m.vx * static_cast<long>(f);
    const long oy = py + m.vy * static_cast<long>(f);
    for (std::size_t y = 0; y < s.height; ++y) {
      const std::size_t dy = wrap(static_cast<long>(y) - oy, s.height);
      if (dy >= s.shape_size) continue;
      for (std::size_t x = 0; x < s.width; ++x) {
        const std::size_t dx = wrap(static_cast<long>(x) - ox, s.width);
        if (dx >= s.shape_size || !in_shape(m.shape, dx, dy, s.shape_size)) continue;
        for (std::size_t c = 0; c < s.channels; ++c) d[((f * s.channels + c) * s.height + y) * s.width + x] = colour[c];
      }
    }
  }
  return out;
}

Dataset make_dataset(const SyntheticVideoSpec& spec) { return Dataset(spec); }

void assemble_batch(const Dataset& data, const std::vector<std::size_t>& items, Tensor& x0,
                    std::vector<std::size_t>& cond) {
  const auto& s = data.spec();
  const std::size_t item = s.frames * s.channels * s.height * s.width;
  x0 = Tensor({items.size(), s.frames, s.channels, s.height, s.width});
  cond.resize(items.size());
  auto d = x0.mutable_data();
  for (std::size_t b = 0; b < items.size(); ++b) {
    Clip c = data.get(items[b]);
    std::copy(c.video.data().begin(), c.video.data().end(), d.begin() + static_cast<std::ptrdiff_t>(b * item));
    cond[b] = c.cls;
  }
}

StepDraw draw_step(const Dataset& data, std::size_t effective_batch, std::size_t T, std::uint64_t seed,
                   std::size_t step) {
  const auto& s = data.spec();
  Rng rng = Rng::derive(seed, step);
  StepDraw d;
  d.items.resize(effective_batch);
  for (auto& i : d.items) i = rng.below(data.size());
  d.noise = draw_noising({effective_batch, s.frames, s.channels, s.height, s.width}, T, rng);
  return d;
}

std::vector<std::string> Adam::step(std::deque<Parameter>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  std::vector<std::string> touched;
  for (auto& p : params) {
    if (p.frozen || !p.grad) continue;
    Moments& st = state_[p.name];
    const std::size_t n = p.value.numel();
    if (st.m.empty()) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    auto w = p.value.mutable_data();
    auto g = p.grad->data();
    for (std::size_t i = 0; i < n; ++i) {
      st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * g[i];
      st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * g[i] * g[i];
      const double mh = st.m[i] / c1;
      const double vh = st.v[i] / c2;
      w[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
    p.clear_grad();
    touched.push_back(p.name);
  }
  return touched;
}

TrainReport train(UNetModel& model, const Dataset& data, const NoiseSchedule& schedule, TuningMode mode,
                  const TrainOptions& opts) {
  const UNetConfig& cfg = model.cfg;
  const auto& ds = data.spec();
  if (ds.frames != cfg.frames || ds.channels != cfg.in_channels || ds.height != cfg.height || ds.width != cfg.width) {
    throw ShapeError("train: dataset clips do not match the model input shape " + shape_str(cfg.input_shape(1)));
  }
  if (ds.num_classes > cfg.cond_vocab) throw std::invalid_argument("train: more dataset classes than cond_vocab");
  if (schedule.T != cfg.num_timesteps) throw std::invalid_argument("train: schedule T differs from num_timesteps");
  if (opts.batch == 0 || opts.accumulation == 0) throw std::invalid_argument("train: batch and accumulation must be positive");

  set_tuning_mode(model, mode);
  for (auto& p : model.params.all()) p.clear_grad();
  const bool isolated = cfg.mode == WiringMode::parallel && mode == TuningMode::delta;
  const std::size_t eff = opts.batch * opts.accumulation;
  const std::size_t item = cfg.frames * cfg.in_channels * cfg.height * cfg.width;
  const double scale = 1.0 / static_cast<double>(eff * item);
  const Denoiser net = unet_denoiser(model);
  Adam adam(opts.lr);
  TrainReport report;

  for (std::size_t step = 0; step < opts.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const StepDraw draw = draw_step(data, eff, schedule.T, opts.seed, step);
    double loss_sum = 0.0;
    std::size_t peak = 0;
    for (std::size_t m = 0; m < opts.accumulation; ++m) {
      const std::size_t lo = m * opts.batch;
      std::vector<std::size_t> items(draw.items.begin() + static_cast<std::ptrdiff_t>(lo),
                                     draw.items.begin() + static_cast<std::ptrdiff_t>(lo + opts.batch));
      Tensor x0;
      std::vector<std::size_t> cond;
      assemble_batch(data, items, x0, cond);
      NoiseDraw nd;
      nd.timesteps.assign(draw.noise.timesteps.begin() + static_cast<std::ptrdiff_t>(lo),
                          draw.noise.timesteps.begin() + static_cast<std::ptrdiff_t>(lo + opts.batch));
      nd.eps = Tensor(x0.shape());
      auto src = draw.noise.eps.data();
      std::copy(src.begin() + static_cast<std::ptrdiff_t>(lo * item),
                src.begin() + static_cast<std::ptrdiff_t>((lo + opts.batch) * item), nd.eps.mutable_data().begin());

      Tape tape;
      Tensor loss;
      try {
        loss = denoise_loss(net, tape, x0, cond, nd, schedule, scale);
      } catch (const NumericError& e) {
        throw TrainingAborted("step " + std::to_string(step) + ": " + e.what(), step);
      }
      if (!std::isfinite(loss.item())) {
        throw TrainingAborted("step " + std::to_string(step) + ": non-finite loss", step);
      }
      const NodeSet req = required_set(tape, trainable_params(tape));
      if (isolated && count_tagged(tape, req, LayerTag::spatial) != 0) {
        throw std::logic_error("train: spatial node on the backward path in parallel delta-tuning");
      }
      peak = std::max(peak, retained_bytes(tape, req));
      const BackwardResult r = backward(tape, loss);
      for (const auto& [name, g] : r.grads) {
        if (!g.all_finite()) throw TrainingAborted("step " + std::to_string(step) + ": non-finite gradient for " + name, step);
        model.params.get(name).accumulate_grad(g);
      }
      loss_sum += loss.item();
    }
    for (auto& name : adam.step(model.params.all())) report.updated.insert(std::move(name));
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    report.loss.push_back(loss_sum);
    report.step_ms.push_back(ms);
    report.retained_bytes.push_back(peak);
    if (opts.on_step) opts.on_step(step, loss_sum);
  }
  return report;
}

std::string report_csv(const TrainReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss,ms,retained_bytes\n";
  for (std::size_t i = 0; i < r.loss.size(); ++i) {
    os << i << ',' << r.loss[i] << ',' << r.step_ms[i] << ',' << r.retained_bytes[i] << '\n';
  }
  return os.str();
}

void save_checkpoint(const UNetModel& model, const std::filesystem::path& dir, const std::string& config_text) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (const auto& p : model.params.all()) {
    const std::string file = p.name + ".mobt";
    write_tensor(dir / file, p.value);
    manifest << p.name << '\t' << to_string(p.tag) << '\t' << shape_str(p.value.shape()) << '\t' << file << '\n';
  }
  if (!config_text.empty()) write_file_atomic(dir / "config.txt", config_text);
  write_file_atomic(dir / "manifest.txt", manifest.str());
}

void load_checkpoint(UNetModel& model, const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw std::runtime_error("checkpoint: cannot read " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> files;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, tag, shape, file;
    if (!std::getline(ls, name, '\t') || !std::getline(ls, tag, '\t') || !std::getline(ls, shape, '\t') ||
        !std::getline(ls, file)) {
      throw std::runtime_error("checkpoint: malformed manifest line '" + line + "'");
    }
    files[name] = file;
  }
  for (auto& p : model.params.all()) {
    auto it = files.find(p.name);
    if (it == files.end()) throw std::runtime_error("checkpoint: missing parameter " + p.name);
    Tensor v = read_tensor(dir / it->second);
    if (v.shape() != p.value.shape()) {
      throw ShapeError("checkpoint: " + p.name + " has shape " + shape_str(v.shape()) + ", model expects " +
                       shape_str(p.value.shape()));
    }
    p.value = std::move(v);
  }
  if (files.size() != model.params.size()) throw std::runtime_error("checkpoint: manifest has extra parameters");
}

}  // namespace stp
