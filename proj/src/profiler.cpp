#include "stp/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>
#include <unordered_set>

#include "stp/diffusion.hpp"
#include "stp/snapshot.hpp"

namespace stp {

namespace {

void tally(OpCounts& c, OpKind kind) {
  switch (kind) {
    case OpKind::attn_spatial: ++c.attn_spatial; break;
    case OpKind::attn_temporal: ++c.attn_temporal; break;
    case OpKind::conv_spatial: ++c.conv_spatial; break;
    case OpKind::conv_temporal: ++c.conv_temporal; break;
    case OpKind::fuse_conv: ++c.fuse_conv; break;
    default: break;
  }
}

const char* const kBlockLabels[] = {"down.1", "down.2", "down.3", "down.4", "mid", "up.1", "up.2", "up.3", "up.4"};

}  // namespace

std::size_t block_critical_path(const Tape& tape, const std::string& block_label) {
  const auto& trace = tape.trace();
  const std::string prefix = block_label + "/";
  auto unit_of = [&](const TraceEntry& e) -> std::string {
    if (e.scope.rfind(prefix, 0) != 0) return {};
    std::string rest = e.scope.substr(prefix.size());
    std::string unit = rest.substr(0, rest.find('/'));
    if (unit == "sc" || unit == "tc" || unit == "sa" || unit == "ta" || unit == "merge") return unit;
    return {};
  };
  std::map<std::string, std::set<std::string>> preds;
  for (const auto& e : trace) {
    const std::string u = unit_of(e);
    if (u.empty()) continue;
    preds[u];
    for (std::size_t in : e.inputs) {
      const std::string v = unit_of(trace.at(in));
      if (!v.empty() && v != u) preds[u].insert(v);
    }
  }
  std::map<std::string, std::size_t> depth;
  std::function<std::size_t(const std::string&, std::size_t)> visit = [&](const std::string& u, std::size_t guard) {
    if (guard > preds.size()) throw std::logic_error("block_critical_path: cyclic sub-layer graph in " + block_label);
    auto it = depth.find(u);
    if (it != depth.end()) return it->second;
    std::size_t d = 0;
    for (const auto& v : preds[u]) d = std::max(d, visit(v, guard + 1));
    return depth[u] = d + 1;
  };
  std::size_t best = 0;
  for (const auto& [u, _] : preds) best = std::max(best, visit(u, 0));
  return best;
}

CostReport op_count(const Tape& tape, const NodeSet& req) {
  CostReport r;
  for (const auto& e : tape.trace()) tally(r.forward, e.kind);
  for (NodeId id : req) tally(r.visited, tape.node(id).kind);
  for (const char* label : kBlockLabels) {
    const std::size_t d = block_critical_path(tape, label);
    if (d == 0) continue;
    r.block_depth[label] = d;
    r.max_block_depth = std::max(r.max_block_depth, d);
  }
  return r;
}

TrainablePredicate trainable_by_name(TuningMode mode) {
  if (mode == TuningMode::full) return [](const std::string&) { return true; };
  return [](const std::string& n) {
    return n.find(".tc.") != std::string::npos || n.find(".ta.") != std::string::npos ||
           n.find(".bridge_t.") != std::string::npos || n.rfind("fusion.", 0) == 0;
  };
}

namespace {

/// Symbolic re-execution of the forward pass: tracks which ops would be
/// recorded, what each keeps for backward and which buffers are shared.
class ShapeWalk {
 public:
  struct Val {
    Shape shape;
    long node = -1;
    std::size_t storage = 0;
  };

  ShapeWalk(const UNetConfig& cfg, std::size_t batch, const TrainablePredicate& trainable)
      : cfg_(cfg), B_(batch), trainable_(trainable) {}

  MemoryPrediction run() {
    const bool parallel = cfg_.mode == WiringMode::parallel;
    const std::size_t td = cfg_.time_dim();
    Val x = constant(cfg_.input_shape(B_));
    Val h = conv(x, "pre.in_conv", cfg_.base_width);
    Val e = linear(constant({B_, td}), "pre.time_fc1", td);
    e = linear(silu(e), "pre.time_fc2", td);
    e = add(e, op({}, {"pre.cond_table"}, {B_, td}, false, {}, false));
    temb_ = silu(e);
    Val t = h;

    std::array<std::size_t, 4> w{};
    for (std::size_t k = 0; k < 4; ++k) w[k] = cfg_.block_width(k);
    auto block = [&](const std::string& b, std::size_t in_w, std::size_t width) {
      if (!parallel) {
        Val u = sa(tc(sc(h, b, in_w, width), b, false, 0), b);
        h = add(u, ta(u, b));
      } else {
        Val s = sc(h, b, in_w, width);
        Val hn = sa(s, b);
        Val m = add(s, tc(t, b, in_w != width, width));
        t = add(hn, ta(m, b));
        h = hn;
      }
    };

    std::array<Val, 4> dh, dt, uh, ut;
    std::size_t in_w = cfg_.base_width;
    for (std::size_t k = 0; k < 4; ++k) {
      block("down." + std::to_string(k + 1), in_w, w[k]);
      in_w = w[k];
      dh[k] = h;
      dt[k] = t;
      if (k < 3) {
        h = resample(h, false);
        if (parallel) t = resample(t, false);
      }
    }
    block("mid", w[3], w[3]);
    const Val mh = h, mt = t;
    for (std::size_t k = 1; k <= 4; ++k) {
      const std::string b = "up." + std::to_string(k);
      const std::size_t width = w[4 - k];
      h = conv(concat(k == 1 ? mh : resample(uh[k - 2], true), dh[4 - k]), b + ".bridge_h", width);
      if (parallel) t = linear(concat(k == 1 ? mt : resample(ut[k - 2], true), dt[4 - k]), b + ".bridge_t", width);
      block(b, width, width);
      uh[k - 1] = h;
      ut[k - 1] = t;
    }
    Val f = h;
    if (parallel) {
      Val cat = concat(h, t);
      f = op({cat}, {"fusion.weight", "fusion.bias"}, with_channels(cat.shape, w[0]), true, {}, false);
    }
    Val y = linear(silu(norm(f, "post.norm")), "post.out", cfg_.in_channels);
    Val loss = op({y}, {}, {1}, false, {y.shape}, false);
    return finish(loss);
  }

 private:
  struct Node {
    std::vector<long> inputs;
    bool trainable = false;
    bool spatial = false;
    std::vector<std::pair<std::size_t, std::size_t>> held;  // (storage, bytes)
  };

  Val constant(Shape s) { return {std::move(s), -1, next_++}; }

  Val op(const std::vector<Val>& ins, const std::vector<std::string>& params, Shape out, bool saves_input,
         const std::vector<Shape>& extra, bool spatial) {
    bool trainable = false;
    for (const auto& p : params) trainable = trainable || trainable_(p);
    bool record = trainable;
    for (const auto& v : ins) record = record || v.node >= 0;
    Val o{std::move(out), -1, next_++};
    if (!record) return o;
    Node n;
    n.trainable = trainable;
    n.spatial = spatial;
    for (const auto& v : ins)
      if (v.node >= 0) n.inputs.push_back(v.node);
    if (saves_input) n.held.emplace_back(ins[0].storage, bytes(ins[0].shape));
    for (const auto& s : extra) n.held.emplace_back(next_++, bytes(s));
    n.held.emplace_back(o.storage, bytes(o.shape));
    o.node = static_cast<long>(nodes_.size());
    nodes_.push_back(std::move(n));
    return o;
  }

  static std::size_t bytes(const Shape& s) { return shape_numel(s) * sizeof(double); }
  static Shape with_channels(Shape s, std::size_t c) {
    s[s.size() == 5 ? 2 : 1] = c;
    return s;
  }
  static std::vector<std::string> pair(const std::string& p, const char* a, const char* b) {
    return {p + a, p + b};
  }

  Val conv(const Val& x, const std::string& p, std::size_t co) {
    return op({x}, pair(p, ".weight", ".bias"), with_channels(x.shape, co), true, {}, true);
  }
  Val linear(const Val& x, const std::string& p, std::size_t co) {
    return op({x}, pair(p, ".weight", ".bias"), with_channels(x.shape, co), true, {}, false);
  }
  Val norm(const Val& x, const std::string& p) {
    const Shape stats{x.shape[0], x.shape[1], cfg_.norm_groups};
    return op({x}, pair(p, ".gamma", ".beta"), x.shape, true, {stats, stats}, false);
  }
  Val silu(const Val& x) { return op({x}, {}, x.shape, true, {}, false); }
  Val add(const Val& a, const Val& b) { return op({a, b}, {}, a.shape, false, {}, false); }
  Val concat(const Val& a, const Val& b) {
    return op({a, b}, {}, with_channels(a.shape, a.shape[2] + b.shape[2]), false, {}, false);
  }
  Val resample(const Val& x, bool up) {
    Shape s = x.shape;
    s[3] = up ? s[3] * 2 : s[3] / 2;
    s[4] = up ? s[4] * 2 : s[4] / 2;
    return op({x}, {}, s, false, {}, false);
  }
  std::vector<std::string> attn_names(const std::string& p) {
    std::vector<std::string> n;
    for (const char* m : {"q", "k", "v", "out"}) {
      n.push_back(p + "." + m + ".weight");
      n.push_back(p + "." + m + ".bias");
    }
    return n;
  }

  Val sc(const Val& h, const std::string& b, std::size_t in_w, std::size_t w) {
    Val a = conv(silu(norm(h, b + ".sc.norm1")), b + ".sc.conv1", w);
    a = add(a, linear(temb_, b + ".time_proj", w));
    a = conv(silu(norm(a, b + ".sc.norm2")), b + ".sc.conv2", w);
    Val skip = in_w != w ? conv(h, b + ".sc.shortcut", w) : h;
    return add(skip, a);
  }
  Val sa(const Val& h, const std::string& b) {
    const std::size_t C = h.shape[2], N = h.shape[3] * h.shape[4];
    Val a = conv(norm(h, b + ".sa.norm"), b + ".sa.proj_in", C);
    a = op({a}, attn_names(b + ".sa.attn"), a.shape, true, {{B_, cfg_.frames, N, N}}, true);
    a = conv(a, b + ".sa.proj_out", C);
    Val y = add(h, a);
    Val f = conv(norm(y, b + ".sa.ff_norm"), b + ".sa.ff_in", 2 * C);
    f = conv(silu(f), b + ".sa.ff_out", C);
    return add(y, f);
  }
  Val tc(const Val& x, const std::string& b, bool shortcut, std::size_t w) {
    Val x0 = shortcut ? linear(x, b + ".tc.shortcut", w) : x;
    Val d = silu(norm(x0, b + ".tc.norm"));
    d = op({d}, pair(b + ".tc.conv", ".weight", ".bias"), d.shape, true, {}, false);
    return add(x0, d);
  }
  Val ta(const Val& x, const std::string& b) {
    const std::size_t hw = x.shape[3] * x.shape[4], F = cfg_.frames;
    Val n = norm(x, b + ".ta.norm");
    return op({n}, attn_names(b + ".ta.attn"), n.shape, true, {{B_, hw, F, F}}, false);
  }

  MemoryPrediction finish(const Val& loss) {
    MemoryPrediction out;
    if (loss.node < 0) return out;
    const std::size_t n = nodes_.size();
    std::vector<char> reach(n, 0), anc(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      reach[i] = nodes_[i].trainable;
      for (long in : nodes_[i].inputs) reach[i] = reach[i] || reach[static_cast<std::size_t>(in)];
    }
    anc[static_cast<std::size_t>(loss.node)] = 1;
    for (std::size_t i = n; i-- > 0;) {
      if (!anc[i]) continue;
      for (long in : nodes_[i].inputs) anc[static_cast<std::size_t>(in)] = 1;
    }
    std::unordered_set<std::size_t> seen;
    for (std::size_t i = 0; i < n; ++i) {
      if (!reach[i] || !anc[i]) continue;
      ++out.required_nodes;
      if (nodes_[i].spatial) ++out.spatial_nodes;
      for (const auto& [storage, b] : nodes_[i].held)
        if (seen.insert(storage).second) out.retained_bytes += b;
    }
    return out;
  }

  const UNetConfig& cfg_;
  std::size_t B_;
  const TrainablePredicate& trainable_;
  Val temb_;
  std::vector<Node> nodes_;
  std::size_t next_ = 0;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

MemoryPrediction predict_retained_bytes(const UNetConfig& cfg, std::size_t batch, const TrainablePredicate& trainable) {
  cfg.validate();
  return ShapeWalk(cfg, batch, trainable).run();
}

StepMeasurement measure_step(UNetModel& model, std::size_t batch, const MeasureOptions& opts) {
  const UNetConfig& cfg = model.cfg;
  const NoiseSchedule sched = make_schedule(cfg.num_timesteps);
  Rng rng(opts.seed);
  Tensor x0(cfg.input_shape(batch));
  for (auto& v : x0.mutable_data()) v = 2.0 * rng.uniform() - 1.0;
  std::vector<std::size_t> cond(batch);
  for (std::size_t b = 0; b < batch; ++b) cond[b] = b % cfg.cond_vocab;
  const NoiseDraw draw = draw_noising(x0.shape(), sched.T, rng);
  const Denoiser net = unet_denoiser(model);

  StepMeasurement m;
  auto once = [&](double& fwd, double& bwd) {
    using clock = std::chrono::steady_clock;
    Tape tape;
    const auto t0 = clock::now();
    Tensor loss = denoise_loss(net, tape, x0, cond, draw, sched);
    const auto t1 = clock::now();
    m.retained_bytes = retained_bytes(tape, required_set(tape, trainable_params(tape)));
    const auto t2 = clock::now();
    backward(tape, loss);
    const auto t3 = clock::now();
    fwd = std::chrono::duration<double, std::milli>(t1 - t0).count();
    bwd = std::chrono::duration<double, std::milli>(t3 - t2).count();
  };
  double f = 0, b = 0;
  for (std::size_t i = 0; i < opts.warmup; ++i) once(f, b);
  std::size_t reps = std::max<std::size_t>(opts.repetitions, 1);
  while (true) {
    std::vector<double> fw, bw, st;
    for (std::size_t i = 0; i < reps; ++i) {
      once(f, b);
      fw.push_back(f);
      bw.push_back(b);
      st.push_back(f + b);
    }
    m.fwd_ms = median(fw);
    m.bwd_ms = median(bw);
    m.step_ms = median(st);
    m.repetitions = reps;
    // Sub-millisecond steps are too close to timer noise for a median of ten.
    if (m.step_ms >= 1.0 || reps >= 1000) break;
    reps *= 10;
  }
  return m;
}

std::uint64_t config_hash(const UNetConfig& cfg) {
  std::ostringstream os;
  os << cfg.in_channels << '|' << cfg.base_width << '|';
  for (auto m : cfg.channel_multipliers) os << m << ',';
  os << '|' << cfg.frames << '|' << cfg.height << '|' << cfg.width << '|' << cfg.num_timesteps << '|'
     << cfg.cond_vocab << '|' << cfg.seed << '|' << cfg.fusion_kernel << '|' << cfg.norm_groups;
  return fnv1a(os.str());
}

std::optional<BenchRatios> BenchTable::ratios(TuningMode tuning) const {
  const BenchRow* serial = nullptr;
  const BenchRow* parallel = nullptr;
  for (const auto& r : rows) {
    if (r.tuning != tuning) continue;
    (r.mode == WiringMode::serial ? serial : parallel) = &r;
  }
  if (!serial || !parallel) return std::nullopt;
  if (serial->config_hash != parallel->config_hash) {
    throw std::logic_error("bench: refusing ratios between rows built from different configs");
  }
  return BenchRatios{static_cast<double>(parallel->retained_bytes) / static_cast<double>(serial->retained_bytes),
                     parallel->bwd_ms / serial->bwd_ms};
}

std::string BenchTable::csv() const {
  std::ostringstream os;
  os << kBenchHeader << '\n';
  char buf[64];
  for (const auto& r : rows) {
    os << to_string(r.mode) << ',' << to_string(r.tuning) << ',' << r.retained_bytes << ',' << r.params_total << ','
       << r.params_trainable;
    for (double v : {r.fwd_ms, r.bwd_ms, r.step_ms}) {
      std::snprintf(buf, sizeof buf, ",%.3f", v);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::string BenchTable::summary() const {
  std::size_t max_bytes = 1;
  double max_ms = 1e-9;
  for (const auto& r : rows) {
    max_bytes = std::max(max_bytes, r.retained_bytes);
    max_ms = std::max(max_ms, r.bwd_ms);
  }
  auto bar = [](double frac) { return std::string(static_cast<std::size_t>(frac * 40.0 + 0.5), '#'); };
  std::ostringstream os;
  char buf[256];
  for (const auto& r : rows) {
    const std::string label = std::string(to_string(r.mode)) + "/" + std::string(to_string(r.tuning));
    std::snprintf(buf, sizeof buf, "%-15s memory %-40s %9.2f MB\n", label.c_str(),
                  bar(static_cast<double>(r.retained_bytes) / static_cast<double>(max_bytes)).c_str(),
                  static_cast<double>(r.retained_bytes) / 1e6);
    os << buf;
    std::snprintf(buf, sizeof buf, "%-15s bwd    %-40s %9.2f ms\n", "", bar(r.bwd_ms / max_ms).c_str(), r.bwd_ms);
    os << buf;
  }
  return os.str();
}

BenchTable run_bench(const UNetConfig& cfg, const std::vector<std::pair<WiringMode, TuningMode>>& pairs,
                     const std::string& out_path, std::size_t batch, const MeasureOptions& opts) {
  BenchTable table;
  for (const auto& [mode, tuning] : pairs) {
    UNetConfig c = cfg;
    c.mode = mode;
    auto model = build_unet(c);
    set_tuning_mode(*model, tuning);
    const ParamCensus census_now = census(model->params);
    const StepMeasurement m = measure_step(*model, batch, opts);
    table.rows.push_back({mode, tuning, m.retained_bytes, census_now.total_elements, census_now.trainable_elements,
                          m.fwd_ms, m.bwd_ms, m.step_ms, config_hash(c)});
  }
  if (!out_path.empty()) {
    try {
      write_file_atomic(out_path, table.csv());
    } catch (const std::exception& e) {
      throw std::runtime_error("bench: cannot write " + out_path + ": " + e.what());
    }
  }
  return table;
}

std::string census_text(const ParamCensus& c) {
  std::ostringstream os;
  for (LayerTag tag : {LayerTag::spatial, LayerTag::temporal, LayerTag::plumbing}) {
    const auto e = c.elements.count(tag) ? c.elements.at(tag) : 0;
    const auto t = c.tensors.count(tag) ? c.tensors.at(tag) : 0;
    os << to_string(tag) << "_elements: " << e << '\n'
       << to_string(tag) << "_tensors: " << t << '\n'
       << to_string(tag) << "_bytes: " << e * sizeof(double) << '\n';
  }
  os << "total_elements: " << c.total_elements << '\n'
     << "total_bytes: " << c.total_elements * sizeof(double) << '\n'
     << "frozen_elements: " << c.frozen_elements << '\n'
     << "trainable_elements: " << c.trainable_elements << '\n';
  char buf[64];
  std::snprintf(buf, sizeof buf, "trainable_share: %.4f\n",
                c.total_elements ? static_cast<double>(c.trainable_elements) / static_cast<double>(c.total_elements) : 0.0);
  os << buf;
  return os.str();
}

}  // namespace stp
