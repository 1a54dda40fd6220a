#include "stp/unet.hpp"

#include <cmath>
#include <stdexcept>

#include "stp/rng.hpp"

namespace stp {

std::string_view to_string(WiringMode mode) {
  return mode == WiringMode::serial ? "serial" : "parallel";
}

WiringMode parse_wiring_mode(std::string_view text) {
  if (text == "serial") return WiringMode::serial;
  if (text == "parallel") return WiringMode::parallel;
  throw std::invalid_argument("unknown mode '" + std::string(text) + "' (expected serial or parallel)");
}

void UNetConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid config: " + msg); };
  if (channel_multipliers.size() != 4) {
    fail("channel_multipliers needs exactly 4 entries, got " + std::to_string(channel_multipliers.size()));
  }
  for (std::size_t m : channel_multipliers) {
    if (m == 0) fail("channel multipliers must be positive");
  }
  if (in_channels == 0 || base_width == 0 || frames == 0) fail("in_channels, base_width and frames must be positive");
  if (height == 0 || width == 0 || height % 8 || width % 8) {
    fail("height and width must be positive multiples of 8, got " + std::to_string(height) + "x" +
         std::to_string(width));
  }
  if (num_timesteps == 0) fail("num_timesteps must be positive");
  if (cond_vocab == 0) fail("cond_vocab must be positive");
  if (fusion_kernel != 1 && fusion_kernel != 3) fail("fusion_kernel must be 1 or 3");
  if (norm_groups == 0) fail("norm_groups must be positive");
  if (base_width % norm_groups) fail("base_width must be divisible by norm_groups");
  for (std::size_t k = 0; k < 4; ++k) {
    if (block_width(k) % norm_groups) fail("block widths must be divisible by norm_groups");
  }
}

std::size_t UNetConfig::block_width(std::size_t down_index) const {
  return base_width * channel_multipliers.at(down_index);
}

Parameter& ParameterStore::add(std::string name, Tensor value, LayerTag tag) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  index_.emplace(name, params_.size());
  Parameter p;
  p.name = std::move(name);
  p.value = std::move(value);
  p.tag = tag;
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

std::vector<Parameter*> ParameterStore::pointers() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

ParamCensus census(const ParameterStore& store) {
  ParamCensus c;
  for (LayerTag t : {LayerTag::spatial, LayerTag::temporal, LayerTag::plumbing}) {
    c.elements[t] = 0;
    c.tensors[t] = 0;
  }
  for (const auto& p : store.all()) {
    const std::size_t n = p.value.numel();
    c.elements[p.tag] += n;
    c.tensors[p.tag] += 1;
    c.total_elements += n;
    (p.frozen ? c.frozen_elements : c.trainable_elements) += n;
  }
  return c;
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Every tensor draws from its own stream keyed by name, so a parameter's
/// initial value does not depend on which other parameters exist.
class Builder {
 public:
  explicit Builder(UNetModel& m) : m_(m) {}

  const Parameter* normal(const std::string& name, Shape shape, double stddev, LayerTag tag,
                          double mean = 0.0) {
    Rng rng = Rng::derive(m_.cfg.seed, fnv1a(name));
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = mean + stddev * rng.normal();
    return &m_.params.add(name, std::move(t), tag);
  }

  const Parameter* constant(const std::string& name, Shape shape, double value, LayerTag tag) {
    return &m_.params.add(name, Tensor(std::move(shape), value), tag);
  }

  NormParams spatial_norm(const std::string& prefix, std::size_t C) {
    return {normal(prefix + ".gamma", {C}, 0.05, LayerTag::spatial, 1.0),
            normal(prefix + ".beta", {C}, 0.05, LayerTag::spatial)};
  }

  NormParams unit_norm(const std::string& prefix, std::size_t C, LayerTag tag) {
    return {constant(prefix + ".gamma", {C}, 1.0, tag), constant(prefix + ".beta", {C}, 0.0, tag)};
  }

  Conv2dParams conv(const std::string& prefix, std::size_t co, std::size_t ci, std::size_t k) {
    const double fan_in = static_cast<double>(ci * k * k);
    return {normal(prefix + ".weight", {co, ci, k, k}, 1.0 / std::sqrt(fan_in), LayerTag::spatial),
            normal(prefix + ".bias", {co}, 0.01, LayerTag::spatial)};
  }

  LinearParams lin(const std::string& prefix, std::size_t out, std::size_t in, LayerTag tag) {
    return {normal(prefix + ".weight", {out, in}, 1.0 / std::sqrt(static_cast<double>(in)), tag),
            normal(prefix + ".bias", {out}, 0.01, tag)};
  }

  AttentionParams spatial_attn(const std::string& prefix, std::size_t C) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(C));
    AttentionParams a;
    const Parameter** slots[4][2] = {{&a.q_weight, &a.q_bias},
                                     {&a.k_weight, &a.k_bias},
                                     {&a.v_weight, &a.v_bias},
                                     {&a.out_weight, &a.out_bias}};
    const char* names[4] = {"q", "k", "v", "out"};
    for (int i = 0; i < 4; ++i) {
      *slots[i][0] = normal(prefix + "." + names[i] + ".weight", {C, C}, sd, LayerTag::spatial);
      *slots[i][1] = normal(prefix + "." + names[i] + ".bias", {C}, 0.01, LayerTag::spatial);
    }
    return a;
  }

  AttentionParams temporal_attn(const std::string& prefix, std::size_t C) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(C));
    const LayerTag tag = LayerTag::temporal;
    AttentionParams a;
    a.q_weight = normal(prefix + ".q.weight", {C, C}, sd, tag);
    a.q_bias = constant(prefix + ".q.bias", {C}, 0.0, tag);
    a.k_weight = normal(prefix + ".k.weight", {C, C}, sd, tag);
    a.k_bias = constant(prefix + ".k.bias", {C}, 0.0, tag);
    a.v_weight = normal(prefix + ".v.weight", {C, C}, sd, tag);
    a.v_bias = constant(prefix + ".v.bias", {C}, 0.0, tag);
    a.out_weight = constant(prefix + ".out.weight", {C, C}, 0.0, tag);
    a.out_bias = constant(prefix + ".out.bias", {C}, 0.0, tag);
    return a;
  }

  BlockParams block(const std::string& label, std::size_t in_w, std::size_t w) {
    const auto& cfg = m_.cfg;
    const bool parallel = cfg.mode == WiringMode::parallel;
    BlockParams b;
    b.label = label;
    b.in_width = in_w;
    b.width = w;
    b.groups = cfg.norm_groups;
    const std::string pre = label + ".";
    b.sc.norm1 = spatial_norm(pre + "sc.norm1", in_w);
    b.sc.conv1 = conv(pre + "sc.conv1", w, in_w, 3);
    b.sc.norm2 = spatial_norm(pre + "sc.norm2", w);
    b.sc.conv2 = conv(pre + "sc.conv2", w, w, 3);
    if (in_w != w) b.sc.shortcut = conv(pre + "sc.shortcut", w, in_w, 1);
    b.time_proj = lin(pre + "time_proj", w, cfg.time_dim(), LayerTag::spatial);

    b.sa.norm = spatial_norm(pre + "sa.norm", w);
    b.sa.proj_in = conv(pre + "sa.proj_in", w, w, 1);
    b.sa.attn = spatial_attn(pre + "sa.attn", w);
    b.sa.proj_out = conv(pre + "sa.proj_out", w, w, 1);
    b.sa.ff_norm = spatial_norm(pre + "sa.ff_norm", w);
    b.sa.ff_in = conv(pre + "sa.ff_in", 2 * w, w, 1);
    b.sa.ff_out = conv(pre + "sa.ff_out", w, 2 * w, 1);

    if (parallel && in_w != w) b.tc.shortcut = lin(pre + "tc.shortcut", w, in_w, LayerTag::temporal);
    b.tc.norm = unit_norm(pre + "tc.norm", w, LayerTag::temporal);
    b.tc.conv = {constant(pre + "tc.conv.weight", {w, 3}, 0.0, LayerTag::temporal),
                 constant(pre + "tc.conv.bias", {w}, 0.0, LayerTag::temporal)};

    b.ta.norm = unit_norm(pre + "ta.norm", w, LayerTag::temporal);
    b.ta.attn = temporal_attn(pre + "ta.attn", w);
    return b;
  }

 private:
  UNetModel& m_;
};

}  // namespace

std::unique_ptr<UNetModel> build_unet(const UNetConfig& cfg) {
  cfg.validate();
  auto model = std::make_unique<UNetModel>(cfg);
  UNetModel& m = *model;
  Builder b(m);
  const std::size_t td = cfg.time_dim();
  const bool parallel = cfg.mode == WiringMode::parallel;
  std::array<std::size_t, 4> w{};
  for (std::size_t k = 0; k < 4; ++k) w[k] = cfg.block_width(k);

  m.in_conv = b.conv("pre.in_conv", cfg.base_width, cfg.in_channels, 3);
  m.time_fc1 = b.lin("pre.time_fc1", td, td, LayerTag::spatial);
  m.time_fc2 = b.lin("pre.time_fc2", td, td, LayerTag::spatial);
  m.cond_table = b.normal("pre.cond_table", {cfg.cond_vocab, td}, 0.5, LayerTag::spatial);

  std::size_t in_w = cfg.base_width;
  for (std::size_t k = 0; k < 4; ++k) {
    m.down[k] = b.block("down." + std::to_string(k + 1), in_w, w[k]);
    in_w = w[k];
  }
  m.mid = b.block("mid", w[3], w[3]);
  for (std::size_t k = 1; k <= 4; ++k) {
    const std::size_t width = w[4 - k];
    const std::size_t first = k == 1 ? w[3] : w[5 - k];
    const std::size_t cat = first + width;
    const std::string label = "up." + std::to_string(k);
    m.bridge_h[k - 1] = b.conv(label + ".bridge_h", width, cat, 1);
    if (parallel) {
      // The t-stream adapter starts as a copy of the h-stream adapter.
      m.bridge_t[k - 1] = {
          &m.params.add(label + ".bridge_t.weight", m.bridge_h[k - 1].weight->value.reshaped({width, cat}).clone(),
                        LayerTag::temporal),
          &m.params.add(label + ".bridge_t.bias", m.bridge_h[k - 1].bias->value.clone(), LayerTag::temporal)};
    }
    m.up[k - 1] = b.block(label, width, width);
  }
  if (parallel) {
    // [0.5 I | 0.5 I] at the centre tap: fuse(h, h) == h.
    const std::size_t C = w[0], K = cfg.fusion_kernel;
    Tensor fw({C, 2 * C, K, K});
    auto d = fw.mutable_data();
    const std::size_t centre = (K / 2) * K + K / 2;
    for (std::size_t c = 0; c < C; ++c) {
      d[(c * 2 * C + c) * K * K + centre] = 0.5;
      d[(c * 2 * C + C + c) * K * K + centre] = 0.5;
    }
    m.fusion = Conv2dParams{&m.params.add("fusion.weight", std::move(fw), LayerTag::plumbing),
                            &m.params.add("fusion.bias", Tensor({C}), LayerTag::plumbing)};
  }
  m.out_norm = b.spatial_norm("post.norm", w[0]);
  m.out_proj = b.lin("post.out", cfg.in_channels, w[0], LayerTag::spatial);
  return model;
}

Tensor spatial_conv(Tape& tape, const Tensor& h, const BlockParams& p, const Tensor& temb_act) {
  Tensor a = silu(tape, group_norm(tape, h, p.sc.norm1, p.groups));
  a = conv_spatial(tape, a, p.sc.conv1);
  a = add(tape, a, linear(tape, temb_act, p.time_proj));
  a = silu(tape, group_norm(tape, a, p.sc.norm2, p.groups));
  a = conv_spatial(tape, a, p.sc.conv2);
  Tensor skip = p.sc.shortcut ? conv_spatial(tape, h, *p.sc.shortcut) : h;
  return add(tape, skip, a);
}

Tensor spatial_attn(Tape& tape, const Tensor& h, const BlockParams& p) {
  Tensor a = conv_spatial(tape, group_norm(tape, h, p.sa.norm, p.groups), p.sa.proj_in);
  a = attn_spatial(tape, a, p.sa.attn);
  a = conv_spatial(tape, a, p.sa.proj_out);
  Tensor y = add(tape, h, a);
  Tensor f = conv_spatial(tape, group_norm(tape, y, p.sa.ff_norm, p.groups), p.sa.ff_in);
  f = conv_spatial(tape, silu(tape, f), p.sa.ff_out);
  return add(tape, y, f);
}

Tensor temporal_conv(Tape& tape, const Tensor& x, const BlockParams& p) {
  Tensor x0 = p.tc.shortcut ? linear(tape, x, *p.tc.shortcut) : x;
  Tensor d = conv_temporal(tape, silu(tape, group_norm(tape, x0, p.tc.norm, p.groups)), p.tc.conv);
  return add(tape, x0, d);
}

Tensor temporal_attn_delta(Tape& tape, const Tensor& x, const BlockParams& p) {
  return attn_temporal(tape, group_norm(tape, x, p.ta.norm, p.groups), p.ta.attn);
}

Tensor serial_block(Tape& tape, const Tensor& h, const BlockParams& p, const Tensor& temb_act) {
  Tensor x;
  {
    ScopeGuard g(tape, "sc");
    x = spatial_conv(tape, h, p, temb_act);
  }
  {
    ScopeGuard g(tape, "tc");
    x = temporal_conv(tape, x, p);
  }
  {
    ScopeGuard g(tape, "sa");
    x = spatial_attn(tape, x, p);
  }
  ScopeGuard g(tape, "ta");
  return add(tape, x, temporal_attn_delta(tape, x, p));
}

StreamPair parallel_block(Tape& tape, const Tensor& h, const Tensor& t, const BlockParams& p,
                          const Tensor& temb_act) {
  if (h.shape() != t.shape()) {
    throw ShapeError("parallel_block " + p.label + ": h " + shape_str(h.shape()) + " and t " +
                     shape_str(t.shape()) + " differ");
  }
  StreamPair out;
  {
    ScopeGuard g(tape, "sc");
    out.s = spatial_conv(tape, h, p, temb_act);
  }
  {
    ScopeGuard g(tape, "sa");
    out.h = spatial_attn(tape, out.s, p);
  }
  Tensor u;
  {
    ScopeGuard g(tape, "tc");
    u = temporal_conv(tape, t, p);
  }
  Tensor m;
  {
    ScopeGuard g(tape, "merge");
    m = add(tape, out.s, u);
  }
  ScopeGuard g(tape, "ta");
  out.t = add(tape, out.h, temporal_attn_delta(tape, m, p));
  return out;
}

std::vector<Route> routing_table() {
  return {{1, "M0", "D4"}, {2, "U1", "D3"}, {3, "U2", "D2"}, {4, "U3", "D1"}};
}

Tensor bridge_route(Tape& tape, Stream stream, const UNetModel& model, const BridgeState& state,
                    std::size_t k, std::vector<BridgeRecord>* log) {
  if (k < 1 || k > 4) throw std::out_of_range("bridge_route: up index " + std::to_string(k) + " not in 1..4");
  const Route route = routing_table()[k - 1];
  ScopeGuard g(tape, stream == Stream::h ? "bridge_h" : "bridge_t");
  Tensor first = k == 1 ? state.mid : resample(tape, state.up[k - 2], ResampleMode::nearest_up2);
  const Tensor& second = state.down[4 - k];
  Tensor cat = concat(tape, first, second);
  Tensor out;
  if (stream == Stream::h) {
    out = conv_spatial(tape, cat, model.bridge_h[k - 1]);
  } else {
    if (!model.bridge_t[k - 1].weight) throw std::logic_error("bridge_route: model has no t-stream adapters");
    out = linear(tape, cat, model.bridge_t[k - 1]);
  }
  if (log) log->push_back({stream, route});
  return out;
}

Tensor fuse(Tape& tape, const Tensor& h, const Tensor& t, const Conv2dParams& p) {
  if (h.shape() != t.shape()) {
    throw ShapeError("fuse: h " + shape_str(h.shape()) + " and t " + shape_str(t.shape()) + " differ");
  }
  return fuse_conv(tape, concat(tape, h, t), p);
}

Tensor unet_forward(const UNetModel& model, Tape& tape, const Tensor& x,
                    const std::vector<std::size_t>& timesteps, const std::vector<std::size_t>& cond,
                    const ForwardOptions& opts) {
  const UNetConfig& cfg = model.cfg;
  if (x.rank() != 5 || x.shape() != cfg.input_shape(x.dim(0))) {
    throw ShapeError("unet_forward: input " + shape_str(x.shape()) + " does not match config shape " +
                     shape_str(cfg.input_shape(x.rank() ? x.dim(0) : 1)));
  }
  const std::size_t B = x.dim(0);
  if (timesteps.size() != B || cond.size() != B) {
    throw ShapeError("unet_forward: need one timestep and one class id per batch item");
  }
  for (std::size_t t : timesteps) {
    if (t >= cfg.num_timesteps) {
      throw std::out_of_range("unet_forward: timestep " + std::to_string(t) + " outside [0, " +
                              std::to_string(cfg.num_timesteps) + ")");
    }
  }
  const bool parallel = cfg.mode == WiringMode::parallel;
  const bool two_streams = parallel && !opts.spatial_only;
  ForwardProbe* probe = opts.probe;
  auto note = [&](std::string label, const Tensor& v) {
    if (probe) probe->h_stream.emplace_back(std::move(label), v);
  };
  std::vector<BridgeRecord>* log = probe ? &probe->bridges : nullptr;

  Tensor h, temb_act;
  {
    ScopeGuard g(tape, "pre");
    h = conv_spatial(tape, x, model.in_conv);
    Tensor e = linear(tape, timestep_features(timesteps, cfg.time_dim()), model.time_fc1);
    e = linear(tape, silu(tape, e), model.time_fc2);
    e = add(tape, e, embed(tape, *model.cond_table, cond));
    temb_act = silu(tape, e);
  }
  note("pre", h);
  Tensor t = h;

  auto run_block = [&](const BlockParams& p, const std::string& label) {
    ScopeGuard g(tape, p.label);
    if (!parallel && !opts.spatial_only) {
      h = serial_block(tape, h, p, temb_act);
    } else if (two_streams) {
      StreamPair r = parallel_block(tape, h, t, p, temb_act);
      note(label + ".s", r.s);
      h = r.h;
      t = r.t;
    } else {
      Tensor s;
      {
        ScopeGuard gs(tape, "sc");
        s = spatial_conv(tape, h, p, temb_act);
      }
      note(label + ".s", s);
      ScopeGuard ga(tape, "sa");
      h = spatial_attn(tape, s, p);
    }
    note(label + ".h", h);
  };

  BridgeState hs, ts;
  for (std::size_t k = 0; k < 4; ++k) {
    run_block(model.down[k], "D" + std::to_string(k + 1));
    hs.down[k] = h;
    ts.down[k] = t;
    if (k < 3) {
      ScopeGuard g(tape, model.down[k].label);
      ScopeGuard gp(tape, "pool");
      h = resample(tape, h, ResampleMode::avg_pool2);
      if (two_streams) t = resample(tape, t, ResampleMode::avg_pool2);
    }
  }
  run_block(model.mid, "M0");
  hs.mid = h;
  ts.mid = t;
  for (std::size_t k = 1; k <= 4; ++k) {
    {
      ScopeGuard g(tape, model.up[k - 1].label);
      h = bridge_route(tape, Stream::h, model, hs, k, log);
      if (two_streams) t = bridge_route(tape, Stream::t, model, ts, k, log);
    }
    note("U" + std::to_string(k) + ".in", h);
    run_block(model.up[k - 1], "U" + std::to_string(k));
    hs.up[k - 1] = h;
    ts.up[k - 1] = t;
  }

  Tensor f = h;
  if (parallel) {
    ScopeGuard g(tape, "fusion");
    f = fuse(tape, h, two_streams ? t : h, *model.fusion);
  }
  ScopeGuard g(tape, "post");
  Tensor y = silu(tape, group_norm(tape, f, model.out_norm, cfg.norm_groups));
  return linear(tape, y, model.out_proj);
}

}  // namespace stp
