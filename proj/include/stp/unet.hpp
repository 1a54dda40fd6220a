#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stp/ops.hpp"

namespace stp {

enum class WiringMode { serial, parallel };

std::string_view to_string(WiringMode mode);
WiringMode parse_wiring_mode(std::string_view text);

struct UNetConfig {
  WiringMode mode = WiringMode::parallel;
  std::size_t in_channels = 4;
  std::size_t base_width = 16;
  std::vector<std::size_t> channel_multipliers{1, 2, 2, 4};
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_timesteps = 100;
  std::size_t cond_vocab = 4;
  std::uint64_t seed = 0;
  /// Spatial extent of the fusion conv, 3 or 1.
  std::size_t fusion_kernel = 3;
  std::size_t norm_groups = 4;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  std::size_t block_width(std::size_t down_index) const;
  std::size_t time_dim() const { return 4 * base_width; }
  Shape input_shape(std::size_t batch) const {
    return {batch, frames, in_channels, height, width};
  }
};

/// Owns every parameter of a model. Addresses are stable for its lifetime.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor value, LayerTag tag);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::vector<Parameter*> pointers();

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

struct ParamCensus {
  std::map<LayerTag, std::size_t> elements;
  std::map<LayerTag, std::size_t> tensors;
  std::size_t total_elements = 0;
  std::size_t frozen_elements = 0;
  std::size_t trainable_elements = 0;
};

ParamCensus census(const ParameterStore& store);

/// Residual conv stack with timestep injection after the first conv.
struct ScParams {
  NormParams norm1;
  Conv2dParams conv1;
  NormParams norm2;
  Conv2dParams conv2;
  /// 1x1 projection used when the block changes width.
  std::optional<Conv2dParams> shortcut;
};

/// Attention sub-layer plus feed-forward, each residual.
struct SaParams {
  NormParams norm;
  Conv2dParams proj_in;
  AttentionParams attn;
  Conv2dParams proj_out;
  NormParams ff_norm;
  Conv2dParams ff_in;
  Conv2dParams ff_out;
};

struct TcParams {
  NormParams norm;
  TemporalConvParams conv;
  /// Parallel wiring only: maps the t stream to the block width when it changes.
  std::optional<LinearParams> shortcut;
};

struct TaParams {
  NormParams norm;
  AttentionParams attn;
};

struct BlockParams {
  std::string label;
  std::size_t in_width = 0;
  std::size_t width = 0;
  std::size_t groups = 1;
  ScParams sc;
  SaParams sa;
  TcParams tc;
  TaParams ta;
  LinearParams time_proj;
};

class UNetModel {
 public:
  explicit UNetModel(UNetConfig cfg) : cfg(std::move(cfg)) {}
  UNetModel(const UNetModel&) = delete;
  UNetModel& operator=(const UNetModel&) = delete;

  UNetConfig cfg;
  ParameterStore params;

  Conv2dParams in_conv;
  LinearParams time_fc1;
  LinearParams time_fc2;
  const Parameter* cond_table = nullptr;

  std::array<BlockParams, 4> down;
  BlockParams mid;
  std::array<BlockParams, 4> up;
  std::array<Conv2dParams, 4> bridge_h;
  /// Parallel wiring only.
  std::array<LinearParams, 4> bridge_t;
  std::optional<Conv2dParams> fusion;

  NormParams out_norm;
  LinearParams out_proj;
};

/// Deterministic construction from cfg.seed. Spatial weights are seeded
/// random stand-ins for pretrained weights; temporal output projections are
/// zero so the temporal branch starts as an exact no-op.
std::unique_ptr<UNetModel> build_unet(const UNetConfig& cfg);

// Block primitives. `temb_act` is silu(timestep embedding), [B, 4*base_width].

Tensor spatial_conv(Tape& tape, const Tensor& h, const BlockParams& p, const Tensor& temb_act);
Tensor spatial_attn(Tape& tape, const Tensor& h, const BlockParams& p);
/// x + conv_temporal(silu(norm(x))), after the width shortcut if present.
Tensor temporal_conv(Tape& tape, const Tensor& x, const BlockParams& p);
/// attn_temporal(norm(x)) without the residual.
Tensor temporal_attn_delta(Tape& tape, const Tensor& x, const BlockParams& p);

/// TA(SA(TC(SC(h)))) with residual TA.
Tensor serial_block(Tape& tape, const Tensor& h, const BlockParams& p, const Tensor& temb_act);

struct StreamPair {
  Tensor h;
  Tensor t;
  /// SC output, kept for inspection.
  Tensor s;
};

/// s = SC(h); h' = SA(s); t' = h' + TA_delta(s + TC(t)).
StreamPair parallel_block(Tape& tape, const Tensor& h, const Tensor& t, const BlockParams& p,
                          const Tensor& temb_act);

enum class Stream { h, t };

struct Route {
  std::size_t up = 0;
  std::string first;
  std::string second;
  bool operator==(const Route&) const = default;
};

/// U_1 <- (M_0, D_4); U_k <- (U_{k-1}, D_{5-k}) for k = 2..4.
std::vector<Route> routing_table();

struct BridgeState {
  std::array<Tensor, 4> down;
  Tensor mid;
  std::array<Tensor, 4> up;
};

struct BridgeRecord {
  Stream stream = Stream::h;
  Route route;
};

/// Input of up block k (1-based) on one stream: the routed pair, with the
/// first operand upsampled when k > 1, concatenated and mapped back to the
/// block width by that stream's adapter.
Tensor bridge_route(Tape& tape, Stream stream, const UNetModel& model, const BridgeState& state,
                    std::size_t k, std::vector<BridgeRecord>* log = nullptr);

/// Fusion conv over concat(h, t).
Tensor fuse(Tape& tape, const Tensor& h, const Tensor& t, const Conv2dParams& p);

struct ForwardProbe {
  /// h-stream activations in execution order, labelled by position.
  std::vector<std::pair<std::string, Tensor>> h_stream;
  std::vector<BridgeRecord> bridges;
};

struct ForwardOptions {
  /// Skip the temporal branch; parallel wiring fuses (h, h).
  bool spatial_only = false;
  ForwardProbe* probe = nullptr;
};

/// Predicted noise for x [B, F, in_channels, H, W]; timesteps in [0, T) and
/// cond ids in [0, cond_vocab), one per batch item.
Tensor unet_forward(const UNetModel& model, Tape& tape, const Tensor& x,
                    const std::vector<std::size_t>& timesteps, const std::vector<std::size_t>& cond,
                    const ForwardOptions& opts = {});

}  // namespace stp
