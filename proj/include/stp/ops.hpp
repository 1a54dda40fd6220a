#pragma once

#include <vector>

#include "stp/autodiff.hpp"

namespace stp {

// Parameter groups. Pointers refer into a ParameterStore that outlives any
// tape recorded against it.

/// weight [C_out, C_in, k, k], bias [C_out]; k is 3 or 1.
struct Conv2dParams {
  const Parameter* weight = nullptr;
  const Parameter* bias = nullptr;
};

/// Depthwise temporal kernel: weight [C, 3], bias [C].
struct TemporalConvParams {
  const Parameter* weight = nullptr;
  const Parameter* bias = nullptr;
};

/// Single-head attention projections, each weight [C, C] and bias [C].
struct AttentionParams {
  const Parameter* q_weight = nullptr;
  const Parameter* q_bias = nullptr;
  const Parameter* k_weight = nullptr;
  const Parameter* k_bias = nullptr;
  const Parameter* v_weight = nullptr;
  const Parameter* v_bias = nullptr;
  const Parameter* out_weight = nullptr;
  const Parameter* out_bias = nullptr;
};

/// weight [out, in], bias [out].
struct LinearParams {
  const Parameter* weight = nullptr;
  const Parameter* bias = nullptr;
};

/// gamma [C], beta [C].
struct NormParams {
  const Parameter* gamma = nullptr;
  const Parameter* beta = nullptr;
};

enum class ResampleMode { avg_pool2, nearest_up2 };

// All video ops take [B, F, C, H, W] tensors.

/// Per-frame 2-D convolution, stride 1, zero padding k/2.
Tensor conv_spatial(Tape& tape, const Tensor& x, const Conv2dParams& p);
/// Same kernel as conv_spatial, recorded as the plumbing fusion op.
Tensor fuse_conv(Tape& tape, const Tensor& x, const Conv2dParams& p);
/// Depthwise kernel-3 convolution along frames, zero padding 1.
Tensor conv_temporal(Tape& tape, const Tensor& x, const TemporalConvParams& p);
/// Self-attention over the H*W positions of each frame (no residual).
Tensor attn_spatial(Tape& tape, const Tensor& x, const AttentionParams& p);
/// Self-attention over the F frames at each pixel (no residual).
Tensor attn_temporal(Tape& tape, const Tensor& x, const AttentionParams& p);

/// Rank-2 [N, in] -> [N, out], or a 1x1 channel projection on video tensors.
Tensor linear(Tape& tape, const Tensor& x, const LinearParams& p);
/// Normalizes each (batch, frame, group) slice over its channels and pixels.
Tensor group_norm(Tape& tape, const Tensor& x, const NormParams& p, std::size_t groups);
Tensor silu(Tape& tape, const Tensor& x);
/// Elementwise sum; `b` may also be [B, C], broadcast over frames and pixels.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
/// Concatenation along the channel axis.
Tensor concat(Tape& tape, const Tensor& a, const Tensor& b);
Tensor resample(Tape& tape, const Tensor& x, ResampleMode mode);
/// Row lookup: table [V, D], ids -> [N, D].
Tensor embed(Tape& tape, const Parameter& table, const std::vector<std::size_t>& ids);
/// scale * sum((x - target)^2) as a [1] tensor. `target` is treated as a constant.
Tensor reduce_mean_sq(Tape& tape, const Tensor& x, const Tensor& target, double scale);

/// Sinusoidal timestep features [N, dim]; a constant, never recorded.
Tensor timestep_features(const std::vector<std::size_t>& timesteps, std::size_t dim);

}  // namespace stp
