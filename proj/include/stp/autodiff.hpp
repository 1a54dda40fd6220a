#pragma once

#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stp/tensor.hpp"

namespace stp {

enum class OpKind {
  conv_spatial,
  conv_temporal,
  attn_spatial,
  attn_temporal,
  linear,
  group_norm,
  silu,
  add,
  concat,
  resample,
  embed,
  reduce_mean_sq,
  fuse_conv,
};

enum class LayerTag { spatial, temporal, plumbing };

std::string_view to_string(OpKind kind);
std::string_view to_string(LayerTag tag);
LayerTag tag_of(OpKind kind);

/// Named weight tensor. Frozen parameters never own gradient storage.
struct Parameter {
  std::string name;
  Tensor value;
  LayerTag tag = LayerTag::plumbing;
  bool frozen = false;
  std::optional<Tensor> grad;

  void accumulate_grad(const Tensor& g);
  void clear_grad() { grad.reset(); }
};

using GradientMap = std::map<std::string, Tensor>;
using NodeSet = std::set<NodeId>;

/// Handed to a node's VJP during backward. Spans are empty when the
/// corresponding input or parameter needs no gradient.
class VjpContext {
 public:
  virtual ~VjpContext() = default;
  virtual std::span<double> input_grad(std::size_t slot) = 0;
  virtual std::span<double> param_grad(std::size_t index) = 0;
};

struct TapeNode;

/// Backward rule. Reads only the node's saved tensors, parameters and shape
/// metadata captured at record time.
using VjpFn = std::function<void(const TapeNode& node, const Tensor& grad_out, VjpContext& ctx)>;

struct TapeNode {
  NodeId id = 0;
  OpKind kind = OpKind::add;
  LayerTag tag = LayerTag::plumbing;
  /// One entry per positional input; empty for constant inputs.
  std::vector<std::optional<NodeId>> input_slots;
  std::vector<NodeId> input_ids;
  std::vector<const Parameter*> params;
  std::vector<std::string> param_names;
  std::vector<Tensor> saved;
  Tensor output;
  Shape output_shape;
  std::string scope;
  VjpFn vjp;
};

/// Execution record kept for every op run while recording is on, whether or
/// not it produced a tape node. Used for op counting and dependency depth.
struct TraceEntry {
  std::size_t id = 0;
  OpKind kind = OpKind::add;
  std::string scope;
  std::vector<std::size_t> inputs;
  bool recorded = false;
};

/// Define-by-run computation record. One tape per training step.
class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  const std::vector<TapeNode>& nodes() const { return nodes_; }
  const TapeNode& node(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  const std::vector<TraceEntry>& trace() const { return trace_; }

  /// True if an op over these inputs and parameters must be recorded.
  bool needs_node(std::span<const Tensor* const> inputs,
                  std::span<const Parameter* const> params) const;

  NodeId append(TapeNode node);
  std::size_t append_trace(TraceEntry entry);

  void note_param(const Parameter& p) { known_params_.insert(p.name); }
  bool knows_param(const std::string& name) const { return known_params_.count(name) > 0; }
  const std::set<std::string>& known_params() const { return known_params_; }

  void push_scope(std::string name) { scopes_.push_back(std::move(name)); }
  void pop_scope() { scopes_.pop_back(); }
  std::string scope() const;

 private:
  bool recording_ = true;
  std::vector<TapeNode> nodes_;
  std::vector<TraceEntry> trace_;
  std::set<std::string> known_params_;
  std::vector<std::string> scopes_;
};

class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradGuard() { tape_.set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

class ScopeGuard {
 public:
  ScopeGuard(Tape& tape, std::string name) : tape_(tape) { tape_.push_scope(std::move(name)); }
  ~ScopeGuard() { tape_.pop_scope(); }
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  Tape& tape_;
};

/// Nodes on some directed path from a node consuming one of `trainables` to
/// `loss`. Unknown parameter names are rejected.
NodeSet required_set(const Tape& tape, const std::set<std::string>& trainables, NodeId loss);
/// Same, with the last recorded node taken as the loss.
NodeSet required_set(const Tape& tape, const std::set<std::string>& trainables);

/// Names of all non-frozen parameters consumed by recorded nodes.
std::set<std::string> trainable_params(const Tape& tape);

struct BackwardResult {
  GradientMap grads;
  /// Node ids whose VJP ran, in execution order.
  std::vector<NodeId> visited;
};

/// Reverse-mode sweep over exactly required_set(tape, trainable_params, loss).
BackwardResult backward(const Tape& tape, NodeId loss);
/// Same; a loss with no tape node (nothing trainable upstream) yields an
/// empty result.
BackwardResult backward(const Tape& tape, const Tensor& loss);

/// Bytes held for backward by `req`: saved tensors plus outputs, with shared
/// storage counted once.
std::size_t retained_bytes(const Tape& tape, const NodeSet& req);

std::size_t count_tagged(const Tape& tape, const NodeSet& set, LayerTag tag);

}  // namespace stp
