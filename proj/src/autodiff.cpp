#include "stp/autodiff.hpp"

#include <algorithm>
#include <unordered_set>

namespace stp {

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::conv_spatial: return "conv_spatial";
    case OpKind::conv_temporal: return "conv_temporal";
    case OpKind::attn_spatial: return "attn_spatial";
    case OpKind::attn_temporal: return "attn_temporal";
    case OpKind::linear: return "linear";
    case OpKind::group_norm: return "group_norm";
    case OpKind::silu: return "silu";
    case OpKind::add: return "add";
    case OpKind::concat: return "concat";
    case OpKind::resample: return "resample";
    case OpKind::embed: return "embed";
    case OpKind::reduce_mean_sq: return "reduce_mean_sq";
    case OpKind::fuse_conv: return "fuse_conv";
  }
  return "unknown";
}

std::string_view to_string(LayerTag tag) {
  switch (tag) {
    case LayerTag::spatial: return "spatial";
    case LayerTag::temporal: return "temporal";
    case LayerTag::plumbing: return "plumbing";
  }
  return "unknown";
}

LayerTag tag_of(OpKind kind) {
  switch (kind) {
    case OpKind::conv_spatial:
    case OpKind::attn_spatial:
      return LayerTag::spatial;
    case OpKind::conv_temporal:
    case OpKind::attn_temporal:
      return LayerTag::temporal;
    default:
      return LayerTag::plumbing;
  }
}

void Parameter::accumulate_grad(const Tensor& g) {
  if (frozen) throw std::logic_error("gradient written to frozen parameter " + name);
  if (g.shape() != value.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match parameter " +
                     name + " " + shape_str(value.shape()));
  }
  if (!grad) grad = Tensor(value.shape(), 0.0);
  auto dst = grad->mutable_data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

const TapeNode& Tape::node(NodeId id) const {
  if (id >= nodes_.size()) {
    throw std::out_of_range("tape node " + std::to_string(id) + " does not exist");
  }
  return nodes_[id];
}

bool Tape::needs_node(std::span<const Tensor* const> inputs,
                      std::span<const Parameter* const> params) const {
  if (!recording_) return false;
  for (const auto* t : inputs) {
    if (t->node()) return true;
  }
  for (const auto* p : params) {
    if (!p->frozen) return true;
  }
  return false;
}

NodeId Tape::append(TapeNode node) {
  node.id = nodes_.size();
  node.tag = tag_of(node.kind);
  node.input_ids.clear();
  for (const auto& slot : node.input_slots) {
    if (!slot) continue;
    // Inputs must precede the node; the tape stays topologically ordered.
    if (*slot >= node.id) {
      throw std::logic_error("tape node " + std::to_string(node.id) +
                             " references non-earlier node " + std::to_string(*slot));
    }
    node.input_ids.push_back(*slot);
  }
  node.param_names.clear();
  for (const auto* p : node.params) node.param_names.push_back(p->name);
  node.output_shape = node.output.shape();
  node.scope = scope();
  nodes_.push_back(std::move(node));
  return nodes_.back().id;
}

std::size_t Tape::append_trace(TraceEntry entry) {
  entry.id = trace_.size();
  entry.scope = scope();
  trace_.push_back(std::move(entry));
  return trace_.back().id;
}

std::string Tape::scope() const {
  std::string s;
  for (const auto& part : scopes_) {
    if (!s.empty()) s += '/';
    s += part;
  }
  return s;
}

NodeSet required_set(const Tape& tape, const std::set<std::string>& trainables, NodeId loss) {
  std::set<std::string> known = tape.known_params();
  for (const auto& n : tape.nodes()) known.insert(n.param_names.begin(), n.param_names.end());
  std::vector<std::string> unknown;
  for (const auto& name : trainables) {
    if (!known.count(name)) unknown.push_back(name);
  }
  if (!unknown.empty()) {
    std::string msg = "required_set: unknown parameter(s):";
    for (const auto& u : unknown) msg += " " + u;
    throw std::invalid_argument(msg);
  }
  NodeSet out;
  if (trainables.empty() || tape.empty()) return out;
  const auto& nodes = tape.nodes();
  if (loss >= nodes.size()) throw std::out_of_range("loss node out of range");

  // Forward sweep: nodes downstream of a trainable consumer.
  std::vector<char> fwd(nodes.size(), 0);
  for (const auto& n : nodes) {
    bool hit = std::any_of(n.param_names.begin(), n.param_names.end(),
                           [&](const std::string& p) { return trainables.count(p) > 0; });
    if (!hit) {
      hit = std::any_of(n.input_ids.begin(), n.input_ids.end(),
                        [&](NodeId i) { return fwd[i] != 0; });
    }
    fwd[n.id] = hit ? 1 : 0;
  }
  // Backward sweep: ancestors of the loss.
  std::vector<char> bwd(nodes.size(), 0);
  bwd[loss] = 1;
  for (std::size_t k = loss + 1; k-- > 0;) {
    if (!bwd[k]) continue;
    for (NodeId i : nodes[k].input_ids) bwd[i] = 1;
  }
  for (std::size_t k = 0; k <= loss; ++k) {
    if (fwd[k] && bwd[k]) out.insert(k);
  }
  return out;
}

NodeSet required_set(const Tape& tape, const std::set<std::string>& trainables) {
  if (tape.empty()) return required_set(tape, trainables, 0);
  return required_set(tape, trainables, tape.size() - 1);
}

std::set<std::string> trainable_params(const Tape& tape) {
  std::set<std::string> out;
  for (const auto& n : tape.nodes()) {
    for (const auto* p : n.params) {
      if (!p->frozen) out.insert(p->name);
    }
  }
  return out;
}

namespace {

class SweepContext final : public VjpContext {
 public:
  SweepContext(const Tape& tape, const TapeNode& node, const NodeSet& req,
               std::map<NodeId, Tensor>& node_grads, GradientMap& param_grads)
      : tape_(tape), node_(node), req_(req), node_grads_(node_grads), param_grads_(param_grads) {}

  std::span<double> input_grad(std::size_t slot) override {
    if (slot >= node_.input_slots.size() || !node_.input_slots[slot]) return {};
    NodeId src = *node_.input_slots[slot];
    if (!req_.count(src)) return {};
    auto it = node_grads_.find(src);
    if (it == node_grads_.end()) {
      it = node_grads_.emplace(src, Tensor(tape_.node(src).output_shape, 0.0)).first;
    }
    return it->second.mutable_data();
  }

  std::span<double> param_grad(std::size_t index) override {
    if (index >= node_.params.size()) return {};
    const Parameter* p = node_.params[index];
    if (p->frozen) return {};
    auto it = param_grads_.find(p->name);
    if (it == param_grads_.end()) it = param_grads_.emplace(p->name, Tensor(p->value.shape(), 0.0)).first;
    return it->second.mutable_data();
  }

 private:
  const Tape& tape_;
  const TapeNode& node_;
  const NodeSet& req_;
  std::map<NodeId, Tensor>& node_grads_;
  GradientMap& param_grads_;
};

}  // namespace

BackwardResult backward(const Tape& tape, NodeId loss) {
  if (loss >= tape.size()) {
    throw std::out_of_range("backward: loss node " + std::to_string(loss) + " not on tape");
  }
  const TapeNode& loss_node = tape.node(loss);
  if (shape_numel(loss_node.output_shape) != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss_node.output_shape));
  }
  BackwardResult result;
  NodeSet req = required_set(tape, trainable_params(tape), loss);
  if (req.empty()) return result;

  std::map<NodeId, Tensor> node_grads;
  node_grads.emplace(loss, Tensor(loss_node.output_shape, 1.0));
  for (auto it = req.rbegin(); it != req.rend(); ++it) {
    const TapeNode& node = tape.node(*it);
    auto g = node_grads.find(node.id);
    if (g == node_grads.end()) {
      throw std::logic_error("backward: required node " + std::to_string(node.id) +
                             " received no gradient");
    }
    Tensor grad_out = std::move(g->second);
    node_grads.erase(g);
    SweepContext ctx(tape, node, req, node_grads, result.grads);
    node.vjp(node, grad_out, ctx);
    for (std::size_t k = 0; k < node.params.size(); ++k) ctx.param_grad(k);
    result.visited.push_back(node.id);
  }
  return result;
}

BackwardResult backward(const Tape& tape, const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.node()) return {};
  return backward(tape, *loss.node());
}

std::size_t retained_bytes(const Tape& tape, const NodeSet& req) {
  std::unordered_set<const void*> seen;
  std::size_t total = 0;
  auto count = [&](const Tensor& t) {
    if (!t.defined()) return;
    if (seen.insert(t.storage_id()).second) total += t.bytes();
  };
  for (NodeId id : req) {
    const TapeNode& n = tape.node(id);
    for (const auto& s : n.saved) count(s);
    count(n.output);
  }
  return total;
}

std::size_t count_tagged(const Tape& tape, const NodeSet& set, LayerTag tag) {
  std::size_t c = 0;
  for (NodeId id : set) {
    if (tape.node(id).tag == tag) ++c;
  }
  return c;
}

}  // namespace stp
