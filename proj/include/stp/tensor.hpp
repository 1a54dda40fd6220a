#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stp {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a non-finite value shows up at an op boundary. Carries the
/// tape node id when the producing op was recorded.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::optional<NodeId> node)
      : std::runtime_error(what), node_(node) {}
  std::optional<NodeId> node() const { return node_; }

 private:
  std::optional<NodeId> node_;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major f64 array. Storage is shared between copies and is
/// copied on first mutation, so tensors retained by the tape never change
/// underneath it. Video tensors use the layout [batch, frames, channels,
/// height, width].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  std::size_t bytes() const { return numel() * sizeof(double); }
  bool defined() const { return static_cast<bool>(data_); }

  std::span<const double> data() const;
  /// Unshares storage before handing out a writable view.
  std::span<double> mutable_data();

  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  std::optional<NodeId> node() const { return node_; }
  void set_node(std::optional<NodeId> id) { node_ = id; }
  /// Index of the producing op in the tape's execution trace, if traced.
  std::optional<std::size_t> trace_id() const { return trace_; }
  void set_trace_id(std::optional<std::size_t> id) { trace_ = id; }

  /// Identity of the underlying buffer; equal for tensors sharing storage.
  const void* storage_id() const { return data_.get(); }

  /// Same storage, no tape linkage.
  Tensor detached() const;
  /// Deep copy, no tape linkage.
  Tensor clone() const;
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  bool bitwise_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::optional<NodeId> node_;
  std::optional<std::size_t> trace_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace stp
