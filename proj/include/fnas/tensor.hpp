#pragma once

// Dense float64 tensors with a dynamically recorded reverse-mode graph.
//
// A Tensor is a shared handle: copies alias the same storage and graph node,
// which is what lets a parameter appear in many expressions and still collect
// one accumulated gradient. Node ids are handed out from a global monotonic
// counter, so creation order is a valid topological order of any graph.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fnas {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;
using BackwardFn = std::function<void(TensorImpl& self)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::uint64_t node_id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward_fn;

  std::vector<double>& ensure_grad();
  bool input_needs_grad(std::size_t i) const { return inputs[i]->requires_grad; }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access; only meaningful on leaves (parameter updates, fixtures).
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::size_t flat) const { return impl_->data.at(flat); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; allocated (zeros) on demand.
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  std::uint64_t node_id() const { return impl_->node_id; }
  const char* op_name() const { return impl_->op; }
  bool is_leaf() const { return !impl_->backward_fn; }

  /// Copy of the values detached from any graph.
  Tensor detach() const;
  /// Reverse pass from this scalar.
  void backward() const;

  TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared_impl() const noexcept { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>, const char*, BackwardFn);
};

/// Whether new ops record graph edges on this thread.
bool grad_enabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Wraps computed values into a new graph node. The backward function is
/// kept only if recording is enabled and some input requires a gradient.
Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      const char* op, BackwardFn backward_fn);

/// Runs the reverse pass: every reachable requires_grad leaf accumulates
/// d(loss)/d(leaf). Throws UsageError unless loss holds exactly one element.
void backward(const Tensor& loss);

/// One record of the graph below a root, as returned by trace_graph.
struct GraphNode {
  std::uint64_t id;
  std::string op;
  std::vector<std::uint64_t> input_ids;
};

/// Recorded nodes reachable from root, in increasing id (topological) order.
std::vector<GraphNode> trace_graph(const Tensor& root);

}  // namespace fnas
