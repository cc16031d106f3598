#include "fnas/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "fnas/errors.hpp"

namespace fnas {
namespace {

std::atomic<std::uint64_t> next_node_id{1};
thread_local bool grad_mode = true;

std::uint64_t allocate_id() { return next_node_id.fetch_add(1, std::memory_order_relaxed); }

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<double>& TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  impl_->node_id = allocate_id();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

std::span<double> Tensor::grad() { return impl_->ensure_grad(); }

std::span<const double> Tensor::grad() const { return impl_->ensure_grad(); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

void Tensor::backward() const { fnas::backward(*this); }

bool grad_enabled() { return grad_mode; }

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }

NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, const char* op,
                      BackwardFn backward_fn) {
#ifndef NDEBUG
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by ") + op);
  }
#endif
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  impl->node_id = allocate_id();
  const bool any_grad =
      grad_mode && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (any_grad) {
    impl->requires_grad = true;
    impl->inputs.reserve(inputs.size());
    for (auto& t : inputs) impl->inputs.push_back(t.shared_impl());
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(impl));
}

namespace {

std::vector<TensorImpl*> reachable_nodes(TensorImpl* root) {
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<TensorImpl*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    auto* node = stack.back();
    stack.pop_back();
    order.push_back(node);
    for (auto& in : node->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->node_id > b->node_id; });
  return order;
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) return;
  auto nodes = reachable_nodes(loss.impl());
  // Interior gradient buffers start empty, are allocated by the first
  // accumulation and released as soon as they have been propagated.
  for (auto* node : nodes) {
    if (node->backward_fn) std::vector<double>().swap(node->grad);
  }
  loss.impl()->ensure_grad()[0] += 1.0;
  for (auto* node : nodes) {
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(*node);
    std::vector<double>().swap(node->grad);
  }
}

std::vector<GraphNode> trace_graph(const Tensor& root) {
  std::vector<GraphNode> out;
  if (!root.defined()) return out;
  for (auto* node : reachable_nodes(root.impl())) {
    GraphNode g{node->node_id, node->op, {}};
    for (auto& in : node->inputs) g.input_ids.push_back(in->node_id);
    out.push_back(std::move(g));
  }
  std::reverse(out.begin(), out.end());
  return out;
}

}  // namespace fnas
