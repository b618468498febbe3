#include "clmr/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "clmr/error.hpp"

namespace clmr {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->values.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value buffer of length " + std::to_string(values.size()) + " does not fit shape " +
                     shape_string(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->values.size() : 0; }

std::span<double> Tensor::values() {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->values;
}

std::span<const double> Tensor::values() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->values;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on a tensor of shape " + shape_string(shape()));
  return impl_->values[0];
}

std::span<double> Tensor::grad() {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->grad_buffer();
}

std::span<const double> Tensor::grad() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->grad;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw GraphError("use of an undefined tensor");
  if (!is_leaf()) throw GraphError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return impl_ && impl_->node == nullptr && !impl_->graph_released; }

Tensor Tensor::clone() const { return Tensor(shape(), impl_->values, false); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                           std::function<void(const detail::TensorImpl& out)> backward) {
  Tensor out(std::move(shape), std::move(values), false);
  if (!g_grad_enabled) return out;
  auto node = std::make_shared<detail::Node>();
  for (auto& in : inputs) {
    if (in.requires_grad()) node->inputs.push_back(in.impl_);
  }
  if (node->inputs.empty()) return out;
  node->backward = std::move(backward);
  out.impl_->requires_grad = true;
  out.impl_->node = std::move(node);
  return out;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on an undefined tensor");
  if (loss.numel() != 1) throw GraphError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  auto* root = loss.impl().get();
  if (root->graph_released) throw GraphError("backward called twice on the same graph");
  if (!root->requires_grad) throw GraphError("backward on a tensor detached from any parameter");

  // Iterative post-order DFS gives a topological order with each node once.
  // Holding shared pointers keeps every node alive while parents release
  // their graph links below.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<std::shared_ptr<detail::TensorImpl>, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      const auto& child = impl->node->inputs[next++];
      if (child->node && visited.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(std::move(impl));
    stack.pop_back();
  }

  // Intermediate gradients are dropped as soon as they have been propagated,
  // so freed buffers are reused by later nodes while still in cache.
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& impl = **it;
    if (!impl.grad.empty()) impl.node->backward(impl);
    impl.node.reset();
    impl.graph_released = true;
    if (&impl != root) std::vector<double>().swap(impl.grad);
  }
}

}  // namespace clmr
