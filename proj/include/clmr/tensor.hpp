#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace clmr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

/// Operation that produced a tensor. `inputs` are the differentiable operands;
/// `backward` reads the output gradient and accumulates into them.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulated
  bool requires_grad = false;
  bool graph_released = false;
  std::shared_ptr<Node> node;

  /// Gradient buffer, allocated to zeros on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// n-dimensional float64 array with an optional gradient, shared by handle.
///
/// Copies of a Tensor alias the same storage. Operations on tensors that
/// require gradients record a node so backward() can propagate to them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<double> values();
  std::span<const double> values() const;
  double item() const;

  /// Gradient view; allocates a zero buffer when none exists yet.
  std::span<double> grad();
  /// Gradient view; empty when no gradient has been accumulated.
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  /// Independent copy of the values, detached from any graph.
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

  /// Builds an operation result. When gradient recording is enabled and any
  /// input requires gradients, the result records `backward` over `inputs`.
  static Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                            std::function<void(const detail::TensorImpl& out)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Reverse-mode sweep from a scalar loss. Accumulates d(loss)/d(leaf) into
/// every reachable leaf that requires gradients, then releases the graph.
void backward(const Tensor& loss);

}  // namespace clmr
