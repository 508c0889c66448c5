// SPDX-License-Identifier: Apache-2.0
//
// Dense fp64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Every op below records a
// backward rule on its output when at least one input requires a gradient
// and grad mode is enabled; the graph lives exactly as long as the handles
// that reach it.

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hgrn {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

/// Raised for incompatible shapes; the message names every shape involved.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for inputs outside an op's domain (log of non-positive, divide by ~0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised for invalid configuration (bad head count, chunk size, variant...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  ~Node();

  bool is_leaf() const { return !backward; }
  std::span<double> ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  std::vector<double> to_vector() const { return node_->data; }
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  /// Gradient buffer, zero-filled on first access.
  std::span<const double> grad() const { return node_->ensure_grad(); }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// Same values, no graph history, no gradient requirement.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
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

// ---- linear algebra --------------------------------------------------------

/// Matrix product over the last two axes. Leading (batch) axes must agree,
/// or one operand may be a plain rank-2 matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// out[m][j] = u[m] * v[j] for rank-1 u, v.
Tensor outer(const Tensor& u, const Tensor& v);

// ---- elementwise -----------------------------------------------------------

enum class Binary { add, sub, mul, div };

/// Pointwise binary op. Shapes must match, or the smaller operand must equal
/// a trailing block of the larger one once its leading 1-axes are dropped
/// (rank-0 tensors broadcast everywhere).
Tensor elementwise(const Tensor& a, const Tensor& b, Binary kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

enum class Activation { sigmoid, silu, softmax_dim0, exp, log };

Tensor activation(const Tensor& x, Activation kind);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softmax_dim0(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

// ---- reductions and scans --------------------------------------------------

Tensor cumsum_dim0(const Tensor& x);
/// Sum of every element, rank-0 result.
Tensor sum(const Tensor& x);
/// Sum along one axis; the axis is removed from the result.
Tensor sum_dim(const Tensor& x, std::int64_t axis);

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::int64_t>& order);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor index_select(const Tensor& x, std::int64_t axis, const std::vector<std::int64_t>& indices);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);

// ---- differentiation -------------------------------------------------------

/// Wraps precomputed values as the output of a custom op. When recording,
/// `rule` runs during backward with the output node; it reads node.grad and
/// accumulates into node.inputs[k]->ensure_grad() for inputs that require it.
Tensor custom_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                 std::function<void(Node&)> rule);

/// Populates grad on every requires_grad leaf reachable from a scalar loss.
/// Leaf gradients accumulate across calls; intermediate gradients do not.
void backward(const Tensor& loss);

// Arithmetic sugar. Scalars become rank-0 constants.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double b);
Tensor operator-(const Tensor& a, double b);
Tensor operator*(const Tensor& a, double b);
Tensor operator+(double a, const Tensor& b);
Tensor operator-(double a, const Tensor& b);
Tensor operator*(double a, const Tensor& b);

}  // namespace hgrn
