#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hetreg {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_size(const Shape &shape);
std::string shape_string(const Shape &shape);

namespace detail {

// One recorded primitive application. Values are immutable once the node is
// part of a graph; gradients are accumulated lazily during backward.
struct Node
{
  Shape                              shape;
  std::vector<double>                value;
  std::vector<double>                grad;
  bool                               requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node &)>        backward;
  std::uint64_t                      seq = 0;

  std::vector<double> &grad_buffer();
};

} // namespace detail

/*
 * Dense row-major tensor of doubles with reverse-mode differentiation.
 *
 * Tensor is a handle: copies share the same node, so a parameter held by a
 * model and the same parameter listed by named_parameters() are one object.
 * Every differentiable op creates a new node that records its parents and a
 * backward rule; backward() walks the reachable graph in reverse creation
 * order.
 */
class Tensor
{
public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor from(std::initializer_list<double> values, bool requires_grad = false);

  const Shape &shape() const;
  Index        dim(std::size_t axis) const;
  std::size_t  ndim() const;
  Index        size() const;
  bool         defined() const { return node_ != nullptr; }

  std::span<double>       data();
  std::span<const double> data() const;
  double                  item() const;
  double                  operator[](Index i) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool                    has_grad() const;
  std::span<const double> grad() const;
  void                    zero_grad();

  /// Accumulates d(this)/d(leaf) into every reachable leaf. `this` must be scalar.
  void backward() const;

  /// Copy of the values with no graph attached.
  Tensor detach() const;
  /// Same values, different shape (differentiable; sizes must agree).
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<detail::Node> &node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node);

private:
  std::shared_ptr<detail::Node> node_;
};

/// Builds a graph node from `parents`. If none of them requires grad, the
/// result is a constant and `backward` is dropped.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                   std::function<void(detail::Node &)> backward);

/// Gradient of scalar `root` w.r.t. each tensor in `wrt`, restricted to the
/// part of the graph downstream of `wrt`. No gradient buffer anywhere in the
/// graph is modified.
std::vector<std::vector<double>> gradients_wrt(const Tensor &root, std::span<const Tensor> wrt);

} // namespace hetreg
