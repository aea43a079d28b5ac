#include "hetreg/tensor.hpp"

#include "hetreg/errors.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace hetreg {

namespace {

std::atomic<std::uint64_t> g_sequence{0};

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values, bool requires_grad)
{
  if (shape_size(shape) != static_cast<Index>(values.size())) {
    throw DimensionError("tensor: shape " + shape_string(shape) + " holds " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto n           = std::make_shared<detail::Node>();
  n->shape         = std::move(shape);
  n->value         = std::move(values);
  n->requires_grad = requires_grad;
  n->seq           = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return n;
}

// Reachable nodes that require grad, sorted newest first.
std::vector<detail::Node *> reverse_topological(detail::Node *root)
{
  std::vector<detail::Node *>        order;
  std::unordered_set<detail::Node *> seen;
  std::vector<detail::Node *>        stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    auto *n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto &p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) { stack.push_back(p.get()); }
    }
  }
  std::sort(order.begin(), order.end(), [](auto *a, auto *b) { return a->seq > b->seq; });
  return order;
}

} // namespace

Index shape_size(const Shape &shape)
{
  Index n = 1;
  for (auto e : shape) { n *= e; }
  return n;
}

std::string shape_string(const Shape &shape)
{
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) { os << (i ? "x" : "") << shape[i]; }
  os << ']';
  return os.str();
}

std::vector<double> &detail::Node::grad_buffer()
{
  if (grad.empty()) { grad.assign(value.size(), 0.0); }
  return grad;
}

Tensor::Tensor() = default;

Tensor::Tensor(std::shared_ptr<detail::Node> node)
  : node_(std::move(node))
{
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
{
  auto n = shape_size(shape);
  node_  = new_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), fill), requires_grad);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
  : node_(new_node(std::move(shape), std::move(values), requires_grad))
{
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor(Shape{}, std::vector<double>{v}, requires_grad); }

Tensor Tensor::from(std::initializer_list<double> values, bool requires_grad)
{
  return Tensor(Shape{static_cast<Index>(values.size())}, std::vector<double>(values), requires_grad);
}

const Shape &Tensor::shape() const { return node_->shape; }
Index        Tensor::dim(std::size_t axis) const { return node_->shape.at(axis); }
std::size_t  Tensor::ndim() const { return node_->shape.size(); }
Index        Tensor::size() const { return static_cast<Index>(node_->value.size()); }

std::span<double>       Tensor::data() { return node_->value; }
std::span<const double> Tensor::data() const { return node_->value; }
double                  Tensor::operator[](Index i) const { return node_->value[static_cast<std::size_t>(i)]; }

double Tensor::item() const
{
  if (size() != 1) { throw DimensionError("item(): tensor " + shape_string(shape()) + " is not a scalar"); }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

bool                    Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void                    Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const
{
  if (size() != 1) { throw ArgumentError("backward(): root " + shape_string(shape()) + " is not a scalar"); }
  if (!node_->requires_grad) { return; }
  node_->grad_buffer()[0] += 1.0;
  for (auto *n : reverse_topological(node_.get())) {
    if (n->backward && !n->grad.empty()) { n->backward(*n); }
  }
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

Tensor Tensor::reshape(Shape shape) const
{
  if (shape_size(shape) != size()) {
    throw DimensionError("reshape: " + shape_string(this->shape()) + " -> " + shape_string(shape));
  }
  return make_result(std::move(shape), node_->value, {*this}, [](detail::Node &self) {
    auto &g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) { g[i] += self.grad[i]; }
  });
}

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                   std::function<void(detail::Node &)> backward)
{
  bool track = std::any_of(parents.begin(), parents.end(), [](const Tensor &p) { return p.requires_grad(); });
  auto n     = new_node(std::move(shape), std::move(values), track);
  if (track) {
    n->parents.reserve(parents.size());
    for (auto &p : parents) { n->parents.push_back(p.node()); }
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

std::vector<std::vector<double>> gradients_wrt(const Tensor &root, std::span<const Tensor> wrt)
{
  if (root.size() != 1) { throw ArgumentError("gradients_wrt: root is not a scalar"); }
  std::vector<std::vector<double>> out;
  out.reserve(wrt.size());
  if (!root.requires_grad()) {
    for (auto &t : wrt) { out.emplace_back(static_cast<std::size_t>(t.size()), 0.0); }
    return out;
  }

  auto order = reverse_topological(root.node().get());

  // Forward reachability from `wrt`, processed oldest first.
  std::unordered_set<detail::Node *> downstream;
  for (auto &t : wrt) { downstream.insert(t.node().get()); }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    for (auto &p : (*it)->parents) {
      if (downstream.count(p.get())) {
        downstream.insert(*it);
        break;
      }
    }
  }

  // Stash every buffer the restricted pass may touch, run it, then restore.
  std::unordered_map<detail::Node *, std::vector<double>> stash;
  auto                                                     stash_node = [&](detail::Node *n) {
    if (!stash.count(n)) { stash.emplace(n, std::exchange(n->grad, {})); }
  };
  for (auto *n : order) {
    if (!downstream.count(n)) { continue; }
    stash_node(n);
    for (auto &p : n->parents) { stash_node(p.get()); }
  }
  stash_node(root.node().get());

  root.node()->grad_buffer()[0] = 1.0;
  for (auto *n : order) {
    if (downstream.count(n) && n->backward && !n->grad.empty()) {
      // Nodes that are themselves a `wrt` target keep their gradient but do
      // not propagate further upstream.
      bool is_target = std::any_of(wrt.begin(), wrt.end(), [n](const Tensor &t) { return t.node().get() == n; });
      bool has_downstream_parent =
        std::any_of(n->parents.begin(), n->parents.end(), [&](auto &p) { return downstream.count(p.get()) > 0; });
      if (!is_target && has_downstream_parent) { n->backward(*n); }
    }
  }
  for (auto &t : wrt) {
    auto &g = t.node()->grad;
    out.push_back(g.empty() ? std::vector<double>(static_cast<std::size_t>(t.size()), 0.0) : g);
  }
  for (auto &[n, g] : stash) { n->grad = std::move(g); }
  return out;
}

} // namespace hetreg
