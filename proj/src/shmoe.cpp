#include "hetreg/shmoe.hpp"

#include "init.hpp"
#include "hetreg/errors.hpp"
#include "hetreg/ops.hpp"

#include <algorithm>
#include <cmath>

namespace hetreg {

namespace {

using detail::random_normal;

// Per-voxel top-k of `probs` [N x V]; weights renormalized over the selection.
struct Selection
{
  Index               voxels;
  int                 k;
  std::vector<int>    idx;    // [V][k]
  std::vector<double> weight; // [V][k]
  std::vector<double> total;  // [V], sum of selected probabilities
};

Selection select(const std::vector<double> &probs, Index N, Index V, int k)
{
  Selection s{V, k, std::vector<int>(static_cast<std::size_t>(V * k)), std::vector<double>(static_cast<std::size_t>(V * k)),
              std::vector<double>(static_cast<std::size_t>(V))};
  std::vector<double> column(static_cast<std::size_t>(N));
  for (Index v = 0; v < V; ++v) {
    for (Index n = 0; n < N; ++n) { column[static_cast<std::size_t>(n)] = probs[static_cast<std::size_t>(n * V + v)]; }
    auto   top = topk(column, k);
    double t   = 0.0;
    for (double p : top.values) { t += p; }
    s.total[static_cast<std::size_t>(v)] = t;
    for (int j = 0; j < k; ++j) {
      s.idx[static_cast<std::size_t>(v * k + j)]    = top.indices[static_cast<std::size_t>(j)];
      s.weight[static_cast<std::size_t>(v * k + j)] = top.values[static_cast<std::size_t>(j)] / t;
    }
  }
  return s;
}

} // namespace

ShmoeParams ShmoeParams::create(Rng &rng, Index channels, std::vector<int> kernel_sizes, int topk, int router_kernel,
                                bool zero_experts)
{
  if (kernel_sizes.empty()) { throw ArgumentError("shmoe: need at least one expert"); }
  if (topk < 1 || topk > static_cast<int>(kernel_sizes.size())) { throw ArgumentError("shmoe: need 1 <= k <= N"); }
  ShmoeParams p;
  p.kernel_sizes = std::move(kernel_sizes);
  p.topk         = topk;
  for (int s : p.kernel_sizes) {
    if (s < 1 || s % 2 == 0) { throw ArgumentError("shmoe: expert kernel sizes must be odd"); }
    double stddev = zero_experts ? 0.0 : 1.0 / std::sqrt(static_cast<double>(channels * s * s * s));
    p.expert_kernels.push_back(random_normal(rng, {1, channels, s, s, s}, stddev));
    p.expert_biases.push_back(Tensor({1}, zero_experts ? 0.0 : 0.1 * rng.normal(), true));
  }
  Index N         = p.experts();
  Index r         = router_kernel;
  p.router_kernel = random_normal(rng, {N, channels, r, r, r}, 1.0 / std::sqrt(static_cast<double>(channels * r * r * r)));
  p.router_bias   = Tensor({N}, 0.0, true);
  return p;
}

std::vector<std::pair<std::string, Tensor>> ShmoeParams::named(const std::string &prefix) const
{
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < expert_kernels.size(); ++i) {
    out.emplace_back(prefix + ".expert" + std::to_string(i) + ".kernel", expert_kernels[i]);
    out.emplace_back(prefix + ".expert" + std::to_string(i) + ".bias", expert_biases[i]);
  }
  out.emplace_back(prefix + ".router.kernel", router_kernel);
  out.emplace_back(prefix + ".router.bias", router_bias);
  return out;
}

ShmoeOutput shmoe_forward(const Tensor &features, const ShmoeParams &params)
{
  if (features.ndim() != 4) { throw DimensionError("shmoe_forward: features must be [C x D x H x W]"); }
  if (params.router_kernel.dim(0) != params.experts()) {
    throw DimensionError("shmoe_forward: router output channels differ from expert count");
  }
  Index D = features.dim(1), H = features.dim(2), W = features.dim(3), V = D * H * W;
  Index N = params.experts();
  int   k = params.topk;

  auto probs = softmax(add_channel_bias(conv3d(features, params.router_kernel), params.router_bias), 0);
  std::vector<Tensor> outs;
  for (Index i = 0; i < N; ++i) {
    auto ii = static_cast<std::size_t>(i);
    outs.push_back(add_channel_bias(conv3d(features, params.expert_kernels[ii]), params.expert_biases[ii]));
  }
  auto stacked = concat(outs); // [N x D x H x W]

  auto sel = std::make_shared<Selection>(
    select(std::vector<double>(probs.data().begin(), probs.data().end()), N, V, k));

  std::vector<double> out(static_cast<std::size_t>(V), 0.0), gate(static_cast<std::size_t>(N * V), 0.0);
  auto                ed = stacked.data();
  for (Index v = 0; v < V; ++v) {
    for (int j = 0; j < k; ++j) {
      auto   s = static_cast<std::size_t>(v * k + j);
      Index  i = sel->idx[s];
      double w = sel->weight[s];
      out[static_cast<std::size_t>(v)] += w * ed[static_cast<std::size_t>(i * V + v)];
      gate[static_cast<std::size_t>(i * V + v)] = w;
    }
  }

  auto delta = make_result({1, D, H, W}, std::move(out), {probs, stacked}, [sel, N, V](detail::Node &self) {
    int         k  = sel->k;
    const auto &ev = self.parents[1]->value;
    if (self.parents[1]->requires_grad) {
      auto &ge = self.parents[1]->grad_buffer();
      for (Index v = 0; v < V; ++v) {
        for (int j = 0; j < k; ++j) {
          auto s = static_cast<std::size_t>(v * k + j);
          ge[static_cast<std::size_t>(sel->idx[s] * V + v)] += sel->weight[s] * self.grad[static_cast<std::size_t>(v)];
        }
      }
    }
    if (!self.parents[0]->requires_grad) { return; }
    // w_j = p_j / P: dp_j = (dw_j - sum_l w_l dw_l) / P on the selection.
    auto &gp = self.parents[0]->grad_buffer();
    for (Index v = 0; v < V; ++v) {
      double g = self.grad[static_cast<std::size_t>(v)], wdw = 0.0;
      for (int j = 0; j < k; ++j) {
        auto s = static_cast<std::size_t>(v * k + j);
        wdw += sel->weight[s] * g * ev[static_cast<std::size_t>(sel->idx[s] * V + v)];
      }
      for (int j = 0; j < k; ++j) {
        auto   s  = static_cast<std::size_t>(v * k + j);
        auto   at = static_cast<std::size_t>(sel->idx[s] * V + v);
        double dw = g * ev[at];
        gp[at] += (dw - wdw) / sel->total[static_cast<std::size_t>(v)];
      }
    }
  });

  return {std::move(delta), std::move(probs), RoutingTensor{Tensor({N, D, H, W}, std::move(gate)), k}};
}

ExpertLabels build_rc_labels(const ErrorSignal &eps, const RoutingTensor &routing, double q)
{
  if (!(q > 0.0 && q < 1.0)) { throw ArgumentError("build_rc_labels: quantile must lie in (0, 1)"); }
  Index N = routing.experts(), V = routing.voxels();
  if (eps.values.size() != V) {
    throw DimensionError("build_rc_labels: error signal " + shape_string(eps.values.shape()) +
                         " not aligned with routing tensor " + shape_string(routing.values.shape()));
  }
  int k = routing.topk;
  std::vector<double> mag(static_cast<std::size_t>(V));
  for (Index v = 0; v < V; ++v) { mag[static_cast<std::size_t>(v)] = std::abs(eps.values[v]); }
  auto sorted = mag;
  std::sort(sorted.begin(), sorted.end());
  double pos = q * static_cast<double>(V - 1);
  auto   lo  = static_cast<std::size_t>(std::floor(pos));
  auto   hi  = std::min(lo + 1, sorted.size() - 1);
  double tau = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);

  double              bump = N > k ? std::min(1.0, static_cast<double>(k) / static_cast<double>(N - k)) : 0.0;
  std::vector<double> y(static_cast<std::size_t>(N * V), 0.0);
  auto                gv = routing.values.data();
  for (Index v = 0; v < V; ++v) {
    bool incorrect = mag[static_cast<std::size_t>(v)] > tau;
    for (Index n = 0; n < N; ++n) {
      auto i        = static_cast<std::size_t>(n * V + v);
      bool selected = gv[i] != 0.0;
      y[i]          = incorrect ? (selected ? 0.0 : bump) : (selected ? 1.0 : 0.0);
    }
  }
  return {Tensor(routing.values.shape(), std::move(y))};
}

Tensor rc_loss(const Tensor &probs, const ExpertLabels &labels, double delta)
{
  if (probs.shape() != labels.values.shape()) {
    throw DimensionError("rc_loss: probabilities " + shape_string(probs.shape()) + " vs labels " +
                         shape_string(labels.values.shape()));
  }
  auto   p = probs.data();
  auto   y = labels.values.data();
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double t = std::clamp(p[i], delta, 1.0 - delta);
    s -= y[i] * std::log(t) + (1.0 - y[i]) * std::log(1.0 - t);
  }
  auto n = static_cast<double>(p.size());
  return make_result({}, {s / n}, {probs}, [n, delta, y = labels.values](detail::Node &self) {
    auto &pv = self.parents[0]->value;
    auto &g  = self.parents[0]->grad_buffer();
    auto  yd = y.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      double t = pv[i];
      if (t < delta || t > 1.0 - delta) { continue; }
      g[i] += self.grad[0] / n * (-(yd[i] / t) + (1.0 - yd[i]) / (1.0 - t));
    }
  });
}

std::vector<double> expert_load(const RoutingTensor &routing)
{
  Index               N = routing.experts(), V = routing.voxels();
  std::vector<double> load(static_cast<std::size_t>(N), 0.0);
  auto                gv = routing.values.data();
  for (Index n = 0; n < N; ++n) {
    Index count = 0;
    for (Index v = 0; v < V; ++v) { count += gv[static_cast<std::size_t>(n * V + v)] != 0.0; }
    load[static_cast<std::size_t>(n)] = 100.0 * static_cast<double>(count) / static_cast<double>(V);
  }
  return load;
}

SegVolume expert_id_map(const RoutingTensor &routing)
{
  auto      &t = routing.values;
  SegVolume  map(t.dim(1), t.dim(2), t.dim(3));
  Index      N = routing.experts(), V = routing.voxels();
  auto       gv = t.data();
  for (Index v = 0; v < V; ++v) {
    Index best = 0;
    for (Index n = 1; n < N; ++n) {
      if (gv[static_cast<std::size_t>(n * V + v)] > gv[static_cast<std::size_t>(best * V + v)]) { best = n; }
    }
    map.labels[static_cast<std::size_t>(v)] = static_cast<std::uint16_t>(best);
  }
  return map;
}

} // namespace hetreg
