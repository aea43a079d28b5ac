#pragma once

#include "hetreg/rng.hpp"
#include "hetreg/tensor.hpp"
#include "hetreg/volume.hpp"

#include <string>
#include <utility>
#include <vector>

namespace hetreg {

/*
 * Spatial-heterogeneous mixture of experts predicting one displacement
 * direction. Expert i is a C -> 1 convolution with kernel size
 * kernel_sizes[i]; the router is a C -> N convolution followed by a per-voxel
 * softmax.
 */
struct ShmoeParams
{
  std::vector<int>    kernel_sizes;
  std::vector<Tensor> expert_kernels; // [1 x C x s x s x s]
  std::vector<Tensor> expert_biases;  // [1]
  Tensor              router_kernel;  // [N x C x r x r x r]
  Tensor              router_bias;    // [N]
  int                 topk = 1;

  int experts() const { return static_cast<int>(kernel_sizes.size()); }

  /// Experts start at zero (the layer initially predicts no displacement)
  /// unless `zero_experts` is false.
  static ShmoeParams create(Rng &rng, Index channels, std::vector<int> kernel_sizes = {1, 3, 5}, int topk = 1,
                            int router_kernel = 3, bool zero_experts = true);

  std::vector<std::pair<std::string, Tensor>> named(const std::string &prefix) const;
};

/// Gate values [N x D x H x W] with exactly `topk` nonzeros per voxel, each
/// voxel's nonzeros summing to one.
struct RoutingTensor
{
  Tensor values;
  int    topk = 1;

  int   experts() const { return static_cast<int>(values.dim(0)); }
  Index voxels() const { return values.size() / values.dim(0); }
};

/// Routing-classification targets [N x D x H x W].
struct ExpertLabels
{
  Tensor values;
};

/// Per-voxel similarity-loss gradient for one direction, [1 x D x H x W].
struct ErrorSignal
{
  Tensor values;
};

struct ShmoeOutput
{
  Tensor        delta;   // [1 x D x H x W], differentiable
  Tensor        probs;   // dense router softmax [N x D x H x W], differentiable
  RoutingTensor routing; // constant
};

/// Per voxel: router softmax, top-k, renormalize, weighted sum of the
/// selected experts' outputs (k = 1 gathers the arg-max expert).
ShmoeOutput shmoe_forward(const Tensor &features, const ShmoeParams &params);

/// Threshold tau = q-quantile (linear interpolation) of |eps| over the
/// volume; voxels with |eps| > tau are incorrect. Correct voxels label the
/// selected experts 1 and the rest 0; incorrect voxels label the selected
/// experts 0 and each unselected expert min(1, k / (N - k)).
ExpertLabels build_rc_labels(const ErrorSignal &eps, const RoutingTensor &routing, double q);

/// Mean over experts and voxels of the binary cross-entropy between the
/// dense router probabilities (clamped to [delta, 1 - delta]) and labels.
Tensor rc_loss(const Tensor &probs, const ExpertLabels &labels, double delta = 1e-7);

/// Percentage of voxels at which each expert is selected; sums to 100 k.
std::vector<double> expert_load(const RoutingTensor &routing);

/// Arg-max expert id per voxel.
SegVolume expert_id_map(const RoutingTensor &routing);

} // namespace hetreg
