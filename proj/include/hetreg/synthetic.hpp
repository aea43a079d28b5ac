#pragma once

#include "hetreg/rng.hpp"
#include "hetreg/volume.hpp"

namespace hetreg {

/// Separable Gaussian blur of every channel of a [C x D x H x W] tensor,
/// truncated at 3 sigma with clamped borders. Not differentiable.
Tensor gaussian_smooth(const Tensor &x, double sigma);

/// Gaussian-smoothed white noise [3 x d x h x w] rescaled so that the largest
/// absolute component equals `max_abs` (all zeros when max_abs == 0).
Tensor smooth_random_field(Rng &rng, Index d, Index h, Index w, double sigma, double max_abs);

struct SyntheticPair
{
  Volume           fixed, moving;
  SegVolume        fixed_seg, moving_seg;
  DeformationField ground_truth;
};

/// Nested-ellipsoid phantom on a cubic grid of `size` voxels with 3-5 labels,
/// deformed by a smooth random field of peak magnitude `max_disp` voxels.
/// `smoothness` is the field's Gaussian sigma in voxels.
SyntheticPair generate_pair(Rng &rng, Index size, const Spacing &spacing, double max_disp, double smoothness);

} // namespace hetreg
