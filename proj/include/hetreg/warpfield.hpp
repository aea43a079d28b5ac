#pragma once

#include "hetreg/volume.hpp"

namespace hetreg {

/// I(x + phi(x)), trilinear, clamp-to-edge. Differentiable in both arguments.
Volume warp(const Volume &vol, const DeformationField &phi);
/// Same for a bare [C x D x H x W] tensor (feature maps).
Tensor warp(const Tensor &vol, const DeformationField &phi);

/// (a o b)(x) = b(x) + a(x + b(x)).
DeformationField compose(const DeformationField &a, const DeformationField &b);

/// Scaling and squaring: phi = v / 2^steps, then phi = phi o phi, `steps` times.
DeformationField integrate_velocity(const VelocityField &v, int steps = 7);

/// Percentage of voxels whose Jacobian determinant of x + phi(x) is <= 0.
/// Forward differences; voxels on the last slice of any axis are excluded.
double jacobian_folding(const DeformationField &phi);

} // namespace hetreg
