#include "hetreg/warpfield.hpp"

#include "hetreg/errors.hpp"
#include "hetreg/ops.hpp"

#include <Eigen/Core>
#include <Eigen/LU>

#include <cmath>

namespace hetreg {

Volume warp(const Volume &vol, const DeformationField &phi) { return {resample(vol.data, phi.disp), vol.spacing}; }

Tensor warp(const Tensor &vol, const DeformationField &phi) { return resample(vol, phi.disp); }

DeformationField compose(const DeformationField &a, const DeformationField &b)
{
  return {add(b.disp, resample(a.disp, b.disp))};
}

DeformationField integrate_velocity(const VelocityField &v, int steps)
{
  if (steps < 1) { throw ArgumentError("integrate_velocity: steps must be >= 1"); }
  DeformationField phi{scale(v.vel, std::ldexp(1.0, -steps))};
  for (int s = 0; s < steps; ++s) { phi = compose(phi, phi); }
  return phi;
}

double jacobian_folding(const DeformationField &phi)
{
  Index D = phi.depth(), H = phi.height(), W = phi.width();
  if (D < 2 || H < 2 || W < 2) { throw ArgumentError("jacobian_folding: every extent must be >= 2"); }
  auto  d   = phi.disp.data();
  Index vol = D * H * W;
  auto  at  = [&](Index c, Index z, Index y, Index x) { return d[static_cast<std::size_t>(c * vol + (z * H + y) * W + x)]; };
  Index folded = 0, total = 0;
  for (Index z = 0; z + 1 < D; ++z) {
    for (Index y = 0; y + 1 < H; ++y) {
      for (Index x = 0; x + 1 < W; ++x) {
        Eigen::Matrix3d J;
        for (Index c = 0; c < 3; ++c) {
          double base = at(c, z, y, x);
          J(c, 0)     = at(c, z + 1, y, x) - base;
          J(c, 1)     = at(c, z, y + 1, x) - base;
          J(c, 2)     = at(c, z, y, x + 1) - base;
        }
        J += Eigen::Matrix3d::Identity();
        folded += J.determinant() <= 0.0 ? 1 : 0;
        ++total;
      }
    }
  }
  return 100.0 * static_cast<double>(folded) / static_cast<double>(total);
}

} // namespace hetreg
