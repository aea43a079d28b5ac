#pragma once

#include "hetreg/tensor.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace hetreg {

/// Physical voxel size (mm) along D, H, W.
using Spacing = std::array<double, 3>;

/// Intensity data [C x D x H x W].
struct Volume
{
  Tensor  data;
  Spacing spacing{1.0, 1.0, 1.0};

  Index channels() const { return data.dim(0); }
  Index depth() const { return data.dim(1); }
  Index height() const { return data.dim(2); }
  Index width() const { return data.dim(3); }
};

/// Integer label map, row-major D x H x W.
struct SegVolume
{
  Index                      depth = 0, height = 0, width = 0;
  std::vector<std::uint16_t> labels;
  Spacing                    spacing{1.0, 1.0, 1.0};

  SegVolume() = default;
  SegVolume(Index d, Index h, Index w, std::uint16_t fill = 0)
    : depth(d)
    , height(h)
    , width(w)
    , labels(static_cast<std::size_t>(d * h * w), fill)
  {
  }

  Index          voxels() const { return depth * height * width; }
  std::uint16_t &at(Index z, Index y, Index x) { return labels[static_cast<std::size_t>((z * height + y) * width + x)]; }
  std::uint16_t  at(Index z, Index y, Index x) const
  {
    return labels[static_cast<std::size_t>((z * height + y) * width + x)];
  }
  /// Distinct nonzero labels, ascending.
  std::vector<std::uint16_t> label_set() const;
};

/// Per-voxel displacement [3 x D x H x W] in voxels; channel a moves along
/// axis a (0 = D, 1 = H, 2 = W).
struct DeformationField
{
  Tensor disp;

  static DeformationField zeros(Index d, Index h, Index w) { return {Tensor({3, d, h, w}, 0.0)}; }
  Index depth() const { return disp.dim(1); }
  Index height() const { return disp.dim(2); }
  Index width() const { return disp.dim(3); }
};

/// Stationary velocity [3 x D x H x W] in voxels.
struct VelocityField
{
  Tensor vel;
};

} // namespace hetreg
