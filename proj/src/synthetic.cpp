#include "hetreg/synthetic.hpp"

#include "hetreg/errors.hpp"
#include "hetreg/losses.hpp"
#include "hetreg/warpfield.hpp"

#include <algorithm>
#include <cmath>

namespace hetreg {

namespace {

std::vector<double> gaussian_taps(double sigma)
{
  auto                radius = static_cast<Index>(std::ceil(3.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double              total = 0.0;
  for (Index i = -radius; i <= radius; ++i) {
    double t                               = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    taps[static_cast<std::size_t>(i + radius)] = t;
    total += t;
  }
  for (auto &t : taps) { t /= total; }
  return taps;
}

} // namespace

Tensor gaussian_smooth(const Tensor &x, double sigma)
{
  if (x.ndim() != 4) { throw DimensionError("gaussian_smooth: expected [C x D x H x W], got " + shape_string(x.shape())); }
  if (sigma <= 0.0) { return x.detach(); }
  auto                 taps   = gaussian_taps(sigma);
  auto                 radius = static_cast<Index>(taps.size() / 2);
  std::array<Index, 3> ext{x.dim(1), x.dim(2), x.dim(3)};
  std::array<Index, 3> stride{ext[1] * ext[2], ext[2], 1};
  Index                vol = ext[0] * ext[1] * ext[2];
  std::vector<double>  cur(x.data().begin(), x.data().end()), next(cur.size());

  for (int a = 0; a < 3; ++a) {
    for (Index c = 0; c < x.dim(0); ++c) {
      for (Index z = 0; z < ext[0]; ++z) {
        for (Index y = 0; y < ext[1]; ++y) {
          for (Index w = 0; w < ext[2]; ++w) {
            Index  pos[3] = {z, y, w};
            Index  base   = c * vol + z * stride[0] + y * stride[1] + w - pos[a] * stride[a];
            double acc    = 0.0;
            for (Index t = -radius; t <= radius; ++t) {
              Index p = std::clamp<Index>(pos[a] + t, 0, ext[a] - 1);
              acc += taps[static_cast<std::size_t>(t + radius)] * cur[static_cast<std::size_t>(base + p * stride[a])];
            }
            next[static_cast<std::size_t>(base + pos[a] * stride[a])] = acc;
          }
        }
      }
    }
    std::swap(cur, next);
  }
  return Tensor(x.shape(), std::move(cur));
}

Tensor smooth_random_field(Rng &rng, Index d, Index h, Index w, double sigma, double max_abs)
{
  if (!(sigma > 0.0)) { throw ArgumentError("smooth_random_field: sigma must be positive"); }
  // Normal control values every `sigma` voxels, trilinearly interpolated,
  // then blurred by sigma/2 to remove the interpolation creases.
  Index                grid[3] = {d, h, w};
  Index                ctrl[3];
  for (int a = 0; a < 3; ++a) { ctrl[a] = static_cast<Index>(std::ceil(static_cast<double>(grid[a] - 1) / sigma)) + 2; }
  Index                cvol = ctrl[0] * ctrl[1] * ctrl[2];
  std::vector<double>  knots(static_cast<std::size_t>(3 * cvol));
  for (auto &v : knots) { v = rng.normal(); }
  std::vector<double> field(static_cast<std::size_t>(3 * d * h * w));
  for (Index c = 0, i = 0; c < 3; ++c) {
    for (Index z = 0; z < d; ++z) {
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x, ++i) {
          double p[3] = {static_cast<double>(z) / sigma, static_cast<double>(y) / sigma, static_cast<double>(x) / sigma};
          Index  lo[3];
          double f[3];
          for (int a = 0; a < 3; ++a) {
            lo[a] = std::min<Index>(static_cast<Index>(std::floor(p[a])), ctrl[a] - 2);
            f[a]  = p[a] - static_cast<double>(lo[a]);
          }
          double acc = 0.0;
          for (int corner = 0; corner < 8; ++corner) {
            double wgt = 1.0;
            Index  at  = c * cvol;
            Index  mul = 1;
            for (int a = 2; a >= 0; --a) {
              bool up = (corner >> a) & 1;
              wgt *= up ? f[a] : 1.0 - f[a];
              at += (lo[a] + up) * mul;
              mul *= ctrl[a];
            }
            acc += wgt * knots[static_cast<std::size_t>(at)];
          }
          field[static_cast<std::size_t>(i)] = acc;
        }
      }
    }
  }
  auto   smooth = gaussian_smooth(Tensor({3, d, h, w}, std::move(field)), 0.5 * sigma);
  double peak   = 0.0;
  for (double v : smooth.data()) { peak = std::max(peak, std::abs(v)); }
  std::vector<double> out(smooth.data().begin(), smooth.data().end());
  for (auto &v : out) { v = peak > 0.0 ? v * max_abs / peak : 0.0; }
  return Tensor({3, d, h, w}, std::move(out));
}

SyntheticPair generate_pair(Rng &rng, Index size, const Spacing &spacing, double max_disp, double smoothness)
{
  if (size < 4) { throw ArgumentError("generate_pair: size must be at least 4"); }
  if (max_disp < 0.0 || max_disp >= static_cast<double>(size) / 4.0) {
    throw ArgumentError("generate_pair: need 0 <= max_disp < size/4");
  }
  for (double s : spacing) {
    if (!(s > 0.0)) { throw ArgumentError("generate_pair: spacing must be positive"); }
  }

  // Ellipsoids live in millimetres on a grid of unit-spaced extent `size`,
  // so coarser spacing along an axis squeezes the phantom in voxels there.
  int                                labels = 3 + static_cast<int>(rng.below(3));
  double                             half   = 0.5 * static_cast<double>(size);
  std::vector<std::array<double, 6>> shapes; // centre zyx, semi-axes zyx
  for (int l = 0; l < labels; ++l) {
    double r = half * (0.82 - 0.6 * static_cast<double>(l) / static_cast<double>(labels));
    std::array<double, 6> e{};
    for (int a = 0; a < 3; ++a) {
      e[static_cast<std::size_t>(a)]     = half + (l == 0 ? 0.0 : rng.uniform(-1.0, 1.0) * 0.06 * half);
      e[static_cast<std::size_t>(a + 3)] = r * rng.uniform(0.8, 1.0);
    }
    shapes.push_back(e);
  }

  SyntheticPair pair;
  pair.fixed_seg         = SegVolume(size, size, size);
  pair.fixed_seg.spacing = spacing;
  std::vector<double> image(static_cast<std::size_t>(size * size * size), 0.0);
  for (Index z = 0, v = 0; z < size; ++z) {
    for (Index y = 0; y < size; ++y) {
      for (Index x = 0; x < size; ++x, ++v) {
        double p[3] = {(static_cast<double>(z) + 0.5) * spacing[0], (static_cast<double>(y) + 0.5) * spacing[1],
                       (static_cast<double>(x) + 0.5) * spacing[2]};
        for (int l = labels - 1; l >= 0; --l) {
          auto  &e = shapes[static_cast<std::size_t>(l)];
          double q = 0.0;
          for (int a = 0; a < 3; ++a) {
            double t = (p[a] - e[static_cast<std::size_t>(a)]) / e[static_cast<std::size_t>(a + 3)];
            q += t * t;
          }
          if (q <= 1.0) {
            pair.fixed_seg.labels[static_cast<std::size_t>(v)] = static_cast<std::uint16_t>(l + 1);
            image[static_cast<std::size_t>(v)] = 0.25 + 0.75 * static_cast<double>(l + 1) / static_cast<double>(labels);
            break;
          }
        }
      }
    }
  }

  pair.ground_truth = {smooth_random_field(rng, size, size, size, smoothness, max_disp)};

  auto blurred = gaussian_smooth(Tensor({1, size, size, size}, std::move(image)), 0.6);
  std::vector<double> noisy(blurred.data().begin(), blurred.data().end());
  for (auto &v : noisy) { v += 0.01 * rng.normal(); }
  pair.fixed = {Tensor({1, size, size, size}, std::move(noisy)), spacing};

  if (max_disp == 0.0) {
    pair.moving     = {pair.fixed.data.detach(), spacing};
    pair.moving_seg = pair.fixed_seg;
  } else {
    pair.moving     = warp(pair.fixed, pair.ground_truth);
    pair.moving_seg = warp_labels(pair.fixed_seg, pair.ground_truth);
  }
  pair.moving.spacing = spacing;
  return pair;
}

} // namespace hetreg
