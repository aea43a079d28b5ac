#pragma once

#include "hetreg/tensor.hpp"

#include <span>
#include <vector>

namespace hetreg {

// Elementwise (identical shapes).
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &a, double s);
Tensor add_scalar(const Tensor &a, double s);
Tensor square(const Tensor &a);
Tensor gelu(const Tensor &a);

inline Tensor operator+(const Tensor &a, const Tensor &b) { return add(a, b); }
inline Tensor operator-(const Tensor &a, const Tensor &b) { return sub(a, b); }
inline Tensor operator*(const Tensor &a, const Tensor &b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor &a) { return scale(a, s); }
inline Tensor operator*(const Tensor &a, double s) { return scale(a, s); }

// Reductions to a scalar.
Tensor sum(const Tensor &a);
Tensor mean(const Tensor &a);
/// Mean of squared differences.
Tensor mse(const Tensor &a, const Tensor &b);
/// Sum of a list of scalars, each multiplied by its weight.
Tensor weighted_sum(std::span<const Tensor> terms, std::span<const double> weights);

// Matrices (2-D).
Tensor matmul(const Tensor &a, const Tensor &b);
Tensor transpose(const Tensor &a);
/// x[T x C] + b[C] broadcast over rows.
Tensor add_row_bias(const Tensor &x, const Tensor &b);
/// Per-row standardization with learned scale/offset, x[T x C].
Tensor layer_norm_rows(const Tensor &x, const Tensor &gamma, const Tensor &beta, double eps = 1e-5);

/// Softmax along `axis`, max-subtracted. Throws NumericError on NaN input.
Tensor softmax(const Tensor &x, std::size_t axis);

struct TopK
{
  std::vector<int>    indices; // ascending
  std::vector<double> values;  // aligned with indices
};

/// The k largest entries; among equal values the lowest index wins.
TopK topk(std::span<const double> x, int k);

// Volumes are channel-first: [C x D x H x W].

/// Cross-correlation, stride 1, zero padding (s-1)/2. kernel: [O x C x s x s x s].
Tensor conv3d(const Tensor &input, const Tensor &kernel);
/// x[C x ...] + b[C].
Tensor add_channel_bias(const Tensor &x, const Tensor &b);
/// Concatenation along axis 0.
Tensor concat(std::span<const Tensor> parts);
/// Rows [begin, end) of axis 0.
Tensor slice(const Tensor &x, Index begin, Index end);

/// out.flat[i] = x.flat[source[i]]; backward scatters. Used for every
/// permutation and layout change.
Tensor gather_flat(const Tensor &x, Shape out_shape, std::vector<Index> source);
/// Rows of a [R x C] matrix picked by `rows`.
Tensor gather_rows(const Tensor &x, std::span<const Index> rows);
/// [C x D x H x W] -> [(D H W) x C].
Tensor channels_to_rows(const Tensor &x);
/// [(D H W) x C] -> [C x D x H x W].
Tensor rows_to_channels(const Tensor &x, Index d, Index h, Index w);
/// Non-overlapping p^3 blocks: [C x D x H x W] -> [(D/p H/p W/p) x (C p^3)],
/// feature order (c, dz, dy, dx).
Tensor extract_patches(const Tensor &x, Index p);

/// Trilinear x2 upsampling, half-voxel aligned, edge clamped.
Tensor upsample2x(const Tensor &x);
/// 2^3 average pooling.
Tensor avg_pool2(const Tensor &x);

/// out(c, x) = trilinear sample of src(c, .) at x + disp(:, x), coordinates
/// clamped to the volume. disp is [3 x D x H x W], channel a displaces axis a
/// (0 = D, 1 = H, 2 = W), in voxels. Differentiable in src and disp.
Tensor resample(const Tensor &src, const Tensor &disp);

} // namespace hetreg
