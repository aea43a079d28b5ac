#include "hetreg/ops.hpp"

#include "hetreg/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace hetreg {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using MapConst  = Eigen::Map<const RowMatrix>;

void require_same_shape(const Tensor &a, const Tensor &b, const char *what)
{
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_ndim(const Tensor &a, std::size_t n, const char *what)
{
  if (a.ndim() != n) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(n) + "-d tensor, got " +
                         shape_string(a.shape()));
  }
}

std::vector<double> &parent_grad(detail::Node &self, std::size_t i) { return self.parents[i]->grad_buffer(); }
bool parent_tracked(const detail::Node &self, std::size_t i) { return self.parents[i]->requires_grad; }

struct Axis
{
  Index  i0, i1;
  double t;
  double dt; // d t / d coordinate, zero when clamped
};

// Linear interpolation stencil along one axis of extent n at coordinate p.
inline Axis stencil(double p, Index n)
{
  if (n == 1) { return {0, 0, 0.0, 0.0}; }
  double hi = static_cast<double>(n - 1);
  double dt = 1.0;
  if (p <= 0.0) {
    p  = 0.0;
    dt = 0.0;
  } else if (p >= hi) {
    p  = hi;
    dt = 0.0;
  }
  auto i0 = std::min(static_cast<Index>(std::floor(p)), n - 2);
  return {i0, i0 + 1, p - static_cast<double>(i0), dt};
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor &a, const Tensor &b)
{
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto                bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) { out[i] += bd[i]; }
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node &self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!parent_tracked(self, p)) { continue; }
      auto &g = parent_grad(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) { g[i] += self.grad[i]; }
    }
  });
}

Tensor sub(const Tensor &a, const Tensor &b)
{
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto                bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) { out[i] -= bd[i]; }
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node &self) {
    if (parent_tracked(self, 0)) {
      auto &g = parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) { g[i] += self.grad[i]; }
    }
    if (parent_tracked(self, 1)) {
      auto &g = parent_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) { g[i] -= self.grad[i]; }
    }
  });
}

Tensor mul(const Tensor &a, const Tensor &b)
{
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto                bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) { out[i] *= bd[i]; }
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node &self) {
    auto &av = self.parents[0]->value;
    auto &bv = self.parents[1]->value;
    if (parent_tracked(self, 0)) {
      auto &g = parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) { g[i] += self.grad[i] * bv[i]; }
    }
    if (parent_tracked(self, 1)) {
      auto &g = parent_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) { g[i] += self.grad[i] * av[i]; }
    }
  });
}

Tensor scale(const Tensor &a, double s)
{
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto &v : out) { v *= s; }
  return make_result(a.shape(), std::move(out), {a}, [s](detail::Node &self) {
    auto &g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) { g[i] += s * self.grad[i]; }
  });
}

Tensor add_scalar(const Tensor &a, double s)
{
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto &v : out) { v += s; }
  return make_result(a.shape(), std::move(out), {a}, [](detail::Node &self) {
    auto &g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) { g[i] += self.grad[i]; }
  });
}

Tensor square(const Tensor &a)
{
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto &v : out) { v *= v; }
  return make_result(a.shape(), std::move(out), {a},
                     [](detail::Node &self) {
                       auto &x = self.parents[0]->value;
                       auto &g = parent_grad(self, 0);
                       for (std::size_t i = 0; i < g.size(); ++i) { g[i] += 2.0 * x[i] * self.grad[i]; }
                     });
}

Tensor gelu(const Tensor &a)
{
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto &v : out) { v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); }
  return make_result(a.shape(), std::move(out), {a}, [](detail::Node &self) {
    constexpr double inv_sqrt2   = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    auto            &x           = self.parents[0]->value;
    auto            &g           = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
      g[i] += self.grad[i] * (cdf + x[i] * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor &a)
{
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return make_result({}, {s}, {a}, [](detail::Node &self) {
    auto &g = parent_grad(self, 0);
    for (auto &v : g) { v += self.grad[0]; }
  });
}

Tensor mean(const Tensor &a)
{
  if (a.size() == 0) { throw ArgumentError("mean: empty tensor"); }
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mse(const Tensor &a, const Tensor &b)
{
  require_same_shape(a, b, "mse");
  auto   ad = a.data();
  auto   bd = b.data();
  double s  = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    double d = ad[i] - bd[i];
    s += d * d;
  }
  auto n = static_cast<double>(ad.size());
  return make_result({}, {s / n}, {a, b}, [n](detail::Node &self) {
    auto  &av = self.parents[0]->value;
    auto  &bv = self.parents[1]->value;
    double c  = 2.0 * self.grad[0] / n;
    if (parent_tracked(self, 0)) {
      auto &g = parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) { g[i] += c * (av[i] - bv[i]); }
    }
    if (parent_tracked(self, 1)) {
      auto &g = parent_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) { g[i] -= c * (av[i] - bv[i]); }
    }
  });
}

Tensor weighted_sum(std::span<const Tensor> terms, std::span<const double> weights)
{
  if (terms.size() != weights.size()) { throw ArgumentError("weighted_sum: terms/weights length mismatch"); }
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) { s += weights[i] * terms[i].item(); }
  std::vector<double> w(weights.begin(), weights.end());
  return make_result({}, {s}, std::vector<Tensor>(terms.begin(), terms.end()), [w](detail::Node &self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (parent_tracked(self, p)) { parent_grad(self, p)[0] += w[p] * self.grad[0]; }
    }
  });
}

// ---------------------------------------------------------------------------
// Matrices

Tensor matmul(const Tensor &a, const Tensor &b)
{
  require_ndim(a, 2, "matmul");
  require_ndim(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Index               m = a.dim(0), p = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MapMatrix(out.data(), m, n).noalias() = MapConst(a.data().data(), m, p) * MapConst(b.data().data(), p, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, p, n](detail::Node &self) {
    MapConst g(self.grad.data(), m, n);
    if (parent_tracked(self, 0)) {
      MapMatrix(parent_grad(self, 0).data(), m, p).noalias() +=
        g * MapConst(self.parents[1]->value.data(), p, n).transpose();
    }
    if (parent_tracked(self, 1)) {
      MapMatrix(parent_grad(self, 1).data(), p, n).noalias() +=
        MapConst(self.parents[0]->value.data(), m, p).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor &a)
{
  require_ndim(a, 2, "transpose");
  Index              r = a.dim(0), c = a.dim(1);
  std::vector<Index> src(static_cast<std::size_t>(r * c));
  for (Index i = 0; i < c; ++i) {
    for (Index j = 0; j < r; ++j) { src[static_cast<std::size_t>(i * r + j)] = j * c + i; }
  }
  return gather_flat(a, {c, r}, std::move(src));
}

Tensor add_row_bias(const Tensor &x, const Tensor &b)
{
  require_ndim(x, 2, "add_row_bias");
  if (b.size() != x.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_string(b.shape()) + " vs rows " + shape_string(x.shape()));
  }
  Index               rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  auto                bd = b.data();
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) { out[static_cast<std::size_t>(r * cols + c)] += bd[static_cast<std::size_t>(c)]; }
  }
  return make_result(x.shape(), std::move(out), {x, b}, [rows, cols](detail::Node &self) {
    if (parent_tracked(self, 0)) {
      auto &g = parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) { g[i] += self.grad[i]; }
    }
    if (parent_tracked(self, 1)) {
      auto &g = parent_grad(self, 1);
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) { g[static_cast<std::size_t>(c)] += self.grad[static_cast<std::size_t>(r * cols + c)]; }
      }
    }
  });
}

Tensor layer_norm_rows(const Tensor &x, const Tensor &gamma, const Tensor &beta, double eps)
{
  require_ndim(x, 2, "layer_norm_rows");
  Index rows = x.dim(0), cols = x.dim(1);
  if (gamma.size() != cols || beta.size() != cols) {
    throw DimensionError("layer_norm_rows: scale/offset must have " + std::to_string(cols) + " entries");
  }
  std::vector<double> out(static_cast<std::size_t>(rows * cols));
  std::vector<double> xhat(out.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  auto                xd = x.data();
  auto                gd = gamma.data();
  auto                bd = beta.data();
  for (Index r = 0; r < rows; ++r) {
    const double *row = xd.data() + r * cols;
    double        mu  = 0.0;
    for (Index c = 0; c < cols; ++c) { mu += row[c]; }
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (Index c = 0; c < cols; ++c) { var += (row[c] - mu) * (row[c] - mu); }
    var /= static_cast<double>(cols);
    double is                          = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (Index c = 0; c < cols; ++c) {
      auto i  = static_cast<std::size_t>(r * cols + c);
      xhat[i] = (row[c] - mu) * is;
      out[i]  = gd[static_cast<std::size_t>(c)] * xhat[i] + bd[static_cast<std::size_t>(c)];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node &self) {
                       auto &gam = self.parents[1]->value;
                       if (parent_tracked(self, 1) || parent_tracked(self, 2)) {
                         auto &gg = parent_grad(self, 1);
                         auto &gb = parent_grad(self, 2);
                         for (Index r = 0; r < rows; ++r) {
                           for (Index c = 0; c < cols; ++c) {
                             auto i = static_cast<std::size_t>(r * cols + c);
                             gg[static_cast<std::size_t>(c)] += self.grad[i] * xhat[i];
                             gb[static_cast<std::size_t>(c)] += self.grad[i];
                           }
                         }
                       }
                       if (!parent_tracked(self, 0)) { return; }
                       auto &gx = parent_grad(self, 0);
                       auto  n  = static_cast<double>(cols);
                       for (Index r = 0; r < rows; ++r) {
                         double m1 = 0.0, m2 = 0.0;
                         for (Index c = 0; c < cols; ++c) {
                           auto   i  = static_cast<std::size_t>(r * cols + c);
                           double dh = self.grad[i] * gam[static_cast<std::size_t>(c)];
                           m1 += dh;
                           m2 += dh * xhat[i];
                         }
                         m1 /= n;
                         m2 /= n;
                         double is = inv_std[static_cast<std::size_t>(r)];
                         for (Index c = 0; c < cols; ++c) {
                           auto   i  = static_cast<std::size_t>(r * cols + c);
                           double dh = self.grad[i] * gam[static_cast<std::size_t>(c)];
                           gx[i] += is * (dh - m1 - xhat[i] * m2);
                         }
                       }
                     });
}

Tensor softmax(const Tensor &x, std::size_t axis)
{
  if (axis >= x.ndim()) { throw DimensionError("softmax: axis out of range for " + shape_string(x.shape())); }
  Index n = x.dim(axis), outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) { outer *= x.dim(i); }
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) { inner *= x.dim(i); }
  auto                xd = x.data();
  std::vector<double> out(xd.size());
  for (auto v : xd) {
    if (std::isnan(v)) { throw NumericError("softmax: NaN input"); }
  }
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      Index  base = o * n * inner + in;
      double mx   = -INFINITY;
      for (Index j = 0; j < n; ++j) { mx = std::max(mx, xd[static_cast<std::size_t>(base + j * inner)]); }
      double s = 0.0;
      for (Index j = 0; j < n; ++j) {
        auto i = static_cast<std::size_t>(base + j * inner);
        out[i] = std::exp(xd[i] - mx);
        s += out[i];
      }
      for (Index j = 0; j < n; ++j) { out[static_cast<std::size_t>(base + j * inner)] /= s; }
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [n, outer, inner](detail::Node &self) {
    auto &y = self.value;
    auto &g = parent_grad(self, 0);
    for (Index o = 0; o < outer; ++o) {
      for (Index in = 0; in < inner; ++in) {
        Index  base = o * n * inner + in;
        double dot  = 0.0;
        for (Index j = 0; j < n; ++j) {
          auto i = static_cast<std::size_t>(base + j * inner);
          dot += self.grad[i] * y[i];
        }
        for (Index j = 0; j < n; ++j) {
          auto i = static_cast<std::size_t>(base + j * inner);
          g[i] += y[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

TopK topk(std::span<const double> x, int k)
{
  if (k < 1 || static_cast<std::size_t>(k) > x.size()) {
    throw ArgumentError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(x.size()) + "]");
  }
  std::vector<int> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
    return x[ia] > x[ib] || (x[ia] == x[ib] && a < b);
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  TopK r;
  r.indices = order;
  for (int i : order) { r.values.push_back(x[static_cast<std::size_t>(i)]); }
  return r;
}

// ---------------------------------------------------------------------------
// Volumes

namespace {

// dst[x] += sum_k taps[k] row[x + k] for x < n.
template <int S> void correlate_row(double *__restrict dst, const double *__restrict row, const double *taps, Index n)
{
  double t[S];
  for (int k = 0; k < S; ++k) { t[k] = taps[k]; }
  for (Index x = 0; x < n; ++x) {
    double acc = dst[x];
    for (int k = 0; k < S; ++k) { acc += t[k] * row[x + k]; }
    dst[x] = acc;
  }
}

// acc[k] += sum_x g[x] row[x + k], in four interleaved partial sums per tap.
template <int S> void tap_products(double *acc, const double *__restrict g, const double *__restrict row, Index n)
{
  double part[S][4] = {};
  Index  x          = 0;
  for (; x + 4 <= n; x += 4) {
    for (int k = 0; k < S; ++k) {
      for (int l = 0; l < 4; ++l) { part[k][l] += g[x + l] * row[x + l + k]; }
    }
  }
  for (; x < n; ++x) {
    for (int k = 0; k < S; ++k) { part[k][0] += g[x] * row[x + k]; }
  }
  for (int k = 0; k < S; ++k) { acc[k] += (part[k][0] + part[k][1]) + (part[k][2] + part[k][3]); }
}

void correlate_row(double *dst, const double *row, const double *taps, Index n, Index s)
{
  switch (s) {
  case 1: return correlate_row<1>(dst, row, taps, n);
  case 3: return correlate_row<3>(dst, row, taps, n);
  case 5: return correlate_row<5>(dst, row, taps, n);
  case 7: return correlate_row<7>(dst, row, taps, n);
  default:
    for (Index x = 0; x < n; ++x) {
      double acc = dst[x];
      for (Index k = 0; k < s; ++k) { acc += taps[k] * row[x + k]; }
      dst[x] = acc;
    }
  }
}

void tap_products(double *acc, const double *g, const double *row, Index n, Index s)
{
  switch (s) {
  case 1: return tap_products<1>(acc, g, row, n);
  case 3: return tap_products<3>(acc, g, row, n);
  case 5: return tap_products<5>(acc, g, row, n);
  case 7: return tap_products<7>(acc, g, row, n);
  default:
    for (Index k = 0; k < s; ++k) {
      double a = 0.0;
      for (Index x = 0; x < n; ++x) { a += g[x] * row[x + k]; }
      acc[k] += a;
    }
  }
}

// Zero border of width p around every channel of [C x D x H x W].
std::vector<double> pad_volume(const double *v, Index C, Index D, Index H, Index W, Index p)
{
  Index               Dp = D + 2 * p, Hp = H + 2 * p, Wp = W + 2 * p;
  std::vector<double> out(static_cast<std::size_t>(C * Dp * Hp * Wp), 0.0);
  for (Index c = 0; c < C; ++c)
    for (Index z = 0; z < D; ++z)
      for (Index y = 0; y < H; ++y) {
        std::copy_n(v + ((c * D + z) * H + y) * W, W, out.data() + ((c * Dp + z + p) * Hp + y + p) * Wp + p);
      }
  return out;
}

// out[o, z, y, x] += sum over c and taps of k(o, c, tap) in[c, z + kz, y + ky, x + kx]
// with `in` already padded. `kernel_at(o, c, kz, ky)` points at s taps along x.
template <class KernelAt>
void correlate(double *out, const double *in, Index O, Index C, Index D, Index H, Index W, Index s, KernelAt kernel_at)
{
  Index Dp = D + s - 1, Hp = H + s - 1, Wp = W + s - 1;
  for (Index o = 0; o < O; ++o)
    for (Index z = 0; z < D; ++z)
      for (Index y = 0; y < H; ++y) {
        double *dst = out + ((o * D + z) * H + y) * W;
        for (Index c = 0; c < C; ++c)
          for (Index kz = 0; kz < s; ++kz)
            for (Index ky = 0; ky < s; ++ky) {
              correlate_row(dst, in + ((c * Dp + z + kz) * Hp + y + ky) * Wp, kernel_at(o, c, kz, ky), W, s);
            }
      }
}

} // namespace

Tensor conv3d(const Tensor &input, const Tensor &kernel)
{
  require_ndim(input, 4, "conv3d input");
  require_ndim(kernel, 5, "conv3d kernel");
  Index C = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
  Index O = kernel.dim(0), s = kernel.dim(2);
  if (kernel.dim(1) != C) {
    throw DimensionError("conv3d: kernel " + shape_string(kernel.shape()) + " does not match input " +
                         shape_string(input.shape()));
  }
  if (kernel.dim(3) != s || kernel.dim(4) != s) { throw ArgumentError("conv3d: kernel must be cubic"); }
  if (s % 2 == 0) { throw ArgumentError("conv3d: kernel size " + std::to_string(s) + " is even"); }
  Index pad = (s - 1) / 2;

  std::vector<double> out(static_cast<std::size_t>(O * D * H * W), 0.0);
  {
    auto          padded = pad_volume(input.data().data(), C, D, H, W, pad);
    const double *kw     = kernel.data().data();
    correlate(out.data(), padded.data(), O, C, D, H, W, s,
              [&](Index o, Index c, Index kz, Index ky) { return kw + (((o * C + c) * s + kz) * s + ky) * s; });
  }
  return make_result({O, D, H, W}, std::move(out), {input, kernel}, [=](detail::Node &self) {
    const double *g = self.grad.data();
    if (parent_tracked(self, 1)) {
      double *dk     = parent_grad(self, 1).data();
      auto    padded = pad_volume(self.parents[0]->value.data(), C, D, H, W, pad);
      Index   Dp = D + 2 * pad, Hp = H + 2 * pad, Wp = W + 2 * pad;
      for (Index o = 0; o < O; ++o)
        for (Index c = 0; c < C; ++c)
          for (Index z = 0; z < D; ++z)
            for (Index y = 0; y < H; ++y) {
              const double *grow = g + ((o * D + z) * H + y) * W;
              for (Index kz = 0; kz < s; ++kz)
                for (Index ky = 0; ky < s; ++ky) {
                  tap_products(dk + (((o * C + c) * s + kz) * s + ky) * s, grow,
                               padded.data() + ((c * Dp + z + kz) * Hp + y + ky) * Wp, W, s);
                }
            }
    }
    if (parent_tracked(self, 0)) {
      // Input gradient: the output gradient, padded, correlated with the
      // kernel flipped along every axis and transposed in channels.
      auto                gp = pad_volume(g, O, D, H, W, pad);
      const double       *kw = self.parents[1]->value.data();
      Index               S3 = s * s * s;
      std::vector<double> flipped(static_cast<std::size_t>(C * O * S3));
      for (Index o = 0; o < O; ++o)
        for (Index c = 0; c < C; ++c)
          for (Index t = 0; t < S3; ++t) { flipped[static_cast<std::size_t>((c * O + o) * S3 + t)] = kw[(o * C + c) * S3 + (S3 - 1 - t)]; }
      std::vector<double> din(static_cast<std::size_t>(C * D * H * W), 0.0);
      correlate(din.data(), gp.data(), C, O, D, H, W, s, [&](Index c, Index o, Index kz, Index ky) {
        return flipped.data() + (((c * O + o) * s + kz) * s + ky) * s;
      });
      auto &dst = parent_grad(self, 0);
      for (std::size_t i = 0; i < din.size(); ++i) { dst[i] += din[i]; }
    }
  });
}

Tensor add_channel_bias(const Tensor &x, const Tensor &b)
{
  if (x.ndim() < 1 || b.size() != x.dim(0)) {
    throw DimensionError("add_channel_bias: bias " + shape_string(b.shape()) + " vs " + shape_string(x.shape()));
  }
  Index               C = x.dim(0), inner = x.size() / std::max<Index>(C, 1);
  std::vector<double> out(x.data().begin(), x.data().end());
  auto                bd = b.data();
  for (Index c = 0; c < C; ++c) {
    for (Index i = 0; i < inner; ++i) { out[static_cast<std::size_t>(c * inner + i)] += bd[static_cast<std::size_t>(c)]; }
  }
  return make_result(x.shape(), std::move(out), {x, b}, [C, inner](detail::Node &self) {
    if (parent_tracked(self, 0)) {
      auto &g = parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) { g[i] += self.grad[i]; }
    }
    if (parent_tracked(self, 1)) {
      auto &g = parent_grad(self, 1);
      for (Index c = 0; c < C; ++c) {
        double acc = 0.0;
        for (Index i = 0; i < inner; ++i) { acc += self.grad[static_cast<std::size_t>(c * inner + i)]; }
        g[static_cast<std::size_t>(c)] += acc;
      }
    }
  });
}

Tensor concat(std::span<const Tensor> parts)
{
  if (parts.empty()) { throw ArgumentError("concat: no inputs"); }
  Shape rest(parts[0].shape().begin() + 1, parts[0].shape().end());
  Index rows = 0;
  for (auto &p : parts) {
    Shape r(p.shape().begin() + 1, p.shape().end());
    if (p.ndim() != parts[0].ndim() || r != rest) {
      throw DimensionError("concat: " + shape_string(p.shape()) + " vs " + shape_string(parts[0].shape()));
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows * shape_size(rest)));
  for (auto &p : parts) { out.insert(out.end(), p.data().begin(), p.data().end()); }
  Shape shape = parts[0].shape();
  shape[0]    = rows;
  return make_result(std::move(shape), std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                     [](detail::Node &self) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                         auto n = self.parents[p]->value.size();
                         if (parent_tracked(self, p)) {
                           auto &g = parent_grad(self, p);
                           for (std::size_t i = 0; i < n; ++i) { g[i] += self.grad[offset + i]; }
                         }
                         offset += n;
                       }
                     });
}

Tensor slice(const Tensor &x, Index begin, Index end)
{
  if (x.ndim() < 1 || begin < 0 || end > x.dim(0) || begin >= end) {
    throw DimensionError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_string(x.shape()));
  }
  Index inner = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0]    = end - begin;
  std::vector<double> out(x.data().begin() + begin * inner, x.data().begin() + end * inner);
  return make_result(std::move(shape), std::move(out), {x}, [offset = begin * inner](detail::Node &self) {
    auto &g = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) { g[static_cast<std::size_t>(offset) + i] += self.grad[i]; }
  });
}

Tensor gather_flat(const Tensor &x, Shape out_shape, std::vector<Index> source)
{
  if (shape_size(out_shape) != static_cast<Index>(source.size())) {
    throw DimensionError("gather_flat: index map does not fill " + shape_string(out_shape));
  }
  auto                xd = x.data();
  std::vector<double> out(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (source[i] < 0 || source[i] >= x.size()) { throw DimensionError("gather_flat: index out of range"); }
    out[i] = xd[static_cast<std::size_t>(source[i])];
  }
  return make_result(std::move(out_shape), std::move(out), {x}, [source = std::move(source)](detail::Node &self) {
    auto &g = parent_grad(self, 0);
    for (std::size_t i = 0; i < source.size(); ++i) { g[static_cast<std::size_t>(source[i])] += self.grad[i]; }
  });
}

Tensor gather_rows(const Tensor &x, std::span<const Index> rows)
{
  require_ndim(x, 2, "gather_rows");
  Index              cols = x.dim(1);
  std::vector<Index> src;
  src.reserve(rows.size() * static_cast<std::size_t>(cols));
  for (auto r : rows) {
    if (r < 0 || r >= x.dim(0)) { throw DimensionError("gather_rows: row index out of range"); }
    for (Index c = 0; c < cols; ++c) { src.push_back(r * cols + c); }
  }
  return gather_flat(x, {static_cast<Index>(rows.size()), cols}, std::move(src));
}

Tensor channels_to_rows(const Tensor &x)
{
  require_ndim(x, 4, "channels_to_rows");
  Index C = x.dim(0), n = x.size() / C;
  return transpose(x.reshape({C, n}));
}

Tensor rows_to_channels(const Tensor &x, Index d, Index h, Index w)
{
  require_ndim(x, 2, "rows_to_channels");
  if (x.dim(0) != d * h * w) { throw DimensionError("rows_to_channels: row count does not match spatial extents"); }
  return transpose(x).reshape({x.dim(1), d, h, w});
}

Tensor extract_patches(const Tensor &x, Index p)
{
  require_ndim(x, 4, "extract_patches");
  Index C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (p < 1 || D % p || H % p || W % p) {
    throw ConfigError("extract_patches: extents " + shape_string(x.shape()) + " not divisible by patch " +
                      std::to_string(p));
  }
  Index              d = D / p, h = H / p, w = W / p, feat = C * p * p * p;
  std::vector<Index> src(static_cast<std::size_t>(d * h * w * feat));
  std::size_t        i = 0;
  for (Index z = 0; z < d; ++z) {
    for (Index y = 0; y < h; ++y) {
      for (Index xx = 0; xx < w; ++xx) {
        for (Index c = 0; c < C; ++c) {
          for (Index a = 0; a < p; ++a) {
            for (Index b = 0; b < p; ++b) {
              for (Index e = 0; e < p; ++e) {
                src[i++] = ((c * D + z * p + a) * H + y * p + b) * W + xx * p + e;
              }
            }
          }
        }
      }
    }
  }
  return gather_flat(x, {d * h * w, feat}, std::move(src));
}

Tensor upsample2x(const Tensor &x)
{
  require_ndim(x, 4, "upsample2x");
  Index C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto  axis = [](Index n) {
    std::vector<Axis> a(static_cast<std::size_t>(2 * n));
    for (Index i = 0; i < 2 * n; ++i) {
      a[static_cast<std::size_t>(i)] = stencil((static_cast<double>(i) + 0.5) / 2.0 - 0.5, n);
    }
    return a;
  };
  auto az = axis(D), ay = axis(H), ax = axis(W);
  Index OD = 2 * D, OH = 2 * H, OW = 2 * W;

  // Visits the 8 (source index, weight) pairs of each output voxel.
  auto visit = [=](auto &&fn) {
    for (Index c = 0; c < C; ++c) {
      for (Index z = 0; z < OD; ++z) {
        const auto &sz = az[static_cast<std::size_t>(z)];
        for (Index y = 0; y < OH; ++y) {
          const auto &sy = ay[static_cast<std::size_t>(y)];
          for (Index xx = 0; xx < OW; ++xx) {
            const auto &sx  = ax[static_cast<std::size_t>(xx)];
            Index       out = ((c * OD + z) * OH + y) * OW + xx;
            for (int k = 0; k < 8; ++k) {
              Index  iz = (k & 4) ? sz.i1 : sz.i0, iy = (k & 2) ? sy.i1 : sy.i0, ix = (k & 1) ? sx.i1 : sx.i0;
              double w = ((k & 4) ? sz.t : 1.0 - sz.t) * ((k & 2) ? sy.t : 1.0 - sy.t) * ((k & 1) ? sx.t : 1.0 - sx.t);
              fn(out, ((c * D + iz) * H + iy) * W + ix, w);
            }
          }
        }
      }
    }
  };
  std::vector<double> out(static_cast<std::size_t>(C * OD * OH * OW), 0.0);
  auto                xd = x.data();
  visit([&](Index o, Index s, double w) { out[static_cast<std::size_t>(o)] += w * xd[static_cast<std::size_t>(s)]; });
  return make_result({C, OD, OH, OW}, std::move(out), {x}, [visit](detail::Node &self) {
    auto &g = parent_grad(self, 0);
    visit([&](Index o, Index s, double w) { g[static_cast<std::size_t>(s)] += w * self.grad[static_cast<std::size_t>(o)]; });
  });
}

Tensor avg_pool2(const Tensor &x)
{
  require_ndim(x, 4, "avg_pool2");
  auto patches = extract_patches(x, 2); // [(d h w) x (C 8)]
  Index C = x.dim(0), n = patches.dim(0);
  // Averaging matrix over the 8 entries of each channel.
  std::vector<double> avg(static_cast<std::size_t>(C * 8 * C), 0.0);
  for (Index c = 0; c < C; ++c) {
    for (Index j = 0; j < 8; ++j) { avg[static_cast<std::size_t>((c * 8 + j) * C + c)] = 0.125; }
  }
  auto pooled = matmul(patches, Tensor({C * 8, C}, std::move(avg))); // [n x C]
  (void)n;
  return rows_to_channels(pooled, x.dim(1) / 2, x.dim(2) / 2, x.dim(3) / 2);
}

Tensor resample(const Tensor &src, const Tensor &disp)
{
  require_ndim(src, 4, "resample source");
  require_ndim(disp, 4, "resample displacement");
  Index C = src.dim(0), D = src.dim(1), H = src.dim(2), W = src.dim(3);
  if (disp.dim(0) != 3 || disp.dim(1) != D || disp.dim(2) != H || disp.dim(3) != W) {
    throw DimensionError("resample: displacement " + shape_string(disp.shape()) + " not aligned with " +
                         shape_string(src.shape()));
  }
  Index vol = D * H * W;
  // Stencils are shared by all channels.
  std::vector<std::array<Axis, 3>> st(static_cast<std::size_t>(vol));
  auto                             dd = disp.data();
  for (Index z = 0, v = 0; z < D; ++z) {
    for (Index y = 0; y < H; ++y) {
      for (Index x = 0; x < W; ++x, ++v) {
        auto u = static_cast<std::size_t>(v);
        st[u]  = {stencil(static_cast<double>(z) + dd[u], D),
                  stencil(static_cast<double>(y) + dd[u + static_cast<std::size_t>(vol)], H),
                  stencil(static_cast<double>(x) + dd[u + 2 * static_cast<std::size_t>(vol)], W)};
      }
    }
  }
  std::vector<double> out(static_cast<std::size_t>(C * vol), 0.0);
  auto                sd = src.data();
  for (Index c = 0; c < C; ++c) {
    const double *plane = sd.data() + c * vol;
    for (Index v = 0; v < vol; ++v) {
      const auto &[sz, sy, sx] = st[static_cast<std::size_t>(v)];
      double acc               = 0.0;
      for (int k = 0; k < 8; ++k) {
        Index  iz = (k & 4) ? sz.i1 : sz.i0, iy = (k & 2) ? sy.i1 : sy.i0, ix = (k & 1) ? sx.i1 : sx.i0;
        double w  = ((k & 4) ? sz.t : 1.0 - sz.t) * ((k & 2) ? sy.t : 1.0 - sy.t) * ((k & 1) ? sx.t : 1.0 - sx.t);
        acc += w * plane[(iz * H + iy) * W + ix];
      }
      out[static_cast<std::size_t>(c * vol + v)] = acc;
    }
  }
  return make_result(src.shape(), std::move(out), {src, disp},
                     [C, H, W, vol, st = std::move(st)](detail::Node &self) {
                       const auto &sv = self.parents[0]->value;
                       bool        gs = parent_tracked(self, 0), gd = parent_tracked(self, 1);
                       double     *ds  = gs ? parent_grad(self, 0).data() : nullptr;
                       double     *ddp = gd ? parent_grad(self, 1).data() : nullptr;
                       for (Index c = 0; c < C; ++c) {
                         for (Index v = 0; v < vol; ++v) {
                           double g = self.grad[static_cast<std::size_t>(c * vol + v)];
                           if (g == 0.0) { continue; }
                           const auto &[sz, sy, sx] = st[static_cast<std::size_t>(v)];
                           double gz = 0.0, gy = 0.0, gx = 0.0;
                           for (int k = 0; k < 8; ++k) {
                             Index  iz = (k & 4) ? sz.i1 : sz.i0, iy = (k & 2) ? sy.i1 : sy.i0, ix = (k & 1) ? sx.i1 : sx.i0;
                             double wz = (k & 4) ? sz.t : 1.0 - sz.t;
                             double wy = (k & 2) ? sy.t : 1.0 - sy.t;
                             double wx = (k & 1) ? sx.t : 1.0 - sx.t;
                             Index  s  = c * vol + (iz * H + iy) * W + ix;
                             if (ds) { ds[s] += g * wz * wy * wx; }
                             double val = sv[static_cast<std::size_t>(s)];
                             gz += ((k & 4) ? 1.0 : -1.0) * wy * wx * val;
                             gy += ((k & 2) ? 1.0 : -1.0) * wz * wx * val;
                             gx += ((k & 1) ? 1.0 : -1.0) * wz * wy * val;
                           }
                           if (ddp) {
                             ddp[v] += g * gz * sz.dt;
                             ddp[v + vol] += g * gy * sy.dt;
                             ddp[v + 2 * vol] += g * gx * sx.dt;
                           }
                         }
                       }
                     });
}

} // namespace hetreg
