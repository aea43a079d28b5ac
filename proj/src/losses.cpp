#include "hetreg/losses.hpp"

#include "hetreg/errors.hpp"
#include "hetreg/ops.hpp"
#include "hetreg/warpfield.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>

namespace hetreg {

Tensor sim_loss(const Volume &warped, const Volume &fixed)
{
  if (warped.data.shape() != fixed.data.shape()) {
    throw ArgumentError("sim_loss: " + shape_string(warped.data.shape()) + " vs " + shape_string(fixed.data.shape()));
  }
  return mse(warped.data, fixed.data);
}

Tensor reg_loss(const DeformationField &phi)
{
  const Tensor &u = phi.disp;
  if (u.ndim() != 4 || u.dim(0) != 3) { throw DimensionError("reg_loss: field must be [3 x D x H x W]"); }
  Index                D = u.dim(1), H = u.dim(2), W = u.dim(3), vol = D * H * W;
  std::array<Index, 3> stride{H * W, W, 1};
  std::array<Index, 3> extent{D, H, W};
  std::array<double, 3> inv_count{};
  for (int a = 0; a < 3; ++a) {
    Index n      = (extent[a] - 1) * vol / extent[a];
    inv_count[a] = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  }

  // Visits (channel, axis, voxel) for every voxel with a forward neighbour.
  auto visit = [=](auto &&fn) {
    for (Index c = 0; c < 3; ++c) {
      for (int a = 0; a < 3; ++a) {
        for (Index z = 0; z < D; ++z) {
          for (Index y = 0; y < H; ++y) {
            for (Index x = 0; x < W; ++x) {
              Index pos[3] = {z, y, x};
              if (pos[a] + 1 >= extent[a]) { continue; }
              Index i = c * vol + (z * H + y) * W + x;
              fn(a, i, i + stride[a]);
            }
          }
        }
      }
    }
  };
  auto   ud = u.data();
  double s  = 0.0;
  visit([&](int a, Index i, Index j) {
    double d = ud[static_cast<std::size_t>(j)] - ud[static_cast<std::size_t>(i)];
    s += d * d * inv_count[a];
  });
  return make_result({}, {s}, {u}, [visit, inv_count](detail::Node &self) {
    auto &x = self.parents[0]->value;
    auto &g = self.parents[0]->grad_buffer();
    visit([&](int a, Index i, Index j) {
      auto   si = static_cast<std::size_t>(i), sj = static_cast<std::size_t>(j);
      double d  = 2.0 * (x[sj] - x[si]) * inv_count[a] * self.grad[0];
      g[sj] += d;
      g[si] -= d;
    });
  });
}

LossTerms total_loss(const Volume &warped, const Volume &fixed, const DeformationField &phi,
                     std::span<const Tensor> rc_terms, const LossWeights &w)
{
  if (w.reg < 0.0 || w.routing < 0.0) { throw ArgumentError("total_loss: loss weights must be non-negative"); }
  LossTerms t;
  t.sim = sim_loss(warped, fixed);
  t.reg = reg_loss(phi);
  if (rc_terms.empty()) {
    t.rc = Tensor::scalar(0.0);
  } else {
    std::vector<double> each(rc_terms.size(), 1.0 / static_cast<double>(rc_terms.size()));
    t.rc = weighted_sum(rc_terms, each);
  }
  std::vector<Tensor> parts{t.sim, t.reg, t.rc};
  std::vector<double> weights{1.0, w.reg, w.routing};
  t.total = weighted_sum(parts, weights);
  return t;
}

namespace {

void require_same_grid(const SegVolume &a, const SegVolume &b, const char *what)
{
  if (a.depth != b.depth || a.height != b.height || a.width != b.width) {
    throw ArgumentError(std::string(what) + ": label maps have different extents");
  }
}

std::vector<std::array<Index, 3>> surface(const SegVolume &s, std::uint16_t label)
{
  std::vector<std::array<Index, 3>> out;
  auto inside = [&](Index z, Index y, Index x) {
    return z >= 0 && y >= 0 && x >= 0 && z < s.depth && y < s.height && x < s.width && s.at(z, y, x) == label;
  };
  for (Index z = 0; z < s.depth; ++z) {
    for (Index y = 0; y < s.height; ++y) {
      for (Index x = 0; x < s.width; ++x) {
        if (s.at(z, y, x) != label) { continue; }
        if (!inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) || !inside(z, y + 1, x) ||
            !inside(z, y, x - 1) || !inside(z, y, x + 1)) {
          out.push_back({z, y, x});
        }
      }
    }
  }
  return out;
}

double directed_sum(const std::vector<std::array<Index, 3>> &from, const std::vector<std::array<Index, 3>> &to,
                    const Spacing &sp)
{
  double total = 0.0;
  for (auto &p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (auto &q : to) {
      double dz = static_cast<double>(p[0] - q[0]) * sp[0];
      double dy = static_cast<double>(p[1] - q[1]) * sp[1];
      double dx = static_cast<double>(p[2] - q[2]) * sp[2];
      best      = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    total += std::sqrt(best);
  }
  return total;
}

} // namespace

std::vector<std::optional<double>> dice(const SegVolume &a, const SegVolume &b, std::span<const std::uint16_t> labels)
{
  require_same_grid(a, b, "dice");
  std::vector<std::optional<double>> out;
  for (auto l : labels) {
    Index na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.labels.size(); ++i) {
      bool in_a = a.labels[i] == l, in_b = b.labels[i] == l;
      na += in_a;
      nb += in_b;
      both += in_a && in_b;
    }
    if (na + nb == 0) {
      out.emplace_back(std::nullopt);
    } else {
      out.emplace_back(2.0 * static_cast<double>(both) / static_cast<double>(na + nb));
    }
  }
  return out;
}

double assd(const SegVolume &a, const SegVolume &b, std::uint16_t label, const Spacing &spacing)
{
  require_same_grid(a, b, "assd");
  auto sa = surface(a, label);
  auto sb = surface(b, label);
  if (sa.empty() || sb.empty()) {
    throw MetricUndefined("assd: label " + std::to_string(label) + " is empty in " + (sa.empty() ? "first" : "second") +
                          " mask");
  }
  return (directed_sum(sa, sb, spacing) + directed_sum(sb, sa, spacing)) / static_cast<double>(sa.size() + sb.size());
}

SegVolume warp_labels(const SegVolume &seg, const DeformationField &phi)
{
  if (phi.depth() != seg.depth || phi.height() != seg.height || phi.width() != seg.width) {
    throw ArgumentError("warp_labels: field and label map extents differ");
  }
  SegVolume out(seg.depth, seg.height, seg.width);
  out.spacing = seg.spacing;
  auto  d     = phi.disp.data();
  Index vol   = seg.voxels();
  auto  pick  = [](double p, Index n) { return std::clamp<Index>(static_cast<Index>(std::lround(p)), 0, n - 1); };
  for (Index z = 0, v = 0; z < seg.depth; ++z) {
    for (Index y = 0; y < seg.height; ++y) {
      for (Index x = 0; x < seg.width; ++x, ++v) {
        auto u        = static_cast<std::size_t>(v);
        auto sv       = static_cast<std::size_t>(vol);
        out.at(z, y, x) = seg.at(pick(static_cast<double>(z) + d[u], seg.depth),
                                 pick(static_cast<double>(y) + d[u + sv], seg.height),
                                 pick(static_cast<double>(x) + d[u + 2 * sv], seg.width));
      }
    }
  }
  return out;
}

EvalReport evaluate(const SegVolume &moved, const SegVolume &reference, const DeformationField &phi)
{
  auto la = moved.label_set(), lb = reference.label_set();
  std::vector<std::uint16_t> labels;
  std::set_union(la.begin(), la.end(), lb.begin(), lb.end(), std::back_inserter(labels));
  auto scores = dice(moved, reference, labels);

  EvalReport r;
  double     dice_sum = 0.0, assd_sum = 0.0;
  int        dice_n = 0, assd_n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    LabelScore s;
    s.label = labels[i];
    if (scores[i]) {
      s.dice_percent = 100.0 * *scores[i];
      dice_sum += *s.dice_percent;
      ++dice_n;
    }
    try {
      s.assd = assd(moved, reference, labels[i], reference.spacing);
      assd_sum += *s.assd;
      ++assd_n;
    } catch (const MetricUndefined &) {
    }
    r.labels.push_back(s);
  }
  r.mean_dice_percent = dice_n ? dice_sum / dice_n : 0.0;
  r.mean_assd         = assd_n ? assd_sum / assd_n : 0.0;
  r.folding_percent   = jacobian_folding(phi);
  return r;
}

void write_report(std::ostream &os, const EvalReport &report)
{
  auto field = [&](const std::optional<double> &v) {
    if (v) {
      os << std::fixed << std::setprecision(6) << *v;
    } else {
      os << "nan";
    }
  };
  os << "label,dice_percent,assd\n";
  for (auto &s : report.labels) {
    os << s.label << ',';
    field(s.dice_percent);
    os << ',';
    field(s.assd);
    os << '\n';
  }
  os << "mean,";
  field(report.mean_dice_percent);
  os << ',';
  field(report.mean_assd);
  os << "\nfolding_percent,";
  field(report.folding_percent);
  os << '\n';
}

} // namespace hetreg
