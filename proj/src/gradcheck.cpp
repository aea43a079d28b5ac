#include "hetreg/gradcheck.hpp"

#include "hetreg/errors.hpp"
#include "hetreg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hetreg {

namespace {

double relative_error(double analytic, double numeric)
{
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

Tensor evaluate_scalar(const std::function<Tensor()> &f)
{
  auto y = f();
  if (y.size() != 1) { throw ArgumentError("finite_diff_check: f returned " + shape_string(y.shape()) + ", not a scalar"); }
  return y;
}

} // namespace

double finite_diff_check(const std::function<Tensor(const Tensor &)> &f, const Tensor &x, double h)
{
  Tensor leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  std::vector<Tensor> params{leaf};
  return finite_diff_check([&] { return f(leaf); }, params, GradCheckOptions{h, 0, 0});
}

double finite_diff_check(const std::function<Tensor()> &f, std::span<Tensor> params, const GradCheckOptions &opts)
{
  for (auto &p : params) {
    p.zero_grad();
    p.set_requires_grad(true);
  }
  evaluate_scalar(f).backward();
  std::vector<std::vector<double>> analytic;
  for (auto &p : params) {
    analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                       : std::vector<double>(static_cast<std::size_t>(p.size()), 0.0));
    p.zero_grad();
    p.set_requires_grad(false);
  }

  Rng    rng(opts.seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto              &p = params[t];
    std::vector<Index> entries(static_cast<std::size_t>(p.size()));
    std::iota(entries.begin(), entries.end(), 0);
    if (opts.max_entries_per_tensor > 0 && p.size() > opts.max_entries_per_tensor) {
      for (std::size_t i = 0; i < static_cast<std::size_t>(opts.max_entries_per_tensor); ++i) {
        std::swap(entries[i], entries[i + rng.below(entries.size() - i)]);
      }
      entries.resize(static_cast<std::size_t>(opts.max_entries_per_tensor));
    }
    for (auto e : entries) {
      auto  &v    = p.data()[static_cast<std::size_t>(e)];
      double orig = v;
      v           = orig + opts.step;
      double fp   = evaluate_scalar(f).item();
      v           = orig - opts.step;
      double fm   = evaluate_scalar(f).item();
      v           = orig;
      double numeric = (fp - fm) / (2.0 * opts.step);
      worst          = std::max(worst, relative_error(analytic[t][static_cast<std::size_t>(e)], numeric));
    }
  }
  for (auto &p : params) { p.set_requires_grad(true); }
  return worst;
}

} // namespace hetreg
