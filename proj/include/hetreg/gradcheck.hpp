#pragma once

#include "hetreg/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>

namespace hetreg {

/// Max over elements of |analytic - numeric| / max(1, |numeric|), where
/// numeric is the central difference (f(x+h) - f(x-h)) / 2h. `f` must return
/// a scalar; ArgumentError otherwise.
double finite_diff_check(const std::function<Tensor(const Tensor &)> &f, const Tensor &x, double h = 1e-5);

struct GradCheckOptions
{
  double        step = 1e-5;
  Index         max_entries_per_tensor = 0; // 0 checks every entry
  std::uint64_t seed                   = 0; // picks the sampled entries
};

/// Same measure for a closure over parameters that are perturbed in place.
double finite_diff_check(const std::function<Tensor()> &f, std::span<Tensor> params, const GradCheckOptions &opts = {});

} // namespace hetreg
