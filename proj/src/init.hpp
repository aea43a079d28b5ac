#pragma once

#include "hetreg/rng.hpp"
#include "hetreg/tensor.hpp"

namespace hetreg::detail {

/// Trainable tensor of N(0, stddev^2) entries.
inline Tensor random_normal(Rng &rng, Shape shape, double stddev)
{
  std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
  for (auto &x : v) { x = stddev * rng.normal(); }
  return Tensor(std::move(shape), std::move(v), true);
}

} // namespace hetreg::detail
