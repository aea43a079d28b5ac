#include "hetreg/rng.hpp"

#include <cmath>
#include <numbers>

namespace hetreg {

double Rng::normal()
{
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) { u1 = uniform(); }
  double u2  = uniform();
  double r   = std::sqrt(-2.0 * std::log(u1));
  double phi = 2.0 * std::numbers::pi * u2;
  spare_     = r * std::sin(phi);
  has_spare_ = true;
  return r * std::cos(phi);
}

} // namespace hetreg
