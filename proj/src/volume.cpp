#include "hetreg/volume.hpp"

#include <algorithm>

namespace hetreg {

std::vector<std::uint16_t> SegVolume::label_set() const
{
  std::vector<bool> seen(65536, false);
  for (auto l : labels) { seen[l] = true; }
  std::vector<std::uint16_t> out;
  for (std::size_t l = 1; l < seen.size(); ++l) {
    if (seen[l]) { out.push_back(static_cast<std::uint16_t>(l)); }
  }
  return out;
}

} // namespace hetreg
