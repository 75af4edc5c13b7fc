#pragma once

#include <vector>

#include "barl/nd_array.hpp"

namespace barl {

/// One maximal connected set of foreground voxels of a single class.
struct InstanceMask {
  std::vector<Index> voxels;  // linear indices, ascending
  int class_id = 0;
  int component_id = 0;
  Index volume() const { return static_cast<Index>(voxels.size()); }

  ByteMask to_mask(const Shape& grid) const {
    ByteMask m(grid);
    for (Index v : voxels) m[v] = 1;
    return m;
  }
};

/// Partition of a binary volume [D,H,W] into maximal connected components
/// under 6/18/26-connectivity, ordered by minimum linear voxel index.
/// Implemented with two-pass union-find (the tests check it against an
/// independent flood fill).
std::vector<InstanceMask> connected_components(const ByteMask& mask, int connectivity);

/// Keeps instances with volume >= tau_vol, order preserved. tau_vol >= 1.
std::vector<InstanceMask> filter_by_volume(std::vector<InstanceMask> instances, Index tau_vol);

}  // namespace barl
