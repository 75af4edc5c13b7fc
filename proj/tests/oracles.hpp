#pragma once

// Independent reference implementations used only to check the library.
// Each one deliberately takes the dumbest correct route: nested loops,
// breadth-first flood fill, all-pairs distances.

#include <array>
#include <utility>
#include <vector>

#include "barl/autodiff.hpp"
#include "barl/nd_array.hpp"

namespace barl::oracle {

/// Direct six-nested-loop cross-correlation, no GEMM.
Tensor conv3d_naive(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                    ad::Padding pad);

/// Flood-fill connected components; returns per-component sorted voxel index
/// lists, components ordered by minimum linear voxel index.
std::vector<std::vector<Index>> flood_fill_components(const ByteMask& mask, int connectivity);

/// Boundary voxels: foreground with at least one six-connected background
/// neighbour (outside the volume counts as background).
std::vector<std::array<Index, 3>> boundary_voxels(const ByteMask& mask);

/// (hd95, asd) via all-pairs distances over the pooled symmetric multiset;
/// nearest-rank 95th percentile. Either surface empty -> (inf, inf).
std::pair<double, double> surface_distances_allpairs(const ByteMask& a, const ByteMask& b);

/// Mean of f[C,D,H,W] over mask voxels, plain loops.
std::vector<Real> masked_mean_naive(const Tensor& f, const ByteMask& mask);

Tensor random_tensor(Shape shape, uint64_t seed, Real lo = -1.0, Real hi = 1.0);
ByteMask random_mask(Shape shape, uint64_t seed, double density);
/// Random per-voxel distributions over axis 0 of [C,D,H,W].
Tensor random_probability_volume(Shape shape, uint64_t seed);

}  // namespace barl::oracle
