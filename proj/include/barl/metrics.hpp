#pragma once

#include <vector>

#include "barl/nd_array.hpp"

namespace barl {

/// Overlap and surface metrics for one class. HD95/ASD are in voxel units
/// (isotropic unit spacing); infinity when either surface is empty.
struct ClassMetrics {
  double dice = 0.0;
  double jaccard = 0.0;
  double hd95 = 0.0;
  double asd = 0.0;
  bool surface_defined = true;
};

struct MetricReport {
  std::vector<ClassMetrics> per_class;  // indexed by class id (0 = background)
  /// Mean over foreground classes 1..C-1.
  double mean_dice = 0.0;
  double mean_jaccard = 0.0;
  double mean_hd95 = 0.0;
  double mean_asd = 0.0;
};

/// Dice = 2|A∩B| / (|A|+|B|), Jaccard = |A∩B| / |A∪B|; both 1 when both
/// masks are empty.
std::pair<double, double> dice_jaccard(const IntVolume& pred, const IntVolume& gt, int cls);

/// Boundary voxels are foreground voxels with a six-connected background
/// neighbour (outside the volume counts as background). HD95 is the
/// nearest-rank 95th percentile of the pooled symmetric distance multiset;
/// ASD its mean. Either surface empty -> (inf, inf).
std::pair<double, double> surface_distances(const IntVolume& pred, const IntVolume& gt, int cls);

MetricReport evaluate_labels(const IntVolume& pred, const IntVolume& gt, int classes);

/// Exact squared Euclidean distance transform to the set voxels of `sites`
/// (lower-envelope method, separable passes). Exposed for the surface code
/// and its tests.
NdArray<double> squared_edt(const ByteMask& sites);

}  // namespace barl
