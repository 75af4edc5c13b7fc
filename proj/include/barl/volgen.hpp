#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "barl/nd_array.hpp"

namespace barl {

struct generation_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One synthetic volume. The label map is kept for every sample (it is
/// simply withheld from the training losses when is_labeled is false) so
/// evaluation stays possible on any split.
struct Sample {
  int id = 0;
  Tensor intensity;  // [1,D,H,W], values in [0,1]
  IntVolume label;   // [D,H,W], values in 0..classes-1 (0 = background)
  bool is_labeled = false;
};

struct GenConfig {
  int count = 40;
  Index grid = 16;
  int classes = 3;
  int fragments_lo = 2;
  int fragments_hi = 3;
  uint64_t seed = 1;

  // Intensity model: class base levels plus correlated Gaussian texture,
  // with per-sample level jitter so absolute thresholds do not transfer
  // cleanly between volumes.
  double bg_level = 0.30;
  double lesion_level_lo = 0.55;
  double lesion_level_hi = 0.80;
  double level_jitter = 0.06;
  double texture_sigma = 0.10;

  double radius_lo = 1.6;
  double radius_hi = 3.2;
  int max_place_tries = 400;
};

struct FlipRecord {
  bool z = false, y = false, x = false;
};

struct AugConfig {
  double weak_shift = 0.05;    // additive intensity shift range for the weak view
  double noise_sigma = 0.10;   // strong view Gaussian noise
  bool jitter = true;          // strong view multiplicative factor in [0.8, 1.2]
  bool cutout = true;          // strong view cuboid filled with the dataset mean
  double cutout_lo = 0.05;     // cutout volume fraction range
  double cutout_hi = 0.15;
};

/// Weak and strong views share the spatial transform (flips only), so voxel
/// p corresponds across both views and the label map.
struct ViewPair {
  Tensor weak;
  Tensor strong;
  FlipRecord flips;
};

std::vector<Sample> generate_dataset(const GenConfig& cfg);

/// Flags floor(ratio*N) samples as labeled after a seed-keyed shuffle.
/// Returns (labeled indices, unlabeled indices) in ascending order.
std::pair<std::vector<size_t>, std::vector<size_t>> split_labeled(std::vector<Sample>& samples,
                                                                  double ratio, uint64_t seed);

ViewPair make_views(const Sample& sample, uint64_t seed, const AugConfig& aug,
                    double dataset_mean);

template <typename T>
NdArray<T> apply_flips(const NdArray<T>& v, const FlipRecord& f);

double dataset_mean_intensity(const std::vector<Sample>& samples);

/// Empirical class frequencies over the labeled subset, floored at 1e-6 and
/// renormalized.
std::vector<double> class_prior(const std::vector<Sample>& samples, int classes);

// --- binary blob format: one JSON header line + raw little-endian payload ---
void save_sample(const Sample& s, int classes, const std::string& path);
Sample load_sample(const std::string& path);
void save_dataset(const std::vector<Sample>& samples, const GenConfig& cfg,
                  const std::string& dir);
std::pair<std::vector<Sample>, GenConfig> load_dataset(const std::string& dir);

}  // namespace barl
