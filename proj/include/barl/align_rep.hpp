#pragma once

#include <optional>
#include <vector>

#include "barl/autodiff.hpp"
#include "barl/cc3d.hpp"

namespace barl {

struct AlignConfig {
  int connectivity = 26;
  Index tau_vol = 4;         // minimum component volume, counted on the rep grid
  bool cross_pool = true;    // region prototypes pool the opposite branch's features
  bool stop_grad_t = false;  // cut the gradient into f_T inside the prototypes
};

/// Region prototypes (R_c, R~_c) for every class, and instance prototype
/// pairs (z_S, z_T) per lesion class. A prototype is absent when its source
/// mask is empty.
struct PrototypeSet {
  std::vector<std::optional<ad::Var>> region_r;        // indexed by class id
  std::vector<std::optional<ad::Var>> region_r_tilde;
  std::vector<std::vector<std::pair<ad::Var, ad::Var>>> instance_pairs;  // [class][j]
};

struct LossTerm {
  ad::Var value;
  bool skipped = false;  // nothing valid contributed; value is a constant 0
  int terms = 0;         // classes (region) / instances (instance) that contributed
};

/// 1 - cosine similarity, safe for any nonzero vectors.
ad::Var cosine_distance(ad::Var a, ad::Var b);

ByteMask class_mask(const IntVolume& labels, int cls);
/// Nearest-neighbour decimation by `stride` (top-left rule), identity at 1.
ByteMask downsample_mask(const ByteMask& m, int stride);

/// Region prototypes from per-branch argmax masks of the full-resolution
/// predictions. Masks are decimated to the representation grid when the rep
/// head is attached at a coarser scale. With cross pooling, R_c averages f_T
/// over the S-branch mask and R~_c averages f_S over the T-branch mask.
PrototypeSet region_prototypes(ad::Var f_s, ad::Var f_t, const Tensor& p_s_full,
                               const Tensor& p_t_full, int classes, int rep_stride,
                               const AlignConfig& cfg);

/// Mean over classes with both prototypes present of (1 - cos(R_c, R~_c)).
LossTerm region_loss(ad::Tape& tape, const PrototypeSet& protos);

/// Instances come exclusively from the T branch's argmax mask, per lesion
/// class, via connected components and the volume filter; both prototypes of
/// a pair pool over the same instance mask.
PrototypeSet instance_prototypes(ad::Var f_s, ad::Var f_t, const Tensor& p_t_full, int classes,
                                 int rep_stride, const AlignConfig& cfg);

/// Per class: mean cosine distance over its instances; then mean over
/// classes with at least one instance.
LossTerm instance_loss(ad::Tape& tape, const PrototypeSet& protos);

}  // namespace barl
