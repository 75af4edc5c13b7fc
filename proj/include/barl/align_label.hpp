#pragma once

#include <map>
#include <string>
#include <vector>

#include "barl/net.hpp"

namespace barl {

/// Soft-consistency tool for the distributional term (Table-style swap axis).
enum class DistrTool { Mse, Kl };
/// Hard pseudo-label tool for the cross-supervision term.
enum class CpsTool { Ce, Dice };

DistrTool distr_tool_from_string(const std::string& s);
CpsTool cps_tool_from_string(const std::string& s);

struct LabelLossConfig {
  Real temperature = 0.5;  // sPL temperature (< 1 sharpens)
  Real lambda_ent = 0.5;
  Real lambda_kl = 0.1;
  DistrTool distr_tool = DistrTool::Mse;
  CpsTool cps_tool = CpsTool::Ce;
  bool ent_both_branches = true;  // entropy/IM on both branches, averaged
};

/// Per-voxel temperature renormalization p^(1/T) / sum_c p^(1/T).
/// T == 1 returns the input unchanged.
ad::Var soften(ad::Var p, Real temperature);

/// Voxel-mean cross-entropy of p against a fixed one-hot target (log floored
/// at 1e-12).
ad::Var cross_entropy(ad::Var p, ad::Var target);

/// 1 - mean over classes of 2*sum(p*y) / (sum(p) + sum(y) + 1e-6).
ad::Var soft_dice_loss(ad::Var p, ad::Var target);

/// (1/4) sum over scales of the softened-prediction discrepancy. MSE means
/// over channels and voxels; KL is the symmetrized divergence, voxel-mean.
ad::Var distr_loss(const PredictionSet& s, const PredictionSet& t, Real temperature,
                   DistrTool tool = DistrTool::Mse);

/// (1/4) sum over scales of mutual supervision on detached argmax
/// pseudo-labels (no gradient into the label source).
ad::Var deep_cps_loss(const PredictionSet& s, const PredictionSet& t,
                      CpsTool tool = CpsTool::Ce);

/// Voxel-mean Shannon entropy of a probability volume [1,C,d,h,w].
ad::Var entropy_loss(ad::Var p);

/// KL(pbar || q) where pbar is the per-class voxel-mean of p.
ad::Var kl_prior_loss(ad::Var p, const std::vector<double>& prior);

struct DprLoss {
  ad::Var total;
  ad::Var distr, cps, ent, kl;  // unweighted components
};

/// distr + cps + lambda_ent*ent + lambda_kl*kl. The IM pair (ent, kl) is
/// evaluated on the full-resolution outputs and can be excluded (labeled
/// samples by default receive no IM pressure).
DprLoss dpr_loss(ad::Tape& tape, const PredictionSet& s, const PredictionSet& t,
                 const std::vector<double>& prior, const LabelLossConfig& cfg, bool include_im);

ad::Var dpr_combine(ad::Var distr, ad::Var cps, ad::Var ent, ad::Var kl, Real lambda_ent,
                    Real lambda_kl);

/// Uncertainty-weighted supervised MSE: weight U_p is the (detached) L1
/// distance between the branch distributions, loss is
/// sum_p U_p (|P_S - y|^2 + |P_T - y|^2) / (sum_p U_p + eps).
ad::Var pcbc_loss(ad::Var p_s, ad::Var p_t, const Tensor& y_onehot, Real eps = 1e-8);

/// Voxel-mean CE + soft Dice against the ground truth.
ad::Var seg_loss(ad::Var p, const Tensor& y_onehot);

struct TotalLoss {
  ad::Var value;
  std::map<std::string, Real> breakdown;  // component values plus "total"
};

/// rep_weight*(region + instance) + dpr + pcbc + seg. Throws numeric_error
/// naming the offending term if any component is non-finite.
TotalLoss total_loss(ad::Var region, ad::Var instance, ad::Var dpr, ad::Var pcbc, ad::Var seg,
                     Real rep_weight = 0.1);

/// [C,D,H,W] one-hot encoding of a label map, validated against `classes`.
Tensor labels_to_onehot(const IntVolume& labels, int classes);

}  // namespace barl
