#include "barl/align_label.hpp"

#include <cmath>

namespace barl {

namespace {

constexpr Real kLogFloor = 1e-12;

Index voxels_of(const ad::Var& p) { return p.value().size() / p.value().extent(1); }

/// Voxel-mean KL(a || b) for channel-normalized volumes.
ad::Var kl_div(ad::Var a, ad::Var b) {
  ad::Var diff = ad::sub(ad::log_safe(a, kLogFloor), ad::log_safe(b, kLogFloor));
  return ad::scalar_mul(ad::sum(ad::mul(a, diff)), 1.0 / static_cast<Real>(voxels_of(a)));
}

std::vector<int> spatial_axes(const ad::Var& p) {
  std::vector<int> axes{0};
  for (int a = 2; a < p.value().rank(); ++a) axes.push_back(a);
  return axes;  // everything except the channel axis of [1,C,...]
}

}  // namespace

DistrTool distr_tool_from_string(const std::string& s) {
  if (s == "mse") return DistrTool::Mse;
  if (s == "kl") return DistrTool::Kl;
  throw std::invalid_argument("unknown distr tool '" + s + "' (expected mse|kl)");
}

CpsTool cps_tool_from_string(const std::string& s) {
  if (s == "ce") return CpsTool::Ce;
  if (s == "dice") return CpsTool::Dice;
  throw std::invalid_argument("unknown cps tool '" + s + "' (expected ce|dice)");
}

ad::Var soften(ad::Var p, Real temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("soften: temperature must be > 0");
  if (temperature == 1.0) return p;
  ad::Var q = ad::pow_scalar(p, 1.0 / temperature);
  return ad::mul_channelmap(q, ad::recip(ad::channel_sum(q)));
}

ad::Var cross_entropy(ad::Var p, ad::Var target) {
  ad::Var ll = ad::mul(target, ad::log_safe(p, kLogFloor));
  return ad::scalar_mul(ad::sum(ll), -1.0 / static_cast<Real>(voxels_of(p)));
}

ad::Var soft_dice_loss(ad::Var p, ad::Var target) {
  const auto axes = spatial_axes(p);
  ad::Var inter = ad::reduce(ad::mul(p, target), ad::Reduce::Sum, axes);   // [C]
  ad::Var psum = ad::reduce(p, ad::Reduce::Sum, axes);
  ad::Var tsum = ad::reduce(target, ad::Reduce::Sum, axes);
  ad::Var denom = ad::add_scalar(ad::add(psum, tsum), 1e-6);
  ad::Var dice = ad::mean(ad::div(ad::scalar_mul(inter, 2.0), denom));
  return ad::add_scalar(ad::scalar_mul(dice, -1.0), 1.0);
}

ad::Var distr_loss(const PredictionSet& s, const PredictionSet& t, Real temperature,
                   DistrTool tool) {
  ad::Var acc;
  for (size_t k = 0; k < 4; ++k) {
    if (!s.p[k].valid() || !t.p[k].valid())
      throw ad::shape_error("distr_loss: prediction sets must carry all four scales");
    ad::Var ss = soften(s.p[k], temperature);
    ad::Var st = soften(t.p[k], temperature);
    ad::Var term;
    if (tool == DistrTool::Mse) {
      term = ad::mean(ad::square(ad::sub(ss, st)));
    } else {
      term = ad::scalar_mul(ad::add(kl_div(ss, st), kl_div(st, ss)), 0.5);
    }
    acc = k == 0 ? term : ad::add(acc, term);
  }
  return ad::scalar_mul(acc, 0.25);
}

ad::Var deep_cps_loss(const PredictionSet& s, const PredictionSet& t, CpsTool tool) {
  ad::Tape& tape = *s.p[0].tape();
  ad::Var acc;
  for (size_t k = 0; k < 4; ++k) {
    const Tensor& pv_s = s.p[k].value();
    const Tensor& pv_t = t.p[k].value();
    const int classes = static_cast<int>(pv_s.extent(1));
    auto pseudo = [&](const Tensor& src) {
      const Tensor sq = src.reshaped({src.extent(1), src.extent(2), src.extent(3), src.extent(4)});
      Tensor oh = ad::one_hot(ad::argmax_channels(sq), classes);
      Shape shp = src.shape();
      return tape.constant(oh.reshaped(shp));  // detached hard label
    };
    ad::Var hat_t = pseudo(pv_t);
    ad::Var hat_s = pseudo(pv_s);
    ad::Var term;
    if (tool == CpsTool::Ce) {
      term = ad::add(cross_entropy(s.p[k], hat_t), cross_entropy(t.p[k], hat_s));
    } else {
      term = ad::add(soft_dice_loss(s.p[k], hat_t), soft_dice_loss(t.p[k], hat_s));
    }
    acc = k == 0 ? term : ad::add(acc, term);
  }
  return ad::scalar_mul(acc, 0.25);
}

ad::Var entropy_loss(ad::Var p) {
  ad::Var plogp = ad::mul(p, ad::log_safe(p, kLogFloor));
  return ad::scalar_mul(ad::sum(plogp), -1.0 / static_cast<Real>(voxels_of(p)));
}

ad::Var kl_prior_loss(ad::Var p, const std::vector<double>& prior) {
  const Index classes = p.value().extent(1);
  if (static_cast<Index>(prior.size()) != classes)
    throw ad::shape_error("kl_prior_loss: prior size does not match the class count");
  ad::Var pbar = ad::reduce(p, ad::Reduce::Mean, spatial_axes(p));  // [C]
  Tensor log_q({classes});
  for (Index c = 0; c < classes; ++c) {
    if (prior[static_cast<size_t>(c)] <= 0.0)
      throw std::invalid_argument("kl_prior_loss: prior entries must be positive");
    log_q[c] = std::log(prior[static_cast<size_t>(c)]);
  }
  ad::Var diff = ad::sub(ad::log_safe(pbar, kLogFloor), p.tape()->constant(log_q));
  return ad::sum(ad::mul(pbar, diff));
}

ad::Var dpr_combine(ad::Var distr, ad::Var cps, ad::Var ent, ad::Var kl, Real lambda_ent,
                    Real lambda_kl) {
  if (lambda_ent < 0.0 || lambda_kl < 0.0)
    throw std::invalid_argument("dpr: lambda weights must be nonnegative");
  ad::Var im = ad::add(ad::scalar_mul(ent, lambda_ent), ad::scalar_mul(kl, lambda_kl));
  return ad::add(ad::add(distr, cps), im);
}

DprLoss dpr_loss(ad::Tape& tape, const PredictionSet& s, const PredictionSet& t,
                 const std::vector<double>& prior, const LabelLossConfig& cfg, bool include_im) {
  DprLoss out;
  out.distr = distr_loss(s, t, cfg.temperature, cfg.distr_tool);
  out.cps = deep_cps_loss(s, t, cfg.cps_tool);
  if (include_im) {
    if (cfg.ent_both_branches) {
      out.ent = ad::scalar_mul(ad::add(entropy_loss(s.p[3]), entropy_loss(t.p[3])), 0.5);
      out.kl = ad::scalar_mul(
          ad::add(kl_prior_loss(s.p[3], prior), kl_prior_loss(t.p[3], prior)), 0.5);
    } else {
      out.ent = entropy_loss(s.p[3]);
      out.kl = kl_prior_loss(s.p[3], prior);
    }
  } else {
    out.ent = tape.constant(Tensor::scalar(0.0));
    out.kl = tape.constant(Tensor::scalar(0.0));
  }
  out.total = dpr_combine(out.distr, out.cps, out.ent, out.kl, cfg.lambda_ent, cfg.lambda_kl);
  return out;
}

ad::Var pcbc_loss(ad::Var p_s, ad::Var p_t, const Tensor& y_onehot, Real eps) {
  const Tensor& ps = p_s.value();
  if (!ps.same_shape(p_t.value()))
    throw ad::shape_error("pcbc_loss: branch shapes differ");
  const Index classes = ps.extent(1);
  const Index sp = ps.size() / classes;
  if (y_onehot.size() != ps.size())
    throw ad::shape_error("pcbc_loss: label volume does not match predictions");
  // ground truth must be one-hot per voxel
  for (Index v = 0; v < sp; ++v) {
    Real sum = 0.0;
    for (Index c = 0; c < classes; ++c) {
      const Real yv = y_onehot[c * sp + v];
      if (yv != 0.0 && yv != 1.0)
        throw std::invalid_argument("pcbc_loss: label volume is not one-hot");
      sum += yv;
    }
    if (sum != 1.0) throw std::invalid_argument("pcbc_loss: label volume is not one-hot");
  }

  ad::Tape& tape = *p_s.tape();
  // U_p is a pure function of the forward values: computing it outside the
  // tape detaches it exactly.
  Shape map_shape = ps.shape();
  map_shape[1] = 1;
  Tensor u(map_shape);
  Real u_sum = 0.0;
  for (Index v = 0; v < sp; ++v) {
    Real acc = 0.0;
    for (Index c = 0; c < classes; ++c)
      acc += std::fabs(ps[c * sp + v] - p_t.value()[c * sp + v]);
    u[v] = acc;
    u_sum += acc;
  }

  ad::Var y = tape.constant(y_onehot.reshaped(ps.shape()));
  ad::Var err = ad::add(ad::channel_sum(ad::square(ad::sub(p_s, y))),
                        ad::channel_sum(ad::square(ad::sub(p_t, y))));
  ad::Var weighted = ad::sum(ad::mul(err, tape.constant(std::move(u))));
  return ad::scalar_mul(weighted, 1.0 / (u_sum + eps));
}

ad::Var seg_loss(ad::Var p, const Tensor& y_onehot) {
  ad::Var y = p.tape()->constant(y_onehot.reshaped(p.value().shape()));
  return ad::add(cross_entropy(p, y), soft_dice_loss(p, y));
}

TotalLoss total_loss(ad::Var region, ad::Var instance, ad::Var dpr, ad::Var pcbc, ad::Var seg,
                     Real rep_weight) {
  TotalLoss out;
  const std::pair<const char*, ad::Var> parts[] = {
      {"l_region", region}, {"l_instance", instance}, {"l_dpr", dpr},
      {"l_pcbc", pcbc},     {"l_seg", seg}};
  for (const auto& [name, v] : parts) {
    const Real x = v.item();
    if (!std::isfinite(x))
      throw ad::numeric_error(std::string("total_loss: component ") + name + " is non-finite");
    out.breakdown[name] = x;
  }
  ad::Var rep = ad::scalar_mul(ad::add(region, instance), rep_weight);
  out.value = ad::add(ad::add(rep, dpr), ad::add(pcbc, seg));
  out.breakdown["total"] = out.value.item();
  if (!std::isfinite(out.breakdown["total"]))
    throw ad::numeric_error("total_loss: total is non-finite");
  return out;
}

Tensor labels_to_onehot(const IntVolume& labels, int classes) {
  return ad::one_hot(labels, classes);
}

}  // namespace barl
