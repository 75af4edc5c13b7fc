#include "barl/align_rep.hpp"

namespace barl {

namespace {

/// [1,C,d,h,w] feature volume as [C,d,h,w] for masked pooling.
ad::Var squeeze_batch(ad::Var f) {
  Shape s = f.value().shape();
  return ad::reshape(f, {s[1], s[2], s[3], s[4]});
}

Index mask_count(const ByteMask& m) {
  Index n = 0;
  for (Index i = 0; i < m.size(); ++i) n += m[i];
  return n;
}

}  // namespace

ad::Var cosine_distance(ad::Var a, ad::Var b) {
  const Real eps = 1e-30;
  ad::Var dot = ad::sum(ad::mul(a, b));
  ad::Var na = ad::sqrt(ad::add_scalar(ad::sum(ad::square(a)), eps));
  ad::Var nb = ad::sqrt(ad::add_scalar(ad::sum(ad::square(b)), eps));
  ad::Var cos = ad::div(dot, ad::mul(na, nb));
  return ad::add_scalar(ad::scalar_mul(cos, -1.0), 1.0);
}

ByteMask class_mask(const IntVolume& labels, int cls) {
  ByteMask m(labels.shape());
  for (Index i = 0; i < labels.size(); ++i) m[i] = labels[i] == cls ? 1 : 0;
  return m;
}

ByteMask downsample_mask(const ByteMask& m, int stride) {
  if (stride == 1) return m;
  const Index d = m.extent(0), h = m.extent(1), w = m.extent(2);
  ByteMask out({d / stride, h / stride, w / stride});
  for (Index z = 0; z < d / stride; ++z)
    for (Index y = 0; y < h / stride; ++y)
      for (Index x = 0; x < w / stride; ++x)
        out[(z * (h / stride) + y) * (w / stride) + x] =
            m[((z * stride) * h + y * stride) * w + x * stride];
  return out;
}

PrototypeSet region_prototypes(ad::Var f_s, ad::Var f_t, const Tensor& p_s_full,
                               const Tensor& p_t_full, int classes, int rep_stride,
                               const AlignConfig& cfg) {
  ad::Var fs = squeeze_batch(f_s);
  ad::Var ft = cfg.stop_grad_t ? ad::detach(squeeze_batch(f_t)) : squeeze_batch(f_t);

  const Tensor ps = p_s_full.reshaped({p_s_full.extent(1), p_s_full.extent(2),
                                       p_s_full.extent(3), p_s_full.extent(4)});
  const Tensor pt = p_t_full.reshaped({p_t_full.extent(1), p_t_full.extent(2),
                                       p_t_full.extent(3), p_t_full.extent(4)});
  const IntVolume m_s = ad::argmax_channels(ps);
  const IntVolume m_t = ad::argmax_channels(pt);

  PrototypeSet set;
  set.region_r.resize(static_cast<size_t>(classes));
  set.region_r_tilde.resize(static_cast<size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    const ByteMask mask_s = downsample_mask(class_mask(m_s, c), rep_stride);
    const ByteMask mask_t = downsample_mask(class_mask(m_t, c), rep_stride);
    // R_c: mask from the S branch; R~_c: mask from the T branch. Cross
    // pooling swaps which branch's features are averaged under each mask.
    if (mask_count(mask_s) > 0)
      set.region_r[static_cast<size_t>(c)] =
          ad::masked_mean(cfg.cross_pool ? ft : fs, mask_s);
    if (mask_count(mask_t) > 0)
      set.region_r_tilde[static_cast<size_t>(c)] =
          ad::masked_mean(cfg.cross_pool ? fs : ft, mask_t);
  }
  return set;
}

LossTerm region_loss(ad::Tape& tape, const PrototypeSet& protos) {
  LossTerm term;
  ad::Var acc;
  for (size_t c = 0; c < protos.region_r.size(); ++c) {
    if (!protos.region_r[c] || !protos.region_r_tilde[c]) continue;
    ad::Var d = cosine_distance(*protos.region_r[c], *protos.region_r_tilde[c]);
    acc = term.terms == 0 ? d : ad::add(acc, d);
    ++term.terms;
  }
  if (term.terms == 0) {
    term.value = tape.constant(Tensor::scalar(0.0));
    term.skipped = true;
  } else {
    term.value = ad::scalar_mul(acc, 1.0 / term.terms);
  }
  return term;
}

PrototypeSet instance_prototypes(ad::Var f_s, ad::Var f_t, const Tensor& p_t_full, int classes,
                                 int rep_stride, const AlignConfig& cfg) {
  ad::Var fs = squeeze_batch(f_s);
  ad::Var ft = cfg.stop_grad_t ? ad::detach(squeeze_batch(f_t)) : squeeze_batch(f_t);

  const Tensor pt = p_t_full.reshaped({p_t_full.extent(1), p_t_full.extent(2),
                                       p_t_full.extent(3), p_t_full.extent(4)});
  const IntVolume m_t = ad::argmax_channels(pt);
  const Shape rep_grid = {pt.extent(1) / rep_stride, pt.extent(2) / rep_stride,
                          pt.extent(3) / rep_stride};

  PrototypeSet set;
  set.instance_pairs.resize(static_cast<size_t>(classes));
  for (int c = 1; c < classes; ++c) {  // lesion classes only
    const ByteMask mask = downsample_mask(class_mask(m_t, c), rep_stride);
    auto comps = filter_by_volume(connected_components(mask, cfg.connectivity), cfg.tau_vol);
    for (const auto& inst : comps) {
      const ByteMask im = inst.to_mask(rep_grid);
      set.instance_pairs[static_cast<size_t>(c)].emplace_back(ad::masked_mean(fs, im),
                                                              ad::masked_mean(ft, im));
    }
  }
  return set;
}

LossTerm instance_loss(ad::Tape& tape, const PrototypeSet& protos) {
  LossTerm term;
  ad::Var acc;
  int classes_used = 0;
  for (const auto& pairs : protos.instance_pairs) {
    if (pairs.empty()) continue;
    ad::Var cls_acc;
    for (size_t j = 0; j < pairs.size(); ++j) {
      ad::Var d = cosine_distance(pairs[j].first, pairs[j].second);
      cls_acc = j == 0 ? d : ad::add(cls_acc, d);
      ++term.terms;
    }
    ad::Var cls_mean = ad::scalar_mul(cls_acc, 1.0 / static_cast<Real>(pairs.size()));
    acc = classes_used == 0 ? cls_mean : ad::add(acc, cls_mean);
    ++classes_used;
  }
  if (classes_used == 0) {
    term.value = tape.constant(Tensor::scalar(0.0));
    term.skipped = true;
  } else {
    term.value = ad::scalar_mul(acc, 1.0 / classes_used);
  }
  return term;
}

}  // namespace barl
