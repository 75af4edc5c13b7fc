#include "barl/net.hpp"

#include <cmath>

#include "barl/rng.hpp"

namespace barl {

namespace {

int norm_groups(int channels) {
  for (int g : {4, 2})
    if (channels % g == 0) return g;
  return 1;
}

}  // namespace

RepAttach rep_attach_from_string(const std::string& s) {
  if (s == "rep0" || s == "enc3") return RepAttach::Enc3;
  if (s == "rep1" || s == "bottleneck") return RepAttach::Bottleneck;
  if (s == "rep2" || s == "dec3") return RepAttach::Dec3;
  if (s == "rep3" || s == "final") return RepAttach::Final;
  throw std::invalid_argument("unknown rep attachment '" + s +
                              "' (expected rep0|rep1|rep2|rep3)");
}

std::string to_string(RepAttach a) {
  switch (a) {
    case RepAttach::Enc3: return "rep0";
    case RepAttach::Bottleneck: return "rep1";
    case RepAttach::Dec3: return "rep2";
    case RepAttach::Final: return "rep3";
  }
  return "?";
}

Param& Branch::add(const std::string& name, Shape shape) {
  store_.push_back(std::make_unique<Param>(Param{name, Tensor(shape), Tensor{}, Tensor{}}));
  return *store_.back();
}

std::vector<Param*> Branch::params() {
  std::vector<Param*> out;
  out.reserve(store_.size());
  for (auto& p : store_) out.push_back(p.get());
  return out;
}

std::vector<const Param*> Branch::params() const {
  std::vector<const Param*> out;
  out.reserve(store_.size());
  for (auto& p : store_) out.push_back(p.get());
  return out;
}

Index Branch::parameter_count() const {
  Index n = 0;
  for (const auto& p : store_) n += p->value.size();
  return n;
}

Branch init_branch(uint64_t seed, const NetConfig& cfg) {
  Branch br;
  br.cfg_ = cfg;
  uint64_t counter = 0;

  auto he_conv = [&](const std::string& name, int cout, int cin, Index k, int stride) {
    Branch::Conv c;
    c.w = &br.add(name + ".w", {cout, cin, k, k, k});
    c.b = &br.add(name + ".b", {cout});
    c.stride = stride;
    Rng rng = rng_stream(seed, "init", {counter++});
    const Real std_dev = std::sqrt(2.0 / static_cast<double>(cin * k * k * k));
    for (Index i = 0; i < c.w->value.size(); ++i) c.w->value[i] = rng.normal(0.0, std_dev);
    return c;
  };
  auto make_norm = [&](const std::string& name, int channels) {
    Branch::Norm n;
    n.gamma = &br.add(name + ".g", {channels});
    n.beta = &br.add(name + ".b", {channels});
    n.gamma->value.flat().setConstant(1.0);
    n.groups = norm_groups(channels);
    return n;
  };
  auto make_block = [&](const std::string& name, int cin, int cout, int first_stride) {
    Branch::Block b;
    b.c1 = he_conv(name + ".c1", cout, cin, 3, first_stride);
    b.n1 = make_norm(name + ".n1", cout);
    b.c2 = he_conv(name + ".c2", cout, cout, 3, 1);
    b.n2 = make_norm(name + ".n2", cout);
    return b;
  };

  const auto& w = cfg.widths;
  br.enc_[0] = make_block("enc1", 1, w[0], 1);
  br.enc_[1] = make_block("enc2", w[0], w[1], 2);
  br.enc_[2] = make_block("enc3", w[1], w[2], 2);
  br.bott_ = make_block("bott", w[2], w[3], 2);
  br.dec_[0] = make_block("dec3", w[3] + w[2], w[2], 1);
  br.dec_[1] = make_block("dec2", w[2] + w[1], w[1], 1);
  br.dec_[2] = make_block("dec1", w[1] + w[0], w[0], 1);

  const int skip_ch[3] = {w[2], w[1], w[0]};   // skips consumed by dec3, dec2, dec1
  const int gating_ch[3] = {w[3], w[2], w[1]};
  for (int i = 0; i < 3; ++i) {
    const int inter = std::max(skip_ch[i] / 2, 1);
    const std::string name = "gate" + std::to_string(3 - i);
    br.gate_[i].wg = he_conv(name + ".wg", inter, gating_ch[i], 1, 1);
    br.gate_[i].wx = he_conv(name + ".wx", inter, skip_ch[i], 1, 1);
    br.gate_[i].psi = he_conv(name + ".psi", 1, inter, 1, 1);
  }

  const int head_ch[4] = {w[3], w[2], w[1], w[0]};
  for (int k = 0; k < 4; ++k)
    br.head_[k] = he_conv("head" + std::to_string(k), cfg.classes, head_ch[k], 1, 1);

  int rep_in = w[0];
  switch (cfg.rep_attach) {
    case RepAttach::Enc3: rep_in = w[2]; break;
    case RepAttach::Bottleneck: rep_in = w[3]; break;
    case RepAttach::Dec3: rep_in = w[2]; break;
    case RepAttach::Final: rep_in = w[0]; break;
  }
  br.rep1_ = he_conv("rep.c1", cfg.rep_dim, rep_in, 3, 1);
  br.rep_norm_ = make_norm("rep.n", cfg.rep_dim);
  br.rep2_ = he_conv("rep.c2", cfg.rep_dim, cfg.rep_dim, 1, 1);
  // nonzero bias keeps the per-voxel feature norm strictly positive even on
  // voxels where every ReLU unit is dead
  br.rep2_.b->value.flat().setConstant(0.01);
  return br;
}

// ---------------------------------------------------------------------------
// BoundBranch
// ---------------------------------------------------------------------------

BoundBranch::BoundBranch(ad::Tape& tape, Branch& branch) : tape_(&tape), branch_(&branch) {
  for (Param* p : branch.params()) leaves_.emplace(p, tape.leaf(p->value));
}

ad::Var BoundBranch::conv(ad::Var x, const Branch::Conv& c, ad::Padding pad) const {
  return ad::conv3d(x, leaf(c.w), leaf(c.b), c.stride, pad);
}

ad::Var BoundBranch::norm_act(ad::Var x, const Branch::Norm& n) const {
  return ad::relu(ad::group_norm(x, n.groups, leaf(n.gamma), leaf(n.beta), branch_->cfg_.gn_eps));
}

ad::Var BoundBranch::block(ad::Var x, const Branch::Block& b) const {
  return norm_act(conv(norm_act(conv(x, b.c1), b.n1), b.c2), b.n2);
}

ad::Var BoundBranch::gated_skip(ad::Var skip, ad::Var gating, const Branch::Gate& g) const {
  ad::Var a = ad::relu(ad::add(conv(gating, g.wg), conv(skip, g.wx)));
  ad::Var psi = ad::sigmoid(conv(a, g.psi));
  return ad::mul_channelmap(skip, psi);
}

ad::Var BoundBranch::rep_head(ad::Var src) const {
  ad::Var h = norm_act(conv(src, branch_->rep1_), branch_->rep_norm_);
  return conv(h, branch_->rep2_);
}

PredictionSet BoundBranch::forward(const Tensor& x) const {
  if (x.rank() != 5 || x.extent(0) != 1 || x.extent(1) != 1)
    throw ad::shape_error("forward: input must be [1,1,D,H,W], got " + shape_str(x.shape()));
  for (int axis = 2; axis < 5; ++axis)
    if (x.extent(axis) % 8 != 0)
      throw ad::shape_error("forward: spatial extents must be divisible by 8, got " +
                            shape_str(x.shape()));

  ad::Tape& t = *tape_;
  const Branch& br = *branch_;

  ad::Var in = t.constant(x);
  ad::Var e1 = block(in, br.enc_[0]);   // full res
  ad::Var e2 = block(e1, br.enc_[1]);   // /2
  ad::Var e3 = block(e2, br.enc_[2]);   // /4
  ad::Var bt = block(e3, br.bott_);     // /8

  auto decode = [&](ad::Var below, ad::Var skip, const Branch::Gate& g,
                    const Branch::Block& b) {
    ad::Var up = ad::upsample_nearest2(below);
    ad::Var sk = br.cfg_.attention_gates ? gated_skip(skip, up, g) : skip;
    return block(ad::concat_channels(up, sk), b);
  };
  ad::Var d3 = decode(bt, e3, br.gate_[0], br.dec_[0]);  // /4
  ad::Var d2 = decode(d3, e2, br.gate_[1], br.dec_[1]);  // /2
  ad::Var d1 = decode(d2, e1, br.gate_[2], br.dec_[2]);  // full res

  PredictionSet out;
  const ad::Var taps[4] = {bt, d3, d2, d1};
  for (int k = 0; k < 4; ++k)
    out.p[static_cast<size_t>(k)] = ad::softmax_channels(conv(taps[k], br.head_[k]));

  switch (br.cfg_.rep_attach) {
    case RepAttach::Enc3: out.f = rep_head(e3); out.rep_stride = 4; break;
    case RepAttach::Bottleneck: out.f = rep_head(bt); out.rep_stride = 8; break;
    case RepAttach::Dec3: out.f = rep_head(d3); out.rep_stride = 4; break;
    case RepAttach::Final: out.f = rep_head(d1); out.rep_stride = 1; break;
  }
  return out;
}

void BoundBranch::collect_gradients() {
  for (Param* p : branch_->params()) {
    const Tensor& g = leaves_.at(p).grad();
    p->grad = g.size() ? g : Tensor::zeros(p->value.shape());
  }
}

}  // namespace barl
