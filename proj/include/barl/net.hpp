#pragma once

#include <array>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "barl/autodiff.hpp"

namespace barl {

/// Where the representation head taps the backbone (the rep0..rep3 axis).
enum class RepAttach { Enc3, Bottleneck, Dec3, Final };

RepAttach rep_attach_from_string(const std::string& s);
std::string to_string(RepAttach a);

struct NetConfig {
  int classes = 3;
  std::array<int, 4> widths = {8, 16, 32, 64};  // encoder levels + bottleneck
  int rep_dim = 16;
  RepAttach rep_attach = RepAttach::Final;
  bool attention_gates = true;
  Real gn_eps = 1e-5;
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;  // written back after each backward pass
  Tensor vel;   // optimizer momentum buffer
};

/// Multi-scale class probabilities plus the representation volume for one
/// branch/view. p[3] is the full-resolution output; p[0] the coarsest.
struct PredictionSet {
  std::array<ad::Var, 4> p;
  ad::Var f;
  /// Spatial downsampling factor of f relative to the input volume.
  int rep_stride = 1;
};

/// One encoder-decoder with auxiliary heads and a representation head.
/// The two branches of the co-training pair are two independent instances.
class Branch {
 public:
  Branch() = default;
  Branch(const Branch&) = delete;
  Branch& operator=(const Branch&) = delete;
  Branch(Branch&&) = default;
  Branch& operator=(Branch&&) = default;

  const NetConfig& config() const { return cfg_; }
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  Index parameter_count() const;

  friend Branch init_branch(uint64_t seed, const NetConfig& cfg);
  friend class BoundBranch;

 private:
  struct Conv {
    Param *w = nullptr, *b = nullptr;
    int stride = 1;
  };
  struct Norm {
    Param *gamma = nullptr, *beta = nullptr;
    int groups = 1;
  };
  struct Block {
    Conv c1, c2;
    Norm n1, n2;
  };
  struct Gate {
    Conv wg, wx, psi;
  };

  Param& add(const std::string& name, Shape shape);

  NetConfig cfg_;
  std::vector<std::unique_ptr<Param>> store_;
  Block enc_[3], bott_, dec_[3];
  Gate gate_[3];
  Conv head_[4];       // k = 0..3
  Conv rep1_, rep2_;   // representation head convs
  Norm rep_norm_;
};

Branch init_branch(uint64_t seed, const NetConfig& cfg);

/// Per-tape leaf handles for one branch. Bind once per step and reuse for
/// every forward on that tape so gradients accumulate on a single leaf per
/// parameter.
class BoundBranch {
 public:
  BoundBranch(ad::Tape& tape, Branch& branch);

  PredictionSet forward(const Tensor& x) const;  // x: [1,1,D,H,W], extents divisible by 8

  /// After backward: copies leaf gradients into Param::grad (zeros for
  /// parameters the step never touched).
  void collect_gradients();

  Branch& branch() const { return *branch_; }

 private:
  ad::Var leaf(const Param* p) const { return leaves_.at(p); }
  ad::Var conv(ad::Var x, const Branch::Conv& c, ad::Padding pad = ad::Padding::Same) const;
  ad::Var norm_act(ad::Var x, const Branch::Norm& n) const;
  ad::Var block(ad::Var x, const Branch::Block& b) const;
  ad::Var gated_skip(ad::Var skip, ad::Var gating, const Branch::Gate& g) const;
  ad::Var rep_head(ad::Var src) const;

  ad::Tape* tape_;
  Branch* branch_;
  std::unordered_map<const Param*, ad::Var> leaves_;
};

}  // namespace barl
