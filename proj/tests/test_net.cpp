#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "barl/net.hpp"
#include "oracles.hpp"

using namespace barl;
namespace o = barl::oracle;

namespace {

Tensor random_volume(Index g, uint64_t seed) {
  return o::random_tensor({1, 1, g, g, g}, seed, 0.0, 1.0);
}

}  // namespace

TEST_CASE("forward emits the four scales at the right resolutions") {
  Branch br = init_branch(1, NetConfig{});
  ad::Tape t(false);
  BoundBranch bb(t, br);
  PredictionSet ps = bb.forward(random_volume(16, 5));
  CHECK(ps.p[0].value().shape() == Shape{1, 3, 2, 2, 2});
  CHECK(ps.p[1].value().shape() == Shape{1, 3, 4, 4, 4});
  CHECK(ps.p[2].value().shape() == Shape{1, 3, 8, 8, 8});
  CHECK(ps.p[3].value().shape() == Shape{1, 3, 16, 16, 16});
  CHECK(ps.f.value().shape() == Shape{1, 16, 16, 16, 16});
  CHECK(ps.rep_stride == 1);

  // per-voxel channel sums of each scale = 1 ± 1e-9
  for (const auto& p : ps.p) {
    const Index c = p.value().extent(1);
    const Index sp = p.value().size() / c;
    for (Index v = 0; v < sp; ++v) {
      Real s = 0.0;
      for (Index ch = 0; ch < c; ++ch) s += p.value()[ch * sp + v];
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("indivisible extents are a shape error") {
  Branch br = init_branch(1, NetConfig{});
  ad::Tape t(false);
  BoundBranch bb(t, br);
  CHECK_THROWS_AS(bb.forward(o::random_tensor({1, 1, 12, 12, 12}, 1)), ad::shape_error);
}

TEST_CASE("same seed reproduces parameters; different seeds differ") {
  Branch a = init_branch(42, NetConfig{});
  Branch b = init_branch(42, NetConfig{});
  Branch c = init_branch(43, NetConfig{});
  auto pa = a.params(), pb = b.params(), pc = c.params();
  REQUIRE(pa.size() == pb.size());
  REQUIRE(pa.size() == pc.size());
  CHECK(a.parameter_count() == c.parameter_count());
  bool any_diff = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(std::memcmp(pa[i]->value.data(), pb[i]->value.data(),
                      sizeof(Real) * pa[i]->value.size()) == 0);
    if (std::memcmp(pa[i]->value.data(), pc[i]->value.data(),
                    sizeof(Real) * pa[i]->value.size()) != 0)
      any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("independently initialized branches produce different outputs") {
  Branch a = init_branch(1, NetConfig{});
  Branch b = init_branch(2, NetConfig{});
  Tensor x = random_volume(8, 7);
  ad::Tape t(false);
  PredictionSet pa = BoundBranch(t, a).forward(x);
  PredictionSet pb = BoundBranch(t, b).forward(x);
  CHECK((pa.p[3].value().flat() - pb.p[3].value().flat()).abs().maxCoeff() > 0.0);
}

TEST_CASE("zero input gives finite outputs through the bias path") {
  Branch br = init_branch(3, NetConfig{});
  ad::Tape t(false);
  PredictionSet ps = BoundBranch(t, br).forward(Tensor::zeros({1, 1, 8, 8, 8}));
  for (const auto& p : ps.p) CHECK(p.value().all_finite());
  CHECK(ps.f.value().all_finite());
}

TEST_CASE("representation head: exact dimension and nonzero norm everywhere") {
  for (RepAttach attach : {RepAttach::Enc3, RepAttach::Bottleneck, RepAttach::Dec3,
                           RepAttach::Final}) {
    NetConfig cfg;
    cfg.rep_dim = 12;
    cfg.rep_attach = attach;
    Branch br = init_branch(4, cfg);
    ad::Tape t(false);
    PredictionSet ps = BoundBranch(t, br).forward(random_volume(16, 9));
    CHECK(ps.f.value().extent(1) == 12);
    CHECK(ps.f.value().extent(2) == 16 / ps.rep_stride);
    const Index sp = ps.f.value().size() / 12;
    for (Index v = 0; v < sp; ++v) {
      Real norm2 = 0.0;
      for (Index c = 0; c < 12; ++c) {
        const Real fv = ps.f.value()[c * sp + v];
        norm2 += fv * fv;
      }
      CHECK(norm2 > 0.0);
    }
  }
}

TEST_CASE("attention gates can be disabled") {
  NetConfig plain;
  plain.attention_gates = false;
  Branch br = init_branch(5, plain);
  ad::Tape t(false);
  PredictionSet ps = BoundBranch(t, br).forward(random_volume(8, 11));
  CHECK(ps.p[3].value().all_finite());
}

TEST_CASE("gradients reach every parameter used in the step") {
  Branch br = init_branch(6, NetConfig{});
  ad::Tape t;
  BoundBranch bb(t, br);
  PredictionSet ps = bb.forward(random_volume(8, 13));
  ad::Var loss = ad::mean(ad::square(ps.f));
  for (const auto& p : ps.p) loss = ad::add(loss, ad::mean(ad::square(p)));
  t.backward(loss);
  bb.collect_gradients();
  int nonzero_params = 0;
  for (Param* p : br.params()) {
    REQUIRE(p->grad.size() == p->value.size());
    if (p->grad.flat().abs().maxCoeff() > 0.0) ++nonzero_params;
  }
  // every block feeds the full-res head; all parameters should receive signal
  CHECK(nonzero_params == static_cast<int>(br.params().size()));
}
