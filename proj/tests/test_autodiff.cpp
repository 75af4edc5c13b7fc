#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "barl/autodiff.hpp"
#include "barl/gradcheck.hpp"
#include "barl/rng.hpp"
#include "oracles.hpp"

using namespace barl;
namespace o = barl::oracle;

namespace {

/// Weighted sum of an op's output against a fixed random cotangent, so the
/// finite-difference check exercises the full Jacobian.
ad::Var weigh(ad::Tape& t, ad::Var y, uint64_t seed) {
  Tensor r = o::random_tensor(y.value().shape(), seed);
  return ad::sum(ad::mul(y, t.constant(std::move(r))));
}

}  // namespace

TEST_CASE("conv3d: scalar kernel scales input") {
  ad::Tape t;
  ad::Var x = t.constant(Tensor::full({1, 1, 3, 3, 3}, 1.0));
  ad::Var w = t.constant(Tensor::full({1, 1, 1, 1, 1}, 2.0));
  ad::Var b = t.constant(Tensor::zeros({1}));
  ad::Var y = ad::conv3d(x, w, b, 1, ad::Padding::Same);
  for (Index i = 0; i < y.value().size(); ++i) CHECK(y.value()[i] == doctest::Approx(2.0));
}

TEST_CASE("conv3d: impulse response is the kernel reversed about its centre") {
  ad::Tape t;
  Tensor x = Tensor::zeros({1, 1, 5, 5, 5});
  x.at({0, 0, 2, 2, 2}) = 1.0;
  Tensor k = o::random_tensor({1, 1, 3, 3, 3}, 11);
  ad::Var y = ad::conv3d(t.constant(x), t.constant(k), t.constant(Tensor::zeros({1})), 1,
                         ad::Padding::Same);
  for (Index dz = -1; dz <= 1; ++dz)
    for (Index dy = -1; dy <= 1; ++dy)
      for (Index dx = -1; dx <= 1; ++dx)
        CHECK(y.value().at({0, 0, 2 + dz, 2 + dy, 2 + dx}) ==
              doctest::Approx(k.at({0, 0, 1 - dz, 1 - dy, 1 - dx})).epsilon(1e-12));
}

TEST_CASE("conv3d: random case matches the nested-loop oracle") {
  Tensor x = o::random_tensor({1, 2, 4, 4, 4}, 21);
  Tensor w = o::random_tensor({3, 2, 3, 3, 3}, 22);
  Tensor b = o::random_tensor({3}, 23);
  for (int stride : {1, 2}) {
    for (ad::Padding pad : {ad::Padding::Same, ad::Padding::Valid}) {
      ad::Tape t;
      ad::Var y = ad::conv3d(t.constant(x), t.constant(w), t.constant(b), stride, pad);
      Tensor ref = o::conv3d_naive(x, w, b, stride, pad);
      REQUIRE(y.value().shape() == ref.shape());
      for (Index i = 0; i < ref.size(); ++i)
        CHECK(std::fabs(y.value()[i] - ref[i]) < 1e-12);
    }
  }
}

TEST_CASE("conv3d: shape errors name the offending axes") {
  ad::Tape t;
  ad::Var x = t.constant(Tensor::zeros({1, 2, 4, 4, 4}));
  ad::Var w = t.constant(Tensor::zeros({3, 3, 3, 3, 3}));
  ad::Var b = t.constant(Tensor::zeros({3}));
  CHECK_THROWS_WITH_AS(ad::conv3d(x, w, b, 1, ad::Padding::Same),
                       doctest::Contains("channel axis"), ad::shape_error);
  ad::Var small = t.constant(Tensor::zeros({1, 2, 2, 4, 4}));
  ad::Var w2 = t.constant(Tensor::zeros({3, 2, 3, 3, 3}));
  CHECK_THROWS_AS(ad::conv3d(small, w2, b, 1, ad::Padding::Valid), ad::shape_error);
}

TEST_CASE("conv3d gradients match finite differences") {
  GradCheckOptions opt;
  opt.max_coords = 40;
  for (int stride : {1, 2}) {
    auto rep = check_gradients(
        [stride](ad::Tape& t, const std::vector<ad::Var>& v) {
          return weigh(t, ad::conv3d(v[0], v[1], v[2], stride, ad::Padding::Same), 77);
        },
        {o::random_tensor({1, 2, 4, 4, 4}, 31), o::random_tensor({2, 2, 3, 3, 3}, 32),
         o::random_tensor({2}, 33)},
        opt);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("upsample_nearest2 replicates blocks and sums gradients") {
  Tensor x = o::random_tensor({1, 1, 2, 2, 2}, 41);
  ad::Tape t;
  ad::Var xv = t.leaf(x);
  ad::Var y = ad::upsample_nearest2(xv);
  REQUIRE(y.value().shape() == Shape{1, 1, 4, 4, 4});
  for (Index z = 0; z < 4; ++z)
    for (Index yy = 0; yy < 4; ++yy)
      for (Index xx = 0; xx < 4; ++xx)
        CHECK(y.value().at({0, 0, z, yy, xx}) == x.at({0, 0, z / 2, yy / 2, xx / 2}));
  t.backward(ad::sum(y));
  for (Index i = 0; i < x.size(); ++i) CHECK(xv.grad()[i] == doctest::Approx(8.0));
}

TEST_CASE("upsample then corner-downsample is the identity") {
  Tensor x = o::random_tensor({1, 2, 3, 3, 3}, 43);
  ad::Tape t;
  ad::Var y = ad::upsample_nearest2(t.constant(x));
  for (Index c = 0; c < 2; ++c)
    for (Index z = 0; z < 3; ++z)
      for (Index yy = 0; yy < 3; ++yy)
        for (Index xx = 0; xx < 3; ++xx)
          CHECK(y.value().at({0, c, 2 * z, 2 * yy, 2 * xx}) == x.at({0, c, z, yy, xx}));
}

TEST_CASE("softmax_channels closed forms") {
  ad::Tape t;
  Tensor logits = Tensor::zeros({1, 2, 1, 1, 1});
  ad::Var p = ad::softmax_channels(t.constant(logits));
  CHECK(p.value()[0] == doctest::Approx(0.5).epsilon(1e-12));

  logits.at({0, 0, 0, 0, 0}) = std::log(3.0);
  ad::Var q = ad::softmax_channels(t.constant(logits));
  CHECK(q.value()[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(q.value()[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax_channels sums to one and rejects non-finite input") {
  Tensor logits = o::random_tensor({1, 4, 2, 2, 2}, 51, -30.0, 30.0);
  ad::Tape t;
  ad::Var p = ad::softmax_channels(t.constant(logits));
  const Index sp = 8;
  for (Index v = 0; v < sp; ++v) {
    Real s = 0.0;
    for (Index c = 0; c < 4; ++c) s += p.value()[c * sp + v];
    CHECK(std::fabs(s - 1.0) < 1e-9);
  }
  Tensor bad = logits;
  bad[0] = std::numeric_limits<Real>::quiet_NaN();
  CHECK_THROWS_AS(ad::softmax_channels(t.constant(bad)), ad::numeric_error);
}

TEST_CASE("softmax_channels Jacobian matches finite differences") {
  auto rep = check_gradients(
      [](ad::Tape& t, const std::vector<ad::Var>& v) {
        return weigh(t, ad::softmax_channels(v[0]), 99);
      },
      {o::random_tensor({1, 3, 2, 2, 2}, 52)}, {.h = 1e-5, .max_coords = -1});
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("elementwise closed forms") {
  ad::Tape t;
  ad::Var x = t.constant(Tensor::from({2}, {-1.0, 2.0}));
  ad::Var r = ad::relu(x);
  CHECK(r.value()[0] == 0.0);
  CHECK(r.value()[1] == 2.0);

  ad::Var gamma = t.constant(Tensor::full({4}, 1.0));
  ad::Var beta = t.constant(Tensor::zeros({4}));
  ad::Var c = t.constant(Tensor::full({1, 4, 2, 2, 2}, 3.7));
  ad::Var gn = ad::group_norm(c, 2, gamma, beta, 1e-5);
  for (Index i = 0; i < gn.value().size(); ++i) CHECK(gn.value()[i] == doctest::Approx(0.0));
}

TEST_CASE("elementwise suite gradients match finite differences") {
  GradCheckOptions opt;
  opt.max_coords = -1;
  Tensor a = o::random_tensor({2, 3}, 61);
  Tensor b = o::random_tensor({2, 3}, 62, 0.5, 2.0);  // positive: safe for div/log/sqrt
  using Build = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;
  std::vector<std::pair<const char*, Build>> cases = {
      {"add", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::add(v[0], v[1]), 1); }},
      {"sub", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::sub(v[0], v[1]), 2); }},
      {"mul", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::mul(v[0], v[1]), 3); }},
      {"div", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::div(v[0], v[1]), 4); }},
      {"relu", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::relu(v[0]), 5); }},
      {"sigmoid", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::sigmoid(v[0]), 6); }},
      {"square", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::square(v[0]), 7); }},
      {"abs", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::abs(v[0]), 8); }},
      {"scalar_mul", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::scalar_mul(v[0], -1.7), 9); }},
      {"sqrt", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::sqrt(v[1]), 10); }},
      {"recip", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::recip(v[1]), 11); }},
      {"log_safe", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::log_safe(v[1], 1e-12), 12); }},
      {"pow_scalar", [](ad::Tape& t, const std::vector<ad::Var>& v) { return weigh(t, ad::pow_scalar(v[1], 1.0 / 0.7), 13); }},
  };
  for (auto& [name, build] : cases) {
    INFO(name);
    auto rep = check_gradients(build, {a, b}, opt);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("group_norm gradients match finite differences") {
  auto rep = check_gradients(
      [](ad::Tape& t, const std::vector<ad::Var>& v) {
        return weigh(t, ad::group_norm(v[0], 2, v[1], v[2], 1e-5), 14);
      },
      {o::random_tensor({2, 4, 2, 2, 2}, 71), o::random_tensor({4}, 72, 0.5, 1.5),
       o::random_tensor({4}, 73)},
      {.h = 1e-5, .max_coords = 60});
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("reduce: closed forms and mixed-axis oracle") {
  ad::Tape t;
  ad::Var x = t.constant(Tensor::from({3}, {1.0, 2.0, 3.0}));
  CHECK(ad::mean(x).item() == doctest::Approx(2.0));

  // sum backward -> all-ones gradient
  ad::Tape t2;
  ad::Var y = t2.leaf(o::random_tensor({2, 3, 4}, 81));
  t2.backward(ad::sum(y));
  for (Index i = 0; i < y.value().size(); ++i) CHECK(y.grad()[i] == 1.0);

  // mixed-axis reduction vs naive loop
  Tensor v = o::random_tensor({2, 3, 4}, 82);
  ad::Tape t3;
  ad::Var r = ad::reduce(t3.constant(v), ad::Reduce::Sum, {0, 2});
  REQUIRE(r.value().shape() == Shape{3});
  for (Index j = 0; j < 3; ++j) {
    Real acc = 0.0;
    for (Index i = 0; i < 2; ++i)
      for (Index k = 0; k < 4; ++k) acc += v.at({i, j, k});
    CHECK(r.value()[j] == doctest::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("reduce gradients match finite differences") {
  for (auto kind : {ad::Reduce::Sum, ad::Reduce::Mean}) {
    auto rep = check_gradients(
        [kind](ad::Tape& t, const std::vector<ad::Var>& v) {
          return weigh(t, ad::reduce(v[0], kind, {1}), 15);
        },
        {o::random_tensor({2, 3, 4}, 83)}, {.h = 1e-5, .max_coords = -1});
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("masked_mean matches the loop oracle and differentiates") {
  Tensor f = o::random_tensor({3, 4, 4, 4}, 91);
  ByteMask m = o::random_mask({4, 4, 4}, 92, 0.4);
  m[0] = 1;  // ensure non-empty
  ad::Tape t;
  ad::Var y = ad::masked_mean(t.constant(f), m);
  auto ref = o::masked_mean_naive(f, m);
  for (Index c = 0; c < 3; ++c) CHECK(std::fabs(y.value()[c] - ref[static_cast<size_t>(c)]) < 1e-12);

  auto rep = check_gradients(
      [&m](ad::Tape& tp, const std::vector<ad::Var>& v) {
        return weigh(tp, ad::masked_mean(v[0], m), 16);
      },
      {f}, {.h = 1e-5, .max_coords = 80});
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("concat/mul_channelmap/channel_sum/reshape gradients") {
  GradCheckOptions opt;
  opt.max_coords = 60;
  auto rep = check_gradients(
      [](ad::Tape& t, const std::vector<ad::Var>& v) {
        ad::Var cat = ad::concat_channels(v[0], v[1]);
        ad::Var scaled = ad::mul_channelmap(cat, v[2]);
        ad::Var cs = ad::channel_sum(scaled);
        return weigh(t, ad::reshape(cs, {8}), 17);
      },
      {o::random_tensor({1, 2, 2, 2, 2}, 93), o::random_tensor({1, 3, 2, 2, 2}, 94),
       o::random_tensor({1, 1, 2, 2, 2}, 95)},
      opt);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("backward: closed-form leaf gradients") {
  // root = sum(x ⊙ x) -> grad = 2x
  Tensor x = o::random_tensor({5}, 101);
  ad::Tape t;
  ad::Var xv = t.leaf(x);
  t.backward(ad::sum(ad::mul(xv, xv)));
  for (Index i = 0; i < 5; ++i) CHECK(xv.grad()[i] == doctest::Approx(2.0 * x[i]).epsilon(1e-12));
}

TEST_CASE("backward: non-scalar root and double backward are errors") {
  ad::Tape t;
  ad::Var x = t.leaf(o::random_tensor({3}, 102));
  CHECK_THROWS_AS(t.backward(x), ad::shape_error);

  ad::Tape t2;
  ad::Var y = t2.leaf(o::random_tensor({3}, 103));
  ad::Var s = ad::sum(y);
  t2.backward(s);
  CHECK_THROWS_AS(t2.backward(s), std::logic_error);
}

TEST_CASE("backward linearity: grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)") {
  Tensor x = o::random_tensor({6}, 104);
  const Real a = 1.3, b = -0.7;
  auto grad_of = [&x](auto make_loss) {
    ad::Tape t;
    ad::Var xv = t.leaf(x);
    t.backward(make_loss(t, xv));
    return xv.grad();
  };
  auto l1 = [](ad::Tape& t, ad::Var v) { return ad::sum(ad::square(v)); };
  auto l2 = [](ad::Tape& t, ad::Var v) { return ad::sum(ad::sigmoid(v)); };
  Tensor g1 = grad_of(l1);
  Tensor g2 = grad_of(l2);
  Tensor gc = grad_of([&](ad::Tape& t, ad::Var v) {
    return ad::add(ad::scalar_mul(l1(t, v), a), ad::scalar_mul(l2(t, v), b));
  });
  for (Index i = 0; i < 6; ++i)
    CHECK(std::fabs(gc[i] - (a * g1[i] + b * g2[i])) < 1e-12);
}

TEST_CASE("determinism: identical inputs give bitwise-identical outputs and gradients") {
  auto run = [] {
    Tensor x = o::random_tensor({1, 2, 4, 4, 4}, 105);
    Tensor w = o::random_tensor({2, 2, 3, 3, 3}, 106);
    ad::Tape t;
    ad::Var xv = t.leaf(x);
    ad::Var y = ad::conv3d(xv, t.leaf(w), t.constant(Tensor::zeros({2})), 1, ad::Padding::Same);
    ad::Var loss = ad::sum(ad::square(ad::relu(y)));
    t.backward(loss);
    return std::pair<Real, Tensor>(loss.item(), xv.grad());
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(std::memcmp(&l1, &l2, sizeof(Real)) == 0);
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), sizeof(Real) * g1.size()) == 0);
}

TEST_CASE("detach blocks gradient flow") {
  ad::Tape t;
  ad::Var x = t.leaf(o::random_tensor({4}, 107));
  ad::Var d = ad::detach(ad::square(x));
  ad::Var loss = ad::sum(ad::mul(d, x));
  t.backward(loss);
  // d(loss)/dx through the detached square path must be absent: grad = d only
  for (Index i = 0; i < 4; ++i)
    CHECK(x.grad()[i] == doctest::Approx(d.value()[i]).epsilon(1e-12));
}

TEST_CASE("argmax/one_hot helpers") {
  Tensor p = Tensor::from({2, 1, 1, 2}, {0.6, 0.2, 0.4, 0.8});
  IntVolume am = ad::argmax_channels(p);
  CHECK(am[0] == 0);
  CHECK(am[1] == 1);
  Tensor oh = ad::one_hot(am, 2);
  CHECK(oh[0] == 1.0);
  CHECK(oh[1] == 0.0);
  CHECK(oh[2] == 0.0);
  CHECK(oh[3] == 1.0);
}
