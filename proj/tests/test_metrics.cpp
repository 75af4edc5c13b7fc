#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "barl/metrics.hpp"
#include "barl/rng.hpp"
#include "oracles.hpp"

using namespace barl;
namespace o = barl::oracle;

namespace {

IntVolume mask_to_labels(const ByteMask& m) {
  IntVolume v(m.shape());
  for (Index i = 0; i < m.size(); ++i) v[i] = m[i];
  return v;
}

}  // namespace

TEST_CASE("dice/jaccard closed forms") {
  ByteMask a({4, 4, 4}), b({4, 4, 4});
  // identical masks
  for (Index i = 0; i < 10; ++i) a[i] = b[i] = 1;
  auto [d1, j1] = dice_jaccard(mask_to_labels(a), mask_to_labels(b), 1);
  CHECK(d1 == 1.0);
  CHECK(j1 == 1.0);

  // disjoint non-empty masks
  ByteMask c({4, 4, 4});
  for (Index i = 20; i < 30; ++i) c[i] = 1;
  auto [d2, j2] = dice_jaccard(mask_to_labels(a), mask_to_labels(c), 1);
  CHECK(d2 == 0.0);
  CHECK(j2 == 0.0);

  // |A|=|B|=8, |A∩B|=4 -> Dice 0.5, Jaccard 1/3
  ByteMask p({4, 4, 4}), q({4, 4, 4});
  for (Index i = 0; i < 8; ++i) p[i] = 1;
  for (Index i = 4; i < 12; ++i) q[i] = 1;
  auto [d3, j3] = dice_jaccard(mask_to_labels(p), mask_to_labels(q), 1);
  CHECK(d3 == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(j3 == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // both empty -> (1, 1) by convention
  ByteMask e({4, 4, 4}), f({4, 4, 4});
  auto [d4, j4] = dice_jaccard(mask_to_labels(e), mask_to_labels(f), 1);
  CHECK(d4 == 1.0);
  CHECK(j4 == 1.0);

  CHECK_THROWS_AS(dice_jaccard(IntVolume({2, 2, 2}), IntVolume({4, 4, 4}), 1),
                  std::invalid_argument);
}

TEST_CASE("surface distances closed forms") {
  ByteMask a({8, 8, 8}), b({8, 8, 8});
  a.at({2, 2, 2}) = 1;
  b.at({2, 2, 2}) = 1;
  auto [h0, s0] = surface_distances(mask_to_labels(a), mask_to_labels(b), 1);
  CHECK(h0 == 0.0);
  CHECK(s0 == 0.0);

  // two single-voxel masks 3 voxels apart on one axis -> (3, 3)
  ByteMask c({8, 8, 8});
  c.at({2, 2, 5}) = 1;
  auto [h1, s1] = surface_distances(mask_to_labels(a), mask_to_labels(c), 1);
  CHECK(h1 == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(s1 == doctest::Approx(3.0).epsilon(1e-12));

  // empty surface -> infinity, flagged
  ByteMask e({8, 8, 8});
  auto [h2, s2] = surface_distances(mask_to_labels(a), mask_to_labels(e), 1);
  CHECK(std::isinf(h2));
  CHECK(std::isinf(s2));
}

TEST_CASE("surface distances equal the all-pairs oracle on random masks") {
  for (int trial = 0; trial < 40; ++trial) {
    ByteMask a = o::random_mask({12, 12, 12}, 5000 + trial, 0.15);
    ByteMask b = o::random_mask({12, 12, 12}, 6000 + trial, 0.15);
    auto [hd, asd] = surface_distances(mask_to_labels(a), mask_to_labels(b), 1);
    auto [rhd, rasd] = o::surface_distances_allpairs(a, b);
    CHECK(hd == doctest::Approx(rhd).epsilon(1e-12));
    CHECK(asd == doctest::Approx(rasd).epsilon(1e-12));
  }
}

TEST_CASE("metric symmetry under swapping pred/gt") {
  ByteMask a = o::random_mask({10, 10, 10}, 7001, 0.2);
  ByteMask b = o::random_mask({10, 10, 10}, 7002, 0.2);
  auto [d1, j1] = dice_jaccard(mask_to_labels(a), mask_to_labels(b), 1);
  auto [d2, j2] = dice_jaccard(mask_to_labels(b), mask_to_labels(a), 1);
  CHECK(d1 == d2);
  CHECK(j1 == j2);
  auto [h1, s1] = surface_distances(mask_to_labels(a), mask_to_labels(b), 1);
  auto [h2, s2] = surface_distances(mask_to_labels(b), mask_to_labels(a), 1);
  CHECK(h1 == h2);
  CHECK(s1 == s2);
}

TEST_CASE("translation invariance of HD95/ASD") {
  ByteMask a({12, 12, 12}), b({12, 12, 12});
  // two small boxes
  for (Index z = 2; z < 5; ++z)
    for (Index y = 2; y < 5; ++y)
      for (Index x = 2; x < 4; ++x) a.at({z, y, x}) = 1;
  for (Index z = 3; z < 6; ++z)
    for (Index y = 2; y < 4; ++y)
      for (Index x = 5; x < 8; ++x) b.at({z, y, x}) = 1;
  auto [h1, s1] = surface_distances(mask_to_labels(a), mask_to_labels(b), 1);
  // shift both by (+2, +1, +1)
  ByteMask a2({12, 12, 12}), b2({12, 12, 12});
  for (Index z = 0; z < 12; ++z)
    for (Index y = 0; y < 12; ++y)
      for (Index x = 0; x < 12; ++x) {
        if (a.at({z, y, x})) a2.at({z + 2, y + 1, x + 1}) = 1;
        if (b.at({z, y, x})) b2.at({z + 2, y + 1, x + 1}) = 1;
      }
  auto [h2, s2] = surface_distances(mask_to_labels(a2), mask_to_labels(b2), 1);
  CHECK(h1 == doctest::Approx(h2).epsilon(1e-12));
  CHECK(s1 == doctest::Approx(s2).epsilon(1e-12));
}

TEST_CASE("Dice = 2J/(1+J) identity on random evaluations") {
  for (int trial = 0; trial < 30; ++trial) {
    ByteMask a = o::random_mask({9, 9, 9}, 8000 + trial, 0.3);
    ByteMask b = o::random_mask({9, 9, 9}, 8100 + trial, 0.3);
    auto [d, j] = dice_jaccard(mask_to_labels(a), mask_to_labels(b), 1);
    CHECK(std::fabs(d - 2.0 * j / (1.0 + j)) < 1e-9);
    CHECK(j <= d + 1e-15);
  }
}

TEST_CASE("evaluate_labels aggregates foreground classes") {
  IntVolume gt({6, 6, 6}), pred({6, 6, 6});
  for (Index i = 0; i < 20; ++i) gt[i] = 1;
  for (Index i = 40; i < 60; ++i) gt[i] = 2;
  for (Index i = 0; i < gt.size(); ++i) pred[i] = gt[i];
  MetricReport rep = evaluate_labels(pred, gt, 3);
  CHECK(rep.mean_dice == doctest::Approx(1.0));
  CHECK(rep.per_class[1].hd95 == 0.0);
  CHECK(rep.per_class[2].asd == 0.0);
}
