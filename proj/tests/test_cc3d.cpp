#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "barl/cc3d.hpp"
#include "barl/rng.hpp"
#include "oracles.hpp"

using namespace barl;
namespace o = barl::oracle;

TEST_CASE("empty mask yields no components") {
  ByteMask m({4, 4, 4});
  for (int conn : {6, 18, 26}) CHECK(connected_components(m, conn).empty());
}

TEST_CASE("two isolated voxels are two components under any connectivity") {
  ByteMask m({5, 5, 5});
  m.at({0, 0, 0}) = 1;
  m.at({4, 4, 4}) = 1;
  for (int conn : {6, 18, 26}) {
    auto comps = connected_components(m, conn);
    REQUIRE(comps.size() == 2);
    CHECK(comps[0].voxels == std::vector<Index>{0});
    CHECK(comps[1].voxels == std::vector<Index>{m.size() - 1});
  }
}

TEST_CASE("diagonal pair: connectivity decides") {
  ByteMask m({3, 3, 3});
  m.at({0, 0, 0}) = 1;
  m.at({1, 1, 1}) = 1;  // corner-adjacent only
  CHECK(connected_components(m, 6).size() == 2);
  CHECK(connected_components(m, 18).size() == 2);
  CHECK(connected_components(m, 26).size() == 1);

  ByteMask e({3, 3, 3});
  e.at({0, 0, 0}) = 1;
  e.at({0, 1, 1}) = 1;  // edge-adjacent
  CHECK(connected_components(e, 6).size() == 2);
  CHECK(connected_components(e, 18).size() == 1);
  CHECK(connected_components(e, 26).size() == 1);
}

TEST_CASE("random masks match the flood-fill oracle exactly") {
  for (int trial = 0; trial < 60; ++trial) {
    const double density = 0.2 + 0.4 * (trial % 5) / 4.0;
    ByteMask m = o::random_mask({8, 8, 8}, 1000 + trial, density);
    for (int conn : {6, 18, 26}) {
      auto got = connected_components(m, conn);
      auto ref = o::flood_fill_components(m, conn);
      REQUIRE(got.size() == ref.size());
      for (size_t i = 0; i < got.size(); ++i) CHECK(got[i].voxels == ref[i]);
    }
  }
}

TEST_CASE("partition property and connectivity monotonicity") {
  for (int trial = 0; trial < 20; ++trial) {
    ByteMask m = o::random_mask({8, 8, 8}, 2000 + trial, 0.35);
    size_t counts[3];
    int ci = 0;
    for (int conn : {6, 18, 26}) {
      auto comps = connected_components(m, conn);
      counts[ci++] = comps.size();
      std::vector<char> covered(static_cast<size_t>(m.size()), 0);
      Index total = 0;
      for (const auto& c : comps)
        for (Index v : c.voxels) {
          CHECK(m[v] == 1);
          CHECK(!covered[static_cast<size_t>(v)]);
          covered[static_cast<size_t>(v)] = 1;
          ++total;
        }
      Index fg = 0;
      for (Index v = 0; v < m.size(); ++v) fg += m[v];
      CHECK(total == fg);
    }
    CHECK(counts[2] <= counts[1]);
    CHECK(counts[1] <= counts[0]);
  }
}

TEST_CASE("idempotence: relabeling a single component returns one component") {
  ByteMask m = o::random_mask({8, 8, 8}, 3000, 0.45);
  for (const auto& comp : connected_components(m, 26)) {
    ByteMask single = comp.to_mask(m.shape());
    CHECK(connected_components(single, 26).size() == 1);
  }
}

TEST_CASE("filter_by_volume keeps exactly the instances at or above tau_vol") {
  auto sized = [](Index n, int id) {
    InstanceMask im;
    im.component_id = id;
    for (Index i = 0; i < n; ++i) im.voxels.push_back(i);
    return im;
  };
  // tau_vol = 50: a 40-voxel and a 60-voxel component -> survivor is the 60
  auto out = filter_by_volume({sized(40, 0), sized(60, 1)}, 50);
  REQUIRE(out.size() == 1);
  CHECK(out[0].component_id == 1);

  // tau_vol = 1 is the identity
  auto all = filter_by_volume({sized(1, 0), sized(3, 1)}, 1);
  CHECK(all.size() == 2);

  CHECK_THROWS_AS(filter_by_volume({}, 0), std::invalid_argument);

  // random sets vs brute-force filter
  Rng rng(4000);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<InstanceMask> set;
    for (int i = 0; i < 10; ++i) set.push_back(sized(rng.unif_int(1, 100), i));
    const Index tau = rng.unif_int(1, 100);
    auto got = filter_by_volume(set, tau);
    std::vector<int> want;
    for (const auto& im : set)
      if (im.volume() >= tau) want.push_back(im.component_id);
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) CHECK(got[i].component_id == want[i]);
  }
}
