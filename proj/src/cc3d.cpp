#include "barl/cc3d.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <stdexcept>

namespace barl {

namespace {

/// Half the neighbourhood: offsets that point to already-scanned voxels in
/// row-major order, so a single forward pass sees every adjacency once.
std::vector<std::array<int, 3>> backward_offsets(int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw std::invalid_argument("connected_components: connectivity must be 6, 18 or 26");
  std::vector<std::array<int, 3>> offs;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dz > 0 || (dz == 0 && dy > 0) || (dz == 0 && dy == 0 && dx >= 0)) continue;
        const int manh = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (connectivity == 6 && manh > 1) continue;
        if (connectivity == 18 && manh > 2) continue;
        offs.push_back({dz, dy, dx});
      }
  return offs;
}

struct UnionFind {
  std::vector<Index> parent;
  Index find(Index a) {
    while (parent[static_cast<size_t>(a)] != a) {
      parent[static_cast<size_t>(a)] = parent[static_cast<size_t>(parent[static_cast<size_t>(a)])];
      a = parent[static_cast<size_t>(a)];
    }
    return a;
  }
  void unite(Index a, Index b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<size_t>(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace

std::vector<InstanceMask> connected_components(const ByteMask& mask, int connectivity) {
  if (mask.rank() != 3)
    throw std::invalid_argument("connected_components: mask must be [D,H,W], got " +
                                shape_str(mask.shape()));
  const Index d = mask.extent(0), h = mask.extent(1), w = mask.extent(2);
  const auto offs = backward_offsets(connectivity);

  UnionFind uf;
  uf.parent.resize(static_cast<size_t>(mask.size()));
  std::iota(uf.parent.begin(), uf.parent.end(), Index{0});

  for (Index z = 0; z < d; ++z)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index v = (z * h + y) * w + x;
        if (!mask[v]) continue;
        for (const auto& o : offs) {
          const Index nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (nz < 0 || nz >= d || ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const Index nv = (nz * h + ny) * w + nx;
          if (mask[nv]) uf.unite(v, nv);
        }
      }

  // Roots are component minima (unite keeps the smaller index), so scanning
  // in linear order yields the required ordering directly.
  std::vector<Index> root_slot(static_cast<size_t>(mask.size()), -1);
  std::vector<InstanceMask> comps;
  for (Index v = 0; v < mask.size(); ++v) {
    if (!mask[v]) continue;
    const Index r = uf.find(v);
    Index& slot = root_slot[static_cast<size_t>(r)];
    if (slot < 0) {
      slot = static_cast<Index>(comps.size());
      comps.push_back(InstanceMask{{}, 0, static_cast<int>(slot)});
    }
    comps[static_cast<size_t>(slot)].voxels.push_back(v);
  }
  return comps;
}

std::vector<InstanceMask> filter_by_volume(std::vector<InstanceMask> instances, Index tau_vol) {
  if (tau_vol < 1) throw std::invalid_argument("filter_by_volume: tau_vol must be >= 1");
  std::vector<InstanceMask> out;
  out.reserve(instances.size());
  for (auto& inst : instances)
    if (inst.volume() >= tau_vol) out.push_back(std::move(inst));
  return out;
}

}  // namespace barl
