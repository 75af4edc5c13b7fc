#include "barl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace barl {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_shape(const IntVolume& a, const IntVolume& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("metrics: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

ByteMask class_mask(const IntVolume& labels, int cls) {
  ByteMask m(labels.shape());
  for (Index i = 0; i < labels.size(); ++i) m[i] = labels[i] == cls ? 1 : 0;
  return m;
}

ByteMask boundary_of(const ByteMask& mask) {
  const Index d = mask.extent(0), h = mask.extent(1), w = mask.extent(2);
  auto bg = [&](Index z, Index y, Index x) {
    if (z < 0 || z >= d || y < 0 || y >= h || x < 0 || x >= w) return true;
    return mask[(z * h + y) * w + x] == 0;
  };
  ByteMask out(mask.shape());
  for (Index z = 0; z < d; ++z)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index v = (z * h + y) * w + x;
        if (!mask[v]) continue;
        out[v] = (bg(z - 1, y, x) || bg(z + 1, y, x) || bg(z, y - 1, x) || bg(z, y + 1, x) ||
                  bg(z, y, x - 1) || bg(z, y, x + 1))
                     ? 1
                     : 0;
      }
  return out;
}

/// 1D squared-distance lower envelope (Felzenszwalb & Huttenlocher).
void edt_1d(const std::vector<double>& f, std::vector<double>& out) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(static_cast<size_t>(n));
  std::vector<double> z(static_cast<size_t>(n) + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      const int p = v[static_cast<size_t>(k)];
      s = ((f[static_cast<size_t>(q)] + q * q) - (f[static_cast<size_t>(p)] + p * p)) /
          (2.0 * (q - p));
      if (s > z[static_cast<size_t>(k)]) break;
      --k;
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k) + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k) + 1] < q) ++k;
    const int p = v[static_cast<size_t>(k)];
    out[static_cast<size_t>(q)] =
        static_cast<double>((q - p)) * (q - p) + f[static_cast<size_t>(p)];
  }
}

}  // namespace

NdArray<double> squared_edt(const ByteMask& sites) {
  const Index d = sites.extent(0), h = sites.extent(1), w = sites.extent(2);
  NdArray<double> dist(sites.shape());
  // Large finite sentinel instead of infinity: inf - inf in the envelope
  // intersection would poison the stack with NaN on site-free lines.
  constexpr double kFar = 1e30;
  for (Index i = 0; i < sites.size(); ++i) dist[i] = sites[i] ? 0.0 : kFar;

  std::vector<double> line, out;
  // pass along W
  line.resize(static_cast<size_t>(w));
  out.resize(static_cast<size_t>(w));
  for (Index z = 0; z < d; ++z)
    for (Index y = 0; y < h; ++y) {
      double* row = dist.data() + (z * h + y) * w;
      std::copy_n(row, w, line.begin());
      edt_1d(line, out);
      std::copy_n(out.begin(), w, row);
    }
  // pass along H
  line.resize(static_cast<size_t>(h));
  out.resize(static_cast<size_t>(h));
  for (Index z = 0; z < d; ++z)
    for (Index x = 0; x < w; ++x) {
      for (Index y = 0; y < h; ++y) line[static_cast<size_t>(y)] = dist[(z * h + y) * w + x];
      edt_1d(line, out);
      for (Index y = 0; y < h; ++y) dist[(z * h + y) * w + x] = out[static_cast<size_t>(y)];
    }
  // pass along D
  line.resize(static_cast<size_t>(d));
  out.resize(static_cast<size_t>(d));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      for (Index z = 0; z < d; ++z) line[static_cast<size_t>(z)] = dist[(z * h + y) * w + x];
      edt_1d(line, out);
      for (Index z = 0; z < d; ++z) dist[(z * h + y) * w + x] = out[static_cast<size_t>(z)];
    }
  return dist;
}

std::pair<double, double> dice_jaccard(const IntVolume& pred, const IntVolume& gt, int cls) {
  require_same_shape(pred, gt);
  Index a = 0, b = 0, inter = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool pa = pred[i] == cls, pb = gt[i] == cls;
    a += pa;
    b += pb;
    inter += pa && pb;
  }
  if (a + b == 0) return {1.0, 1.0};  // both empty
  const double dice = 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
  const double jac = static_cast<double>(inter) / static_cast<double>(a + b - inter);
  return {dice, jac};
}

std::pair<double, double> surface_distances(const IntVolume& pred, const IntVolume& gt, int cls) {
  require_same_shape(pred, gt);
  const ByteMask sp = boundary_of(class_mask(pred, cls));
  const ByteMask sg = boundary_of(class_mask(gt, cls));
  Index np = 0, ng = 0;
  for (Index i = 0; i < sp.size(); ++i) {
    np += sp[i];
    ng += sg[i];
  }
  if (np == 0 || ng == 0) return {kInf, kInf};

  const NdArray<double> d_to_g = squared_edt(sg);
  const NdArray<double> d_to_p = squared_edt(sp);
  std::vector<double> pool;
  pool.reserve(static_cast<size_t>(np + ng));
  for (Index i = 0; i < sp.size(); ++i) {
    if (sp[i]) pool.push_back(std::sqrt(d_to_g[i]));
    if (sg[i]) pool.push_back(std::sqrt(d_to_p[i]));
  }
  std::sort(pool.begin(), pool.end());
  const size_t rank =
      static_cast<size_t>(std::ceil(0.95 * static_cast<double>(pool.size())));  // 1-based
  const double hd95 = pool[rank - 1];
  double sum = 0.0;
  for (double v : pool) sum += v;
  return {hd95, sum / static_cast<double>(pool.size())};
}

MetricReport evaluate_labels(const IntVolume& pred, const IntVolume& gt, int classes) {
  MetricReport rep;
  rep.per_class.resize(static_cast<size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    auto [dc, jc] = dice_jaccard(pred, gt, c);
    auto [hd, asd] = surface_distances(pred, gt, c);
    ClassMetrics& m = rep.per_class[static_cast<size_t>(c)];
    m.dice = dc;
    m.jaccard = jc;
    m.hd95 = hd;
    m.asd = asd;
    m.surface_defined = std::isfinite(hd);
  }
  const int fg = classes - 1;
  if (fg > 0) {
    for (int c = 1; c < classes; ++c) {
      rep.mean_dice += rep.per_class[static_cast<size_t>(c)].dice / fg;
      rep.mean_jaccard += rep.per_class[static_cast<size_t>(c)].jaccard / fg;
      rep.mean_hd95 += rep.per_class[static_cast<size_t>(c)].hd95 / fg;
      rep.mean_asd += rep.per_class[static_cast<size_t>(c)].asd / fg;
    }
  }
  return rep;
}

}  // namespace barl
