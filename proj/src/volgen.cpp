#include "barl/volgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "barl/rng.hpp"

namespace barl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Blob {
  double cz, cy, cx;
  double rz, ry, rx;
};

std::vector<Index> blob_voxels(const Blob& b, Index g) {
  std::vector<Index> out;
  const Index z0 = std::max<Index>(0, static_cast<Index>(std::floor(b.cz - b.rz)));
  const Index z1 = std::min<Index>(g - 1, static_cast<Index>(std::ceil(b.cz + b.rz)));
  const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(b.cy - b.ry)));
  const Index y1 = std::min<Index>(g - 1, static_cast<Index>(std::ceil(b.cy + b.ry)));
  const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(b.cx - b.rx)));
  const Index x1 = std::min<Index>(g - 1, static_cast<Index>(std::ceil(b.cx + b.rx)));
  for (Index z = z0; z <= z1; ++z)
    for (Index y = y0; y <= y1; ++y)
      for (Index x = x0; x <= x1; ++x) {
        const double ez = (z - b.cz) / b.rz, ey = (y - b.cy) / b.ry, ex = (x - b.cx) / b.rx;
        if (ez * ez + ey * ey + ex * ex <= 1.0) out.push_back((z * g + y) * g + x);
      }
  return out;
}

/// True when any candidate voxel overlaps existing foreground, or touches a
/// voxel of the same class under 26-connectivity (which would merge two
/// fragments into one component).
bool placement_conflicts(const std::vector<Index>& voxels, const IntVolume& label, int cls) {
  const Index g = label.extent(0);
  for (Index v : voxels) {
    if (label[v] != 0) return true;
    const Index z = v / (g * g), y = (v / g) % g, x = v % g;
    for (Index dz = -1; dz <= 1; ++dz)
      for (Index dy = -1; dy <= 1; ++dy)
        for (Index dx = -1; dx <= 1; ++dx) {
          const Index nz = z + dz, ny = y + dy, nx = x + dx;
          if (nz < 0 || nz >= g || ny < 0 || ny >= g || nx < 0 || nx >= g) continue;
          if (label[(nz * g + ny) * g + nx] == cls) return true;
        }
  }
  return false;
}

/// Correlated texture: white noise smoothed by a [1/4, 1/2, 1/4] kernel per
/// axis, rescaled to unit variance in closed form (0.375^3 variance factor).
Tensor correlated_noise(Index g, Rng& rng) {
  Tensor n({g, g, g});
  for (Index i = 0; i < n.size(); ++i) n[i] = rng.normal();
  Tensor tmp({g, g, g});
  auto smooth_axis = [&](const Tensor& src, Tensor& dst, int axis) {
    for (Index z = 0; z < g; ++z)
      for (Index y = 0; y < g; ++y)
        for (Index x = 0; x < g; ++x) {
          Index i[3] = {z, y, x};
          auto fetch = [&](Index delta) {
            Index j[3] = {i[0], i[1], i[2]};
            j[axis] = std::clamp<Index>(j[axis] + delta, 0, g - 1);
            return src[(j[0] * g + j[1]) * g + j[2]];
          };
          dst[(z * g + y) * g + x] = 0.25 * fetch(-1) + 0.5 * fetch(0) + 0.25 * fetch(1);
        }
  };
  smooth_axis(n, tmp, 0);
  smooth_axis(tmp, n, 1);
  smooth_axis(n, tmp, 2);
  const double unit = 1.0 / std::sqrt(0.375 * 0.375 * 0.375);
  tmp.flat() *= unit;
  return tmp;
}

}  // namespace

std::vector<Sample> generate_dataset(const GenConfig& cfg) {
  if (cfg.grid < 8) throw std::invalid_argument("generate_dataset: grid must be >= 8");
  if (cfg.classes < 2) throw std::invalid_argument("generate_dataset: classes must be >= 2");
  if (cfg.fragments_lo < 1 || cfg.fragments_hi < cfg.fragments_lo)
    throw std::invalid_argument("generate_dataset: bad fragment range");

  const Index g = cfg.grid;
  const double r_hi = std::min(cfg.radius_hi, static_cast<double>(g) / 4.0);
  const double r_lo = std::min(cfg.radius_lo, r_hi);

  std::vector<Sample> samples;
  samples.reserve(static_cast<size_t>(cfg.count));
  for (int id = 0; id < cfg.count; ++id) {
    Rng rng = rng_stream(cfg.seed, "volgen-sample", {static_cast<uint64_t>(id)});
    Sample s;
    s.id = id;
    s.label = IntVolume({g, g, g});

    for (int cls = 1; cls < cfg.classes; ++cls) {
      const int k = static_cast<int>(rng.unif_int(cfg.fragments_lo, cfg.fragments_hi));
      for (int j = 0; j < k; ++j) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_place_tries && !placed; ++attempt) {
          Blob b;
          b.rz = rng.unif(r_lo, r_hi);
          b.ry = rng.unif(r_lo, r_hi);
          b.rx = rng.unif(r_lo, r_hi);
          b.cz = rng.unif(b.rz, g - 1 - b.rz);
          b.cy = rng.unif(b.ry, g - 1 - b.ry);
          b.cx = rng.unif(b.rx, g - 1 - b.rx);
          const auto voxels = blob_voxels(b, g);
          if (voxels.size() < 4) continue;
          if (placement_conflicts(voxels, s.label, cls)) continue;
          for (Index v : voxels) s.label[v] = cls;
          placed = true;
        }
        if (!placed)
          throw generation_error("generate_dataset: could not place fragment " +
                                 std::to_string(j) + " of class " + std::to_string(cls) +
                                 " in sample " + std::to_string(id));
      }
    }

    // Per-sample class levels.
    std::vector<double> level(static_cast<size_t>(cfg.classes));
    level[0] = cfg.bg_level + rng.unif(-cfg.level_jitter, cfg.level_jitter);
    for (int cls = 1; cls < cfg.classes; ++cls) {
      const double t = cfg.classes == 2 ? 0.0 : static_cast<double>(cls - 1) / (cfg.classes - 2);
      level[static_cast<size_t>(cls)] = cfg.lesion_level_lo +
                                        t * (cfg.lesion_level_hi - cfg.lesion_level_lo) +
                                        rng.unif(-cfg.level_jitter, cfg.level_jitter);
    }

    Tensor tex = correlated_noise(g, rng);
    s.intensity = Tensor({1, g, g, g});
    for (Index v = 0; v < g * g * g; ++v) {
      const double val = level[static_cast<size_t>(s.label[v])] + cfg.texture_sigma * tex[v];
      s.intensity[v] = std::clamp(val, 0.0, 1.0);
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

std::pair<std::vector<size_t>, std::vector<size_t>> split_labeled(std::vector<Sample>& samples,
                                                                  double ratio, uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0)
    throw std::invalid_argument("split_labeled: ratio must be in (0, 1)");
  const size_t n = samples.size();
  const size_t n_lab = static_cast<size_t>(std::floor(ratio * static_cast<double>(n)));
  if (n_lab == 0) throw std::invalid_argument("split_labeled: ratio yields zero labeled samples");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng = rng_stream(seed, "volgen-split");
  rng.shuffle(order);

  for (auto& s : samples) s.is_labeled = false;
  for (size_t i = 0; i < n_lab; ++i) samples[order[i]].is_labeled = true;

  std::vector<size_t> lab, unl;
  for (size_t i = 0; i < n; ++i) (samples[i].is_labeled ? lab : unl).push_back(i);
  return {lab, unl};
}

template <typename T>
NdArray<T> apply_flips(const NdArray<T>& v, const FlipRecord& f) {
  const Index rank = v.rank();
  const Index d = v.extent(rank - 3), h = v.extent(rank - 2), w = v.extent(rank - 1);
  const Index ch = v.size() / (d * h * w);
  NdArray<T> out(v.shape());
  for (Index c = 0; c < ch; ++c) {
    const T* src = v.data() + c * d * h * w;
    T* dst = out.data() + c * d * h * w;
    for (Index z = 0; z < d; ++z)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const Index sz = f.z ? d - 1 - z : z;
          const Index sy = f.y ? h - 1 - y : y;
          const Index sx = f.x ? w - 1 - x : x;
          dst[(z * h + y) * w + x] = src[(sz * h + sy) * w + sx];
        }
  }
  return out;
}

template NdArray<Real> apply_flips<Real>(const NdArray<Real>&, const FlipRecord&);
template NdArray<int32_t> apply_flips<int32_t>(const NdArray<int32_t>&, const FlipRecord&);
template NdArray<uint8_t> apply_flips<uint8_t>(const NdArray<uint8_t>&, const FlipRecord&);

ViewPair make_views(const Sample& sample, uint64_t seed, const AugConfig& aug,
                    double dataset_mean) {
  Rng rng = rng_stream(seed, "volgen-views", {static_cast<uint64_t>(sample.id)});
  ViewPair vp;
  vp.flips = FlipRecord{rng.coin(), rng.coin(), rng.coin()};
  const Tensor base = apply_flips(sample.intensity, vp.flips);

  // Weak: shared flips + small additive intensity shift.
  const double shift = rng.unif(-aug.weak_shift, aug.weak_shift);
  vp.weak = Tensor(base.shape());
  vp.weak.flat() = (base.flat() + shift).min(1.0).max(0.0);

  // Strong: same flips + multiplicative jitter + additive noise + cutout.
  const double mfac = aug.jitter ? rng.unif(0.8, 1.2) : 1.0;
  vp.strong = Tensor(base.shape());
  for (Index i = 0; i < base.size(); ++i)
    vp.strong[i] = mfac * base[i] + (aug.noise_sigma > 0.0 ? rng.normal(0.0, aug.noise_sigma) : 0.0);
  if (aug.cutout) {
    const Index rank = base.rank();
    const Index d = base.extent(rank - 3), h = base.extent(rank - 2), w = base.extent(rank - 1);
    const double frac = rng.unif(aug.cutout_lo, aug.cutout_hi);
    const double target = frac * static_cast<double>(d * h * w);
    const Index dz = rng.unif_int(2, std::max<Index>(2, d / 2));
    const Index dy = rng.unif_int(2, std::max<Index>(2, h / 2));
    const Index dx = std::clamp<Index>(
        static_cast<Index>(std::lround(target / static_cast<double>(dz * dy))), 1, w);
    const Index z0 = rng.unif_int(0, d - dz);
    const Index y0 = rng.unif_int(0, h - dy);
    const Index x0 = rng.unif_int(0, w - dx);
    for (Index z = z0; z < z0 + dz; ++z)
      for (Index y = y0; y < y0 + dy; ++y)
        for (Index x = x0; x < x0 + dx; ++x)
          vp.strong[(z * h + y) * w + x] = dataset_mean;
  }
  vp.strong.flat() = vp.strong.flat().min(1.0).max(0.0);
  return vp;
}

double dataset_mean_intensity(const std::vector<Sample>& samples) {
  double acc = 0.0;
  Index n = 0;
  for (const auto& s : samples) {
    acc += s.intensity.flat().sum();
    n += s.intensity.size();
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

std::vector<double> class_prior(const std::vector<Sample>& samples, int classes) {
  std::vector<double> counts(static_cast<size_t>(classes), 0.0);
  for (const auto& s : samples) {
    if (!s.is_labeled) continue;
    for (Index v = 0; v < s.label.size(); ++v) counts[static_cast<size_t>(s.label[v])] += 1.0;
  }
  double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (total == 0.0) throw std::invalid_argument("class_prior: no labeled samples");
  for (double& c : counts) c = std::max(c / total, 1e-6);
  total = std::accumulate(counts.begin(), counts.end(), 0.0);
  for (double& c : counts) c /= total;
  return counts;
}

// ---------------------------------------------------------------------------
// Blob I/O
// ---------------------------------------------------------------------------

void save_sample(const Sample& s, int classes, const std::string& path) {
  const Index g = s.label.extent(0);
  json header = {{"id", s.id},
                 {"shape", {g, s.label.extent(1), s.label.extent(2)}},
                 {"dtype", "<f8"},
                 {"label_dtype", "<i4"},
                 {"classes", classes},
                 {"is_labeled", s.is_labeled}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_sample: cannot write " + path);
  out << header.dump() << "\n";
  out.write(reinterpret_cast<const char*>(s.intensity.data()),
            static_cast<std::streamsize>(sizeof(Real) * s.intensity.size()));
  out.write(reinterpret_cast<const char*>(s.label.data()),
            static_cast<std::streamsize>(sizeof(int32_t) * s.label.size()));
  if (!out) throw std::runtime_error("save_sample: short write to " + path);
}

Sample load_sample(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_sample: cannot open " + path);
  std::string line;
  std::getline(in, line);
  json header = json::parse(line);
  Sample s;
  s.id = header.at("id").get<int>();
  const auto sh = header.at("shape").get<std::vector<Index>>();
  s.is_labeled = header.at("is_labeled").get<bool>();
  s.intensity = Tensor({1, sh[0], sh[1], sh[2]});
  s.label = IntVolume({sh[0], sh[1], sh[2]});
  in.read(reinterpret_cast<char*>(s.intensity.data()),
          static_cast<std::streamsize>(sizeof(Real) * s.intensity.size()));
  in.read(reinterpret_cast<char*>(s.label.data()),
          static_cast<std::streamsize>(sizeof(int32_t) * s.label.size()));
  if (!in) throw std::runtime_error("load_sample: short read from " + path);
  return s;
}

void save_dataset(const std::vector<Sample>& samples, const GenConfig& cfg,
                  const std::string& dir) {
  fs::create_directories(dir);
  json index = {{"count", cfg.count}, {"grid", cfg.grid},   {"classes", cfg.classes},
                {"seed", cfg.seed},   {"files", json::array()}};
  for (const auto& s : samples) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%04d.vol", s.id);
    save_sample(s, cfg.classes, (fs::path(dir) / name).string());
    index["files"].push_back(name);
  }
  std::ofstream out(fs::path(dir) / "index.json");
  if (!out) throw std::runtime_error("save_dataset: cannot write index in " + dir);
  out << index.dump(2) << "\n";
}

std::pair<std::vector<Sample>, GenConfig> load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "index.json");
  if (!in) throw std::runtime_error("load_dataset: cannot open " + dir + "/index.json");
  json index = json::parse(in);
  GenConfig cfg;
  cfg.count = index.at("count").get<int>();
  cfg.grid = index.at("grid").get<Index>();
  cfg.classes = index.at("classes").get<int>();
  cfg.seed = index.at("seed").get<uint64_t>();
  std::vector<Sample> samples;
  for (const auto& f : index.at("files"))
    samples.push_back(load_sample((fs::path(dir) / f.get<std::string>()).string()));
  return {std::move(samples), cfg};
}

}  // namespace barl
