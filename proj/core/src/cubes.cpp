#include "pianet/data/cubes.hpp"

#include <algorithm>
#include <cmath>

#include "pianet/boxes/anchors.hpp"
#include "pianet/data/augment.hpp"
#include "pianet/errors.hpp"

namespace pianet {

std::size_t tiling_count(std::size_t extent, std::size_t side,
                         std::size_t stride) {
  if (side == 0 || stride == 0 || stride % 2 != 0)
    throw ConfigError("tiling: side and stride must be positive, stride even");
  if (extent <= side) return 1;
  const std::size_t half = stride / 2;
  const std::size_t n = (extent - side + half - 1) / half;  // ceil
  return std::max<std::size_t>(2, n);
}

std::vector<std::size_t> tiling_origins(std::size_t extent, std::size_t side,
                                        std::size_t stride) {
  const std::size_t n = tiling_count(extent, side, stride);
  if (n == 1) return {0};
  const double span = static_cast<double>(extent - side);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<std::size_t>(
        std::llround(span * static_cast<double>(i) / static_cast<double>(n - 1)));
  return out;
}

Tensor5 cut_cube(const Volume& v, const std::array<std::size_t, 3>& origin,
                 std::size_t side) {
  Tensor5 cube(Tensor5::Shape{1, 1, side, side, side});
  for (std::size_t z = 0; z < side; ++z) {
    const std::size_t vz = origin[0] + z;
    if (vz >= v.extents[0]) break;
    for (std::size_t y = 0; y < side; ++y) {
      const std::size_t vy = origin[1] + y;
      if (vy >= v.extents[1]) break;
      const std::size_t nx = std::min(side, v.extents[2] - std::min(origin[2], v.extents[2]));
      const double* src = v.data.data() + v.index(vz, vy, origin[2]);
      double* dst = cube.data() + ((z * side) + y) * side;
      for (std::size_t x = 0; x < nx; ++x) dst[x] = src[x] / 255.0;
    }
  }
  return cube;
}

std::vector<CubeSample> extract_cubes(const Volume& v,
                                      const std::vector<BoxCube>& truths,
                                      std::size_t side, std::size_t stride) {
  v.validate("extract_cubes");
  const auto oz = tiling_origins(v.extents[0], side, stride);
  const auto oy = tiling_origins(v.extents[1], side, stride);
  const auto ox = tiling_origins(v.extents[2], side, stride);
  std::vector<CubeSample> out;
  out.reserve(oz.size() * oy.size() * ox.size());
  for (std::size_t z : oz)
    for (std::size_t y : oy)
      for (std::size_t x : ox) {
        CubeSample s;
        s.origin = {z, y, x};
        s.cube = cut_cube(v, s.origin, side);
        for (const BoxCube& t : truths) {
          const double lz = t.z - static_cast<double>(z);
          const double ly = t.y - static_cast<double>(y);
          const double lx = t.x - static_cast<double>(x);
          const double s_d = static_cast<double>(side);
          if (lz >= 0.0 && lz < s_d && ly >= 0.0 && ly < s_d && lx >= 0.0 &&
              lx < s_d)
            s.truths.push_back({lx, ly, lz, t.r});
        }
        out.push_back(std::move(s));
      }
  return out;
}

std::vector<Detection> stitch_detections(
    const std::vector<std::pair<std::array<std::size_t, 3>,
                                std::vector<Detection>>>& per_cube,
    double nms_threshold) {
  std::vector<Detection> pooled;
  for (const auto& [origin, dets] : per_cube)
    for (Detection d : dets) {
      d.box.z += static_cast<double>(origin[0]);
      d.box.y += static_cast<double>(origin[1]);
      d.box.x += static_cast<double>(origin[2]);
      pooled.push_back(d);
    }
  return nms(pooled, nms_threshold);
}


namespace {

bool patch_overlaps_box(const std::array<std::size_t, 3>& origin,
                        std::size_t side, const BoxCube& b) {
  const double lo[3] = {b.z - b.r / 2.0, b.y - b.r / 2.0, b.x - b.r / 2.0};
  const double hi[3] = {b.z + b.r / 2.0, b.y + b.r / 2.0, b.x + b.r / 2.0};
  for (int a = 0; a < 3; ++a) {
    const double po = static_cast<double>(origin[a]);
    if (hi[a] <= po || lo[a] >= po + static_cast<double>(side)) return false;
  }
  return true;
}

}  // namespace

std::vector<PatchSample> crop_patches(const Volume& v,
                                      const std::vector<BoxCube>& nodules,
                                      const PatchConfig& cfg, Rng& rng) {
  v.validate("crop_patches");
  if (cfg.patch_side == 0) throw ConfigError("crop_patches: zero patch side");
  const std::size_t side = cfg.patch_side;
  const long jitter = static_cast<long>(side / 8);
  auto clamp_origin = [&](double center, std::size_t extent) {
    const long max_o =
        extent > side ? static_cast<long>(extent - side) : 0;
    const long o = std::llround(center) - static_cast<long>(side) / 2;
    return static_cast<std::size_t>(std::clamp<long>(o, 0, max_o));
  };

  std::vector<PatchSample> out;
  std::size_t positives = 0;
  for (const BoxCube& n : nodules) {
    if (n.r > static_cast<double>(side)) continue;  // cannot fit the patch
    ++positives;
    for (std::size_t copy = 0; copy <= cfg.augment_copies; ++copy) {
      const long jz = rng.uniform_int(-jitter, jitter);
      const long jy = rng.uniform_int(-jitter, jitter);
      const long jx = rng.uniform_int(-jitter, jitter);
      CubeSample s;
      s.origin = {clamp_origin(n.z + static_cast<double>(jz), v.extents[0]),
                  clamp_origin(n.y + static_cast<double>(jy), v.extents[1]),
                  clamp_origin(n.x + static_cast<double>(jx), v.extents[2])};
      s.cube = cut_cube(v, s.origin, side);
      s.truths = {{n.x - static_cast<double>(s.origin[2]),
                   n.y - static_cast<double>(s.origin[1]),
                   n.z - static_cast<double>(s.origin[0]), n.r}};
      if (copy > 0) s = augment(s, AugmentConfig::all(), rng);
      out.push_back({std::move(s.cube), 1});
    }
  }

  const std::size_t wanted = cfg.negatives_per_positive * positives;
  std::size_t made = 0;
  for (int attempt = 0; attempt < cfg.max_draws && made < wanted; ++attempt) {
    std::array<std::size_t, 3> origin;
    for (int a = 0; a < 3; ++a)
      origin[a] = v.extents[a] > side
                      ? rng.below(v.extents[a] - side + 1)
                      : 0;
    if (v.has_mask()) {
      const std::size_t center =
          v.index(std::min(origin[0] + side / 2, v.extents[0] - 1),
                  std::min(origin[1] + side / 2, v.extents[1] - 1),
                  std::min(origin[2] + side / 2, v.extents[2] - 1));
      if (!v.mask[center]) continue;
    }
    bool clean = true;
    for (const BoxCube& n : nodules)
      if (patch_overlaps_box(origin, side, n)) {
        clean = false;
        break;
      }
    if (!clean) continue;
    out.push_back({cut_cube(v, origin, side), 0});
    ++made;
  }
  return out;
}

}  // namespace pianet
