#include "pianet/data/volume.hpp"

#include <algorithm>
#include <cmath>

#include "pianet/errors.hpp"

namespace pianet {

void Volume::validate(const std::string& where) const {
  for (double s : spacing)
    if (!(s > 0.0)) throw DataError(where + ": spacing must be positive");
  if (data.size() != voxel_count())
    throw DataError(where + ": data size does not match extents");
  if (!mask.empty() && mask.size() != voxel_count())
    throw DataError(where + ": mask size does not match extents");
}

namespace {

double sample_trilinear(const Volume& v, double z, double y, double x) {
  const auto& e = v.extents;
  auto clampi = [](long i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(n) - 1));
  };
  const long z0 = static_cast<long>(std::floor(z));
  const long y0 = static_cast<long>(std::floor(y));
  const long x0 = static_cast<long>(std::floor(x));
  const double fz = z - static_cast<double>(z0);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) *
                         (dx ? fx : 1.0 - fx);
        if (w == 0.0) continue;
        acc += w * v.at(clampi(z0 + dz, e[0]), clampi(y0 + dy, e[1]),
                        clampi(x0 + dx, e[2]));
      }
  return acc;
}

}  // namespace

Volume resample_isotropic(const Volume& v) {
  v.validate("resample_isotropic");
  for (std::size_t a = 0; a < 3; ++a)
    if (v.extents[a] < 2)
      throw ConfigError("resample_isotropic: degenerate axis of extent " +
                        std::to_string(v.extents[a]));
  Volume out;
  out.spacing = {1.0, 1.0, 1.0};
  for (std::size_t a = 0; a < 3; ++a)
    out.extents[a] = static_cast<std::size_t>(
        std::llround(static_cast<double>(v.extents[a]) * v.spacing[a]));
  out.data.resize(out.voxel_count());
  if (v.has_mask()) out.mask.resize(out.voxel_count());

  const double sz = 1.0 / v.spacing[0];
  const double sy = 1.0 / v.spacing[1];
  const double sx = 1.0 / v.spacing[2];
  std::size_t o = 0;
  for (std::size_t z = 0; z < out.extents[0]; ++z)
    for (std::size_t y = 0; y < out.extents[1]; ++y)
      for (std::size_t x = 0; x < out.extents[2]; ++x, ++o) {
        const double pz = static_cast<double>(z) * sz;
        const double py = static_cast<double>(y) * sy;
        const double px = static_cast<double>(x) * sx;
        out.data[o] = sample_trilinear(v, pz, py, px);
        if (v.has_mask()) {
          auto near = [](double p, std::size_t n) {
            const long i = std::llround(p);
            return static_cast<std::size_t>(
                std::clamp<long>(i, 0, static_cast<long>(n) - 1));
          };
          out.mask[o] = v.mask[v.index(near(pz, v.extents[0]),
                                       near(py, v.extents[1]),
                                       near(px, v.extents[2]))];
        }
      }
  return out;
}

Volume normalize_intensity(const Volume& v, double hu_min, double hu_max) {
  v.validate("normalize_intensity");
  if (!(hu_min < hu_max))
    throw ConfigError("normalize_intensity: hu_min must be below hu_max");
  Volume out = v;
  const double scale = 255.0 / (hu_max - hu_min);
  for (double& d : out.data)
    d = std::clamp((d - hu_min) * scale, 0.0, 255.0);
  return out;
}

Volume apply_lung_mask(const Volume& v) {
  v.validate("apply_lung_mask");
  if (!v.has_mask())
    throw ConfigError(
        "apply_lung_mask: volume carries no lung mask; supply one via the "
        "mask file");
  Volume out = v;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    if (!out.mask[i]) out.data[i] = 0.0;
  return out;
}

Volume crop_to_mask(const Volume& v, std::array<std::size_t, 3>& origin) {
  v.validate("crop_to_mask");
  if (!v.has_mask()) throw ConfigError("crop_to_mask: volume carries no mask");
  std::array<std::size_t, 3> lo = v.extents;
  std::array<std::size_t, 3> hi{0, 0, 0};
  std::size_t i = 0;
  bool any = false;
  for (std::size_t z = 0; z < v.extents[0]; ++z)
    for (std::size_t y = 0; y < v.extents[1]; ++y)
      for (std::size_t x = 0; x < v.extents[2]; ++x, ++i)
        if (v.mask[i]) {
          any = true;
          lo = {std::min(lo[0], z), std::min(lo[1], y), std::min(lo[2], x)};
          hi = {std::max(hi[0], z), std::max(hi[1], y), std::max(hi[2], x)};
        }
  if (!any) throw DataError("crop_to_mask: mask is empty");
  origin = lo;
  Volume out;
  out.spacing = v.spacing;
  for (std::size_t a = 0; a < 3; ++a) out.extents[a] = hi[a] - lo[a] + 1;
  out.data.resize(out.voxel_count());
  out.mask.resize(out.voxel_count());
  std::size_t o = 0;
  for (std::size_t z = 0; z < out.extents[0]; ++z)
    for (std::size_t y = 0; y < out.extents[1]; ++y)
      for (std::size_t x = 0; x < out.extents[2]; ++x, ++o) {
        const std::size_t s = v.index(lo[0] + z, lo[1] + y, lo[2] + x);
        out.data[o] = v.data[s];
        out.mask[o] = v.mask[s];
      }
  return out;
}

}  // namespace pianet
