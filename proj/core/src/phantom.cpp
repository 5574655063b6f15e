#include "pianet/data/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "pianet/errors.hpp"

namespace pianet {

void PhantomSpec::validate() const {
  for (std::size_t e : extents)
    if (e < 8) throw ConfigError("phantom: extents must be at least 8 voxels");
  for (double s : spacing)
    if (!(s > 0.0)) throw ConfigError("phantom: spacing must be positive");
  if (nodules_min > nodules_max)
    throw ConfigError("phantom: nodule count range is inverted");
  if (!(diameter_min_mm > 0.0 && diameter_min_mm <= diameter_max_mm))
    throw ConfigError("phantom: diameter range invalid");
  const double side_mm =
      static_cast<double>(*std::min_element(extents.begin(), extents.end())) *
      *std::min_element(spacing.begin(), spacing.end());
  if (diameter_max_mm >= side_mm / 2.0)
    throw ConfigError("phantom: diameters must stay below half the volume");
  if (!(contrast_min > 0.0 && contrast_min <= contrast_max))
    throw ConfigError("phantom: contrast range invalid");
  if (noise_level < 0.0) throw ConfigError("phantom: negative noise level");
  for (double f : lung_frac)
    if (!(f > 0.05 && f < 0.5))
      throw ConfigError("phantom: lung_frac must lie in (0.05, 0.5)");
}

namespace {

struct Placed {
  double z, y, x;  // voxels
  double d_mm;
};

}  // namespace

std::pair<Volume, ScanAnnotation> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Volume v;
  v.extents = spec.extents;
  v.spacing = spec.spacing;
  v.data.assign(v.voxel_count(), 0.0);
  v.mask.assign(v.voxel_count(), 0);

  const double ez = static_cast<double>(spec.extents[0]);
  const double ey = static_cast<double>(spec.extents[1]);
  const double ex = static_cast<double>(spec.extents[2]);
  const double cz = (ez - 1.0) / 2.0, cy = (ey - 1.0) / 2.0,
               cx = (ex - 1.0) / 2.0;
  const double az = spec.lung_frac[0] * ez;
  const double ay = spec.lung_frac[1] * ey;
  const double ax = spec.lung_frac[2] * ex;

  // Coarse lattice of smoothed noise, trilinearly upsampled.
  const std::size_t step = 4;
  const std::size_t nz = spec.extents[0] / step + 2;
  const std::size_t ny = spec.extents[1] / step + 2;
  const std::size_t nx = spec.extents[2] / step + 2;
  std::vector<double> lattice(nz * ny * nx);
  for (double& l : lattice) l = rng.normal() * spec.noise_level;
  auto lat = [&](std::size_t a, std::size_t b, std::size_t c) {
    return lattice[(a * ny + b) * nx + c];
  };

  std::size_t o = 0;
  for (std::size_t z = 0; z < spec.extents[0]; ++z)
    for (std::size_t y = 0; y < spec.extents[1]; ++y)
      for (std::size_t x = 0; x < spec.extents[2]; ++x, ++o) {
        const double rz = (static_cast<double>(z) - cz) / az;
        const double ry = (static_cast<double>(y) - cy) / ay;
        const double rx = (static_cast<double>(x) - cx) / ax;
        const double rho = std::sqrt(rz * rz + ry * ry + rx * rx);
        const std::size_t lz = z / step, ly = y / step, lx = x / step;
        const double fz = static_cast<double>(z % step) / step;
        const double fy = static_cast<double>(y % step) / step;
        const double fx = static_cast<double>(x % step) / step;
        double noise = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              noise += (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) *
                       (dx ? fx : 1.0 - fx) * lat(lz + dz, ly + dy, lx + dx);
        double value;
        if (rho <= 1.0) {
          v.mask[o] = 1;
          value = spec.background_level + noise;
        } else if (spec.wall_count > 0 && rho > 1.05 &&
                   rho <= 1.05 + 0.25 * static_cast<double>(spec.wall_count)) {
          value = 205.0 + 0.5 * noise;
        } else {
          value = 12.0 + 0.25 * noise;
        }
        v.data[o] = std::clamp(value, 0.0, 255.0);
      }

  // Vessels: bright capsules between random points inside the lung.
  auto lung_point = [&](double margin) {
    for (int t = 0; t < 200; ++t) {
      const double pz = cz + (rng.uniform() * 2.0 - 1.0) * az * margin;
      const double py = cy + (rng.uniform() * 2.0 - 1.0) * ay * margin;
      const double px = cx + (rng.uniform() * 2.0 - 1.0) * ax * margin;
      const double rz = (pz - cz) / az, ry = (py - cy) / ay, rx = (px - cx) / ax;
      if (rz * rz + ry * ry + rx * rx <= margin * margin)
        return std::array<double, 3>{pz, py, px};
    }
    throw DataError("phantom: failed to sample a lung point");
  };
  auto stamp_ball = [&](double bz, double by, double bx, double rad,
                        double level) {
    const long z0 = std::max<long>(0, static_cast<long>(std::floor(bz - rad)));
    const long z1 = std::min<long>(static_cast<long>(ez) - 1,
                                   static_cast<long>(std::ceil(bz + rad)));
    const long y0 = std::max<long>(0, static_cast<long>(std::floor(by - rad)));
    const long y1 = std::min<long>(static_cast<long>(ey) - 1,
                                   static_cast<long>(std::ceil(by + rad)));
    const long x0 = std::max<long>(0, static_cast<long>(std::floor(bx - rad)));
    const long x1 = std::min<long>(static_cast<long>(ex) - 1,
                                   static_cast<long>(std::ceil(bx + rad)));
    for (long z = z0; z <= z1; ++z)
      for (long y = y0; y <= y1; ++y)
        for (long x = x0; x <= x1; ++x) {
          const double dz = static_cast<double>(z) - bz;
          const double dy = static_cast<double>(y) - by;
          const double dx = static_cast<double>(x) - bx;
          if (dz * dz + dy * dy + dx * dx > rad * rad) continue;
          double& cell = v.data[v.index(static_cast<std::size_t>(z),
                                        static_cast<std::size_t>(y),
                                        static_cast<std::size_t>(x))];
          cell = std::max(cell, level);
        }
  };
  for (std::size_t i = 0; i < spec.vessel_count; ++i) {
    const auto a = lung_point(0.85);
    const auto b = lung_point(0.85);
    const double len = std::sqrt((a[0] - b[0]) * (a[0] - b[0]) +
                                 (a[1] - b[1]) * (a[1] - b[1]) +
                                 (a[2] - b[2]) * (a[2] - b[2]));
    const double rad = rng.uniform(0.8, 1.6);
    const int steps = std::max(2, static_cast<int>(len * 2.0));
    for (int t = 0; t <= steps; ++t) {
      const double f = static_cast<double>(t) / steps;
      stamp_ball(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]),
                 a[2] + f * (b[2] - a[2]), rad, 185.0);
    }
  }

  // Nodules: soft-edged low-contrast spheres, no pairwise overlap.
  const std::size_t count =
      spec.nodules_min +
      (spec.nodules_max > spec.nodules_min
           ? rng.below(spec.nodules_max - spec.nodules_min + 1)
           : 0);
  std::vector<Placed> placed;
  const double mean_sp = (spec.spacing[0] + spec.spacing[1] + spec.spacing[2]) / 3.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d_mm = rng.uniform(spec.diameter_min_mm, spec.diameter_max_mm);
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const auto p = lung_point(0.7);
      ok = true;
      for (const Placed& q : placed) {
        const double dz = (p[0] - q.z) * spec.spacing[0];
        const double dy = (p[1] - q.y) * spec.spacing[1];
        const double dx = (p[2] - q.x) * spec.spacing[2];
        if (std::sqrt(dz * dz + dy * dy + dx * dx) <
            (d_mm + q.d_mm) / 2.0 + 4.0) {
          ok = false;
          break;
        }
      }
      if (ok) placed.push_back({p[0], p[1], p[2], d_mm});
    }
    if (!ok)
      throw DataError("phantom: could not place nodule " + std::to_string(i) +
                      " after 100 tries");
    const Placed& n = placed.back();
    const double contrast = rng.uniform(spec.contrast_min, spec.contrast_max);
    const double rad_v = d_mm / (2.0 * mean_sp);  // voxels (near-isotropic use)
    const double reach = rad_v * 1.6;
    const long z0 = std::max<long>(0, static_cast<long>(std::floor(n.z - reach)));
    const long z1 = std::min<long>(static_cast<long>(ez) - 1,
                                   static_cast<long>(std::ceil(n.z + reach)));
    const long y0 = std::max<long>(0, static_cast<long>(std::floor(n.y - reach)));
    const long y1 = std::min<long>(static_cast<long>(ey) - 1,
                                   static_cast<long>(std::ceil(n.y + reach)));
    const long x0 = std::max<long>(0, static_cast<long>(std::floor(n.x - reach)));
    const long x1 = std::min<long>(static_cast<long>(ex) - 1,
                                   static_cast<long>(std::ceil(n.x + reach)));
    for (long z = z0; z <= z1; ++z)
      for (long y = y0; y <= y1; ++y)
        for (long x = x0; x <= x1; ++x) {
          const double dz = (static_cast<double>(z) - n.z) / rad_v;
          const double dy = (static_cast<double>(y) - n.y) / rad_v;
          const double dx = (static_cast<double>(x) - n.x) / rad_v;
          const double rho = std::sqrt(dz * dz + dy * dy + dx * dx);
          if (rho > 1.6) continue;
          // flat core, Gaussian shoulder past 70% of the radius
          const double g =
              rho <= 0.7 ? 1.0
                         : std::exp(-(rho - 0.7) * (rho - 0.7) / (2.0 * 0.18 * 0.18));
          double& cell = v.data[v.index(static_cast<std::size_t>(z),
                                        static_cast<std::size_t>(y),
                                        static_cast<std::size_t>(x))];
          cell = std::clamp(cell + contrast * g, 0.0, 255.0);
        }
  }

  ScanAnnotation ann;
  ann.scan_id = spec.scan_id;
  for (const Placed& n : placed)
    ann.nodules.push_back({n.x * spec.spacing[2], n.y * spec.spacing[1],
                           n.z * spec.spacing[0], n.d_mm, 4, true});

  if (spec.hu_output)
    for (double& d : v.data) d = -1200.0 + d / 255.0 * 1800.0;
  return {std::move(v), std::move(ann)};
}

}  // namespace pianet
