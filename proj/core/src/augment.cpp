#include "pianet/data/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pianet/errors.hpp"

namespace pianet {

void AugmentConfig::validate() const {
  if (!(resize_lo > 0.0 && resize_lo <= resize_hi))
    throw ConfigError("augment: resize range must satisfy 0 < lo <= hi");
  if (max_translate < 0) throw ConfigError("augment: max_translate < 0");
  if (max_redraws < 1) throw ConfigError("augment: max_redraws < 1");
}

namespace {

std::size_t cube_side(const CubeSample& s) {
  const auto& sh = s.cube.shape();
  if (sh[0] != 1 || sh[1] != 1 || sh[2] != sh[3] || sh[3] != sh[4])
    throw DataError("augment: sample tensor is not a (1,1,S,S,S) cube");
  return sh[2];
}

bool boxes_inside(const std::vector<BoxCube>& boxes, double side) {
  for (const BoxCube& b : boxes)
    if (b.x < 0.0 || b.x > side - 1.0 || b.y < 0.0 || b.y > side - 1.0 ||
        b.z < 0.0 || b.z > side - 1.0)
      return false;
  return true;
}

// Trilinear sample with zero outside the cube.
double sample_cube(const Tensor5& c, std::size_t side, double z, double y,
                   double x) {
  const long z0 = static_cast<long>(std::floor(z));
  const long y0 = static_cast<long>(std::floor(y));
  const long x0 = static_cast<long>(std::floor(x));
  const double fz = z - static_cast<double>(z0);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  double acc = 0.0;
  const long n = static_cast<long>(side);
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const long iz = z0 + dz, iy = y0 + dy, ix = x0 + dx;
        if (iz < 0 || iz >= n || iy < 0 || iy >= n || ix < 0 || ix >= n)
          continue;
        const double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) *
                         (dx ? fx : 1.0 - fx);
        acc += w * c.vec()[(static_cast<std::size_t>(iz) * side +
                            static_cast<std::size_t>(iy)) *
                               side +
                           static_cast<std::size_t>(ix)];
      }
  return acc;
}

}  // namespace

CubeSample augment_flip(const CubeSample& s, Rng& rng) {
  const bool fz = rng.coin(), fy = rng.coin(), fx = rng.coin();
  return flip_axes(s, fz, fy, fx);
}

CubeSample flip_axes(const CubeSample& s, bool fz, bool fy, bool fx) {
  const std::size_t side = cube_side(s);
  CubeSample out;
  out.origin = s.origin;
  out.cube = Tensor5(s.cube.shape());
  const double m = static_cast<double>(side) - 1.0;
  std::size_t o = 0;
  for (std::size_t z = 0; z < side; ++z)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x, ++o) {
        const std::size_t sz = fz ? side - 1 - z : z;
        const std::size_t sy = fy ? side - 1 - y : y;
        const std::size_t sx = fx ? side - 1 - x : x;
        out.cube.vec()[o] = s.cube.vec()[(sz * side + sy) * side + sx];
      }
  out.truths = s.truths;
  for (BoxCube& b : out.truths) {
    if (fz) b.z = m - b.z;
    if (fy) b.y = m - b.y;
    if (fx) b.x = m - b.x;
  }
  return out;
}

CubeSample augment_resize(const CubeSample& s, Rng& rng,
                          const AugmentConfig& cfg) {
  cfg.validate();
  const std::size_t side = cube_side(s);
  const double m = static_cast<double>(side) - 1.0;
  for (int attempt = 0; attempt < cfg.max_redraws; ++attempt) {
    const double f = rng.uniform(cfg.resize_lo, cfg.resize_hi);
    std::vector<BoxCube> boxes = s.truths;
    for (BoxCube& b : boxes) {
      b.x *= f;
      b.y *= f;
      b.z *= f;
      b.r *= f;
    }
    if (!boxes_inside(boxes, static_cast<double>(side))) continue;
    CubeSample out;
    out.origin = s.origin;
    out.truths = std::move(boxes);
    out.cube = Tensor5(s.cube.shape());
    std::size_t o = 0;
    for (std::size_t z = 0; z < side; ++z)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x, ++o) {
          const double pz = static_cast<double>(z) / f;
          const double py = static_cast<double>(y) / f;
          const double px = static_cast<double>(x) / f;
          out.cube.vec()[o] =
              (pz > m || py > m || px > m)
                  ? 0.0
                  : sample_cube(s.cube, side, pz, py, px);
        }
    return out;
  }
  return s;
}

CubeSample augment_translate(const CubeSample& s, Rng& rng,
                             const AugmentConfig& cfg) {
  cfg.validate();
  const std::size_t side = cube_side(s);
  for (int attempt = 0; attempt < cfg.max_redraws; ++attempt) {
    const long dz = rng.uniform_int(-cfg.max_translate, cfg.max_translate);
    const long dy = rng.uniform_int(-cfg.max_translate, cfg.max_translate);
    const long dx = rng.uniform_int(-cfg.max_translate, cfg.max_translate);
    std::vector<BoxCube> boxes = s.truths;
    for (BoxCube& b : boxes) {
      b.z += static_cast<double>(dz);
      b.y += static_cast<double>(dy);
      b.x += static_cast<double>(dx);
    }
    if (!boxes_inside(boxes, static_cast<double>(side))) continue;
    CubeSample out;
    out.origin = s.origin;
    out.truths = std::move(boxes);
    out.cube = Tensor5(s.cube.shape());
    const long n = static_cast<long>(side);
    std::size_t o = 0;
    for (long z = 0; z < n; ++z)
      for (long y = 0; y < n; ++y)
        for (long x = 0; x < n; ++x, ++o) {
          const long sz = z - dz, sy = y - dy, sx = x - dx;
          out.cube.vec()[o] =
              (sz < 0 || sz >= n || sy < 0 || sy >= n || sx < 0 || sx >= n)
                  ? 0.0
                  : s.cube.vec()[(static_cast<std::size_t>(sz) * side +
                                  static_cast<std::size_t>(sy)) *
                                     side +
                                 static_cast<std::size_t>(sx)];
        }
    return out;
  }
  return s;
}

CubeSample augment_rotate(const CubeSample& s, Rng& rng,
                          const AugmentConfig& cfg) {
  cfg.validate();
  const std::size_t side = cube_side(s);
  const double m = static_cast<double>(side) - 1.0;
  const int axis = static_cast<int>(rng.below(3));  // 0 about z, 1 y, 2 x
  // The two in-plane axes, as indices into (z, y, x).
  const int u = axis == 0 ? 1 : 0;
  const int v = axis == 2 ? 1 : 2;

  if (!cfg.free_rotation) {
    const int quarter = 1 + static_cast<int>(rng.below(3));
    CubeSample out;
    out.origin = s.origin;
    out.cube = s.cube;
    out.truths = s.truths;
    for (int q = 0; q < quarter; ++q) {
      Tensor5 next(out.cube.shape());
      std::size_t o = 0;
      for (std::size_t z = 0; z < side; ++z)
        for (std::size_t y = 0; y < side; ++y)
          for (std::size_t x = 0; x < side; ++x, ++o) {
            std::size_t i[3] = {z, y, x};
            // quarter turn: dst (u, v) reads src (v, side-1-u)
            std::size_t j[3] = {z, y, x};
            j[u] = i[v];
            j[v] = side - 1 - i[u];
            next.vec()[o] = out.cube.vec()[(j[0] * side + j[1]) * side + j[2]];
          }
      out.cube = std::move(next);
      for (BoxCube& b : out.truths) {
        double c[3] = {b.z, b.y, b.x};
        double r[3] = {c[0], c[1], c[2]};
        // inverse of the read mapping: dst[u] = m - src[v], dst[v] = src[u]
        r[u] = m - c[v];
        r[v] = c[u];
        b.z = r[0];
        b.y = r[1];
        b.x = r[2];
      }
    }
    return out;
  }

  const double theta = rng.uniform(-cfg.max_degrees, cfg.max_degrees) *
                       std::numbers::pi / 180.0;
  const double c0 = std::cos(theta), s0 = std::sin(theta);
  const double ctr = m / 2.0;
  for (int attempt = 0; attempt < cfg.max_redraws; ++attempt) {
    std::vector<BoxCube> boxes = s.truths;
    for (BoxCube& b : boxes) {
      double p[3] = {b.z - ctr, b.y - ctr, b.x - ctr};
      const double pu = c0 * p[u] - s0 * p[v];
      const double pv = s0 * p[u] + c0 * p[v];
      p[u] = pu;
      p[v] = pv;
      b.z = p[0] + ctr;
      b.y = p[1] + ctr;
      b.x = p[2] + ctr;
    }
    if (!boxes_inside(boxes, static_cast<double>(side))) break;
    CubeSample out;
    out.origin = s.origin;
    out.truths = std::move(boxes);
    out.cube = Tensor5(s.cube.shape());
    std::size_t o = 0;
    for (std::size_t z = 0; z < side; ++z)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x, ++o) {
          double p[3] = {static_cast<double>(z) - ctr,
                         static_cast<double>(y) - ctr,
                         static_cast<double>(x) - ctr};
          // inverse rotation of the sampling point
          const double pu = c0 * p[u] + s0 * p[v];
          const double pv = -s0 * p[u] + c0 * p[v];
          p[u] = pu;
          p[v] = pv;
          out.cube.vec()[o] =
              sample_cube(s.cube, side, p[0] + ctr, p[1] + ctr, p[2] + ctr);
        }
    return out;
  }
  return s;
}

CubeSample augment_axis_swap(const CubeSample& s, Rng& rng) {
  const std::size_t side = cube_side(s);
  int p[3] = {0, 1, 2};
  for (int a = 2; a > 0; --a)
    std::swap(p[a], p[rng.below(static_cast<std::size_t>(a) + 1)]);
  CubeSample out;
  out.origin = s.origin;
  out.cube = Tensor5(s.cube.shape());
  std::size_t o = 0;
  for (std::size_t z = 0; z < side; ++z)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x, ++o) {
        const std::size_t i[3] = {z, y, x};
        out.cube.vec()[o] =
            s.cube.vec()[(i[p[0]] * side + i[p[1]]) * side + i[p[2]]];
      }
  out.truths = s.truths;
  for (BoxCube& b : out.truths) {
    const double c[3] = {b.z, b.y, b.x};
    double r[3];
    for (int a = 0; a < 3; ++a) r[p[a]] = c[a];
    b.z = r[0];
    b.y = r[1];
    b.x = r[2];
  }
  return out;
}

CubeSample augment(const CubeSample& s, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  CubeSample out = s;
  if (cfg.flip) out = augment_flip(out, rng);
  if (cfg.resize) out = augment_resize(out, rng, cfg);
  if (cfg.translate) out = augment_translate(out, rng, cfg);
  if (cfg.rotate) out = augment_rotate(out, rng, cfg);
  if (cfg.axis_swap) out = augment_axis_swap(out, rng);
  return out;
}

}  // namespace pianet
