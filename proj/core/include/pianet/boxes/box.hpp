#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "pianet/errors.hpp"

namespace pianet::boxes {

/// Axis-aligned cube: center (x, y, z) in voxel coordinates (1 voxel = 1 mm
/// after resampling) and side length r in mm.
struct BoxCube {
  double x = 0.0, y = 0.0, z = 0.0;
  double r = 0.0;
};

/// Detection output unit: a cube plus its GGO confidence.
struct Detection {
  BoxCube box;
  double score = 0.0;
};

inline double iou_cube(const BoxCube& a, const BoxCube& b) {
  const double ha = a.r / 2.0, hb = b.r / 2.0;
  double inter = 1.0;
  const double ca[3] = {a.x, a.y, a.z};
  const double cb[3] = {b.x, b.y, b.z};
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(ca[k] - ha, cb[k] - hb);
    const double hi = std::min(ca[k] + ha, cb[k] + hb);
    if (hi <= lo) return 0.0;
    inter *= hi - lo;
  }
  const double va = a.r * a.r * a.r, vb = b.r * b.r * b.r;
  return inter / (va + vb - inter);
}

/// Regression target of a ground truth against an anchor:
/// t_k = (g_k - a_k) / a_r for k in {x,y,z}, t_r = ln(g_r / a_r).
inline std::array<double, 4> encode_box(const BoxCube& gt, const BoxCube& anchor) {
  if (anchor.r <= 0.0 || gt.r <= 0.0)
    throw DataError("encode_box: box side must be positive");
  return {(gt.x - anchor.x) / anchor.r, (gt.y - anchor.y) / anchor.r,
          (gt.z - anchor.z) / anchor.r, std::log(gt.r / anchor.r)};
}

inline BoxCube decode_box(const std::array<double, 4>& pred, const BoxCube& anchor) {
  if (anchor.r <= 0.0) throw DataError("decode_box: anchor side must be positive");
  return {anchor.x + pred[0] * anchor.r, anchor.y + pred[1] * anchor.r,
          anchor.z + pred[2] * anchor.r, anchor.r * std::exp(pred[3])};
}

}  // namespace pianet::boxes

namespace pianet {
using boxes::BoxCube;
using boxes::Detection;
using boxes::decode_box;
using boxes::encode_box;
using boxes::iou_cube;
}  // namespace pianet
