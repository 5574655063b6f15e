#pragma once

#include "pianet/data/cubes.hpp"
#include "pianet/rng.hpp"

namespace pianet {

struct AugmentConfig {
  bool flip = true;
  bool resize = true;
  bool translate = true;
  bool rotate = true;
  bool axis_swap = true;

  double resize_lo = 0.9;
  double resize_hi = 1.1;
  int max_translate = 8;     // voxels per axis
  bool free_rotation = false;  // small-angle trilinear rotation instead of
  double max_degrees = 10.0;   // 90-degree steps, when enabled
  int max_redraws = 20;

  static AugmentConfig all() { return {}; }
  static AugmentConfig flip_resize_only() {
    AugmentConfig c;
    c.translate = c.rotate = c.axis_swap = false;
    return c;
  }
  void validate() const;
};

// Individual operators. Each returns a new sample; boxes are transformed
// consistently with the voxel data. A sample is returned unchanged when a
// random draw cannot keep all boxes inside the cube after max_redraws tries.
CubeSample augment_flip(const CubeSample& s, Rng& rng);
CubeSample flip_axes(const CubeSample& s, bool fz, bool fy, bool fx);
CubeSample augment_resize(const CubeSample& s, Rng& rng,
                          const AugmentConfig& cfg = {});
CubeSample augment_translate(const CubeSample& s, Rng& rng,
                             const AugmentConfig& cfg = {});
CubeSample augment_rotate(const CubeSample& s, Rng& rng,
                          const AugmentConfig& cfg = {});
CubeSample augment_axis_swap(const CubeSample& s, Rng& rng);

// Applies every enabled operator in the fixed order flip, resize,
// translate, rotate, axis_swap.
CubeSample augment(const CubeSample& s, const AugmentConfig& cfg, Rng& rng);

}  // namespace pianet
