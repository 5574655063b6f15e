#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace pianet {

// Scalar grid in z-major layout (z, y, x). Values are Hounsfield units
// before normalization and [0, 255] after. The optional lung mask shares
// the extents.
struct Volume {
  std::array<std::size_t, 3> extents{0, 0, 0};  // depth, height, width
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // dz, dy, dx in mm/voxel
  std::vector<double> data;
  std::vector<std::uint8_t> mask;  // empty when absent

  std::size_t voxel_count() const { return extents[0] * extents[1] * extents[2]; }
  bool has_mask() const { return !mask.empty(); }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * extents[1] + y) * extents[2] + x;
  }
  double at(std::size_t z, std::size_t y, std::size_t x) const {
    return data[index(z, y, x)];
  }
  void validate(const std::string& where) const;
};

struct Nodule {
  double x_mm = 0.0;
  double y_mm = 0.0;
  double z_mm = 0.0;
  double diameter_mm = 0.0;
  int agreement = 0;   // radiologists in agreement, 0..4
  bool relevant = true;
};

struct ScanAnnotation {
  std::string scan_id;
  std::vector<Nodule> nodules;
};

// A nodule counts as a detection target only when marked relevant and
// confirmed by at least three of four readers; everything else is an
// irrelevant finding that evaluation excuses.
inline bool is_target(const Nodule& n) { return n.relevant && n.agreement >= 3; }

// Resamples to 1x1x1 mm spacing with trilinear interpolation (nearest
// neighbour for the mask). Output extents are round(extent * spacing).
Volume resample_isotropic(const Volume& v);

// Linear map [hu_min, hu_max] -> [0, 255] with clamping.
Volume normalize_intensity(const Volume& v, double hu_min = -1200.0,
                           double hu_max = 600.0);

// Zeroes voxels outside the lung mask. Requires a mask.
Volume apply_lung_mask(const Volume& v);

// Crops to the bounding box of the mask. Returns the crop origin
// (z, y, x voxels) through `origin`.
Volume crop_to_mask(const Volume& v, std::array<std::size_t, 3>& origin);

}  // namespace pianet
