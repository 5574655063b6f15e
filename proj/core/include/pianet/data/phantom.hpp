#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "pianet/data/volume.hpp"
#include "pianet/rng.hpp"

namespace pianet {

// Synthetic chest volume with lung-like background texture, low-contrast
// spherical blobs standing in for GGO nodules, bright tubular vessels and a
// bright chest-wall shell, plus a lung mask. Deterministic per seed.
struct PhantomSpec {
  std::uint64_t seed = 0;
  std::array<std::size_t, 3> extents{64, 64, 64};  // z, y, x voxels
  std::array<double, 3> spacing{1.0, 1.0, 1.0};    // dz, dy, dx mm
  std::size_t nodules_min = 1;
  std::size_t nodules_max = 3;
  double diameter_min_mm = 6.0;
  double diameter_max_mm = 16.0;
  double contrast_min = 40.0;  // nodule peak above background, [0,255] units
  double contrast_max = 90.0;
  double background_level = 60.0;
  double noise_level = 8.0;
  std::size_t vessel_count = 4;
  std::size_t wall_count = 1;  // bright shells hugging the volume border
  std::array<double, 3> lung_frac{0.40, 0.40, 0.40};  // lung semi-axis / extent
  bool hu_output = false;      // emit Hounsfield units instead of [0,255]
  std::string scan_id = "phantom";

  void validate() const;
};

std::pair<Volume, ScanAnnotation> generate_phantom(const PhantomSpec& spec);

}  // namespace pianet
