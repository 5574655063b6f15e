#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pianet/boxes/box.hpp"
#include "pianet/data/volume.hpp"
#include "pianet/rng.hpp"
#include "pianet/tensor.hpp"

namespace pianet {

// A training/inference window cut from a preprocessed scan. The tensor is
// (1, 1, side, side, side) with intensities scaled from [0, 255] to [0, 1].
// Ground-truth boxes are in cube-local voxel coordinates.
struct CubeSample {
  Tensor5 cube;
  std::array<std::size_t, 3> origin{0, 0, 0};  // z, y, x within the scan
  std::vector<BoxCube> truths;
};

// Per-axis origin count for sliding-window tiling: one cube when the axis
// fits inside a single window, otherwise max(2, ceil((extent - side) /
// (stride / 2))) origins spread evenly from 0 to extent - side. Matches the
// documented 24-cube tiling of a 252x222x192 scan at side 128, stride 64.
std::size_t tiling_count(std::size_t extent, std::size_t side,
                         std::size_t stride);
std::vector<std::size_t> tiling_origins(std::size_t extent, std::size_t side,
                                        std::size_t stride);

// Cuts the scan into overlapping cubes; volumes smaller than one cube are
// zero-padded. Ground truths (scan voxel coordinates) whose centers fall
// inside a cube are attached to it in local coordinates.
std::vector<CubeSample> extract_cubes(const Volume& v,
                                      const std::vector<BoxCube>& truths,
                                      std::size_t side = 128,
                                      std::size_t stride = 64);

// Translates per-cube detections back to scan coordinates, pools them, and
// runs one global NMS pass.
std::vector<Detection> stitch_detections(
    const std::vector<std::pair<std::array<std::size_t, 3>,
                                std::vector<Detection>>>& per_cube,
    double nms_threshold = 0.1);

// Labeled patch for classifier pretraining.
struct PatchSample {
  Tensor5 patch;  // (1, 1, s, s, s), intensities in [0, 1]
  int label = 0;  // 1 = contains a nodule
};

struct PatchConfig {
  std::size_t patch_side = 64;
  std::size_t negatives_per_positive = 3;
  std::size_t augment_copies = 4;  // extra augmented variants per positive
  int max_draws = 200;
};

// Cuts classifier patches from a preprocessed scan: positives centered on
// nodules with jitter up to patch_side/8, negatives inside the lung mask
// with zero overlap against every nodule box, positives expanded with all
// five augmentation operators. Nodules larger than the patch are skipped.
std::vector<PatchSample> crop_patches(const Volume& v,
                                      const std::vector<BoxCube>& nodules,
                                      const PatchConfig& cfg, Rng& rng);

// Builds a cube tensor from a volume region (zero-padded at the borders),
// scaled to [0, 1].
Tensor5 cut_cube(const Volume& v, const std::array<std::size_t, 3>& origin,
                 std::size_t side);

}  // namespace pianet
