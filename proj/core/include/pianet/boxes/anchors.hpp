#pragma once

#include <cstdint>
#include <vector>

#include "pianet/boxes/box.hpp"
#include "pianet/model/config.hpp"

namespace pianet::boxes {

/// All anchors of a configuration in the canonical enumeration order:
/// scale-major with the finest feature map (side/4, e.g. 32^3) first, then
/// spatial z, y, x, then anchor-size index. The flattened network prediction
/// uses the same order.
struct AnchorSet {
  std::vector<BoxCube> cubes;
  std::vector<std::uint8_t> scale_index;   // per anchor
  std::vector<std::uint8_t> size_index;    // per anchor, within its scale
  std::size_t size() const { return cubes.size(); }
};

AnchorSet generate_anchors(const model::PiaNetConfig& config);

enum class AnchorLabel : std::uint8_t { kNegative = 0, kIgnored = 1, kPositive = 2 };

struct MatchAssignment {
  std::vector<AnchorLabel> labels;          // one per anchor
  std::vector<std::size_t> anchor_of_gt;    // matched anchor index per ground truth
  std::vector<std::size_t> gt_of_anchor;    // valid where label == kPositive
  std::vector<double> iou_of_gt;            // IoU of each match

  std::size_t positive_count() const {
    std::size_t n = 0;
    for (auto l : labels)
      if (l == AnchorLabel::kPositive) ++n;
    return n;
  }
};

/// Each ground truth claims its maximum-IoU anchor (one anchor per gt; a
/// contested anchor goes to the larger IoU, then the lower anchor index, and
/// the losing gt falls back to its next best). Anchors under neg_iou_max
/// against every gt become negative candidates; the rest are ignored.
MatchAssignment match_anchors(const AnchorSet& anchors,
                              const std::vector<BoxCube>& gts,
                              double neg_iou_max = 0.02);

/// Greedy NMS: keep the best remaining score, drop overlaps above the
/// threshold. Output sorted by descending score, ties by original index.
std::vector<Detection> nms(const std::vector<Detection>& detections,
                           double iou_threshold = 0.1);

}  // namespace pianet::boxes
