#include "pianet/boxes/anchors.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace pianet::boxes {

AnchorSet generate_anchors(const model::PiaNetConfig& config) {
  config.validate();
  AnchorSet set;
  set.cubes.reserve(config.total_anchors());
  set.scale_index.reserve(config.total_anchors());
  set.size_index.reserve(config.total_anchors());

  std::size_t size_base = 0;
  for (std::size_t s = 0; s < config.prediction_scales.size(); ++s) {
    const auto [side, n_sizes] = config.prediction_scales[s];
    const double cell = static_cast<double>(config.input_cube_side) /
                        static_cast<double>(side);
    for (std::size_t z = 0; z < side; ++z)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
          for (std::size_t a = 0; a < n_sizes; ++a) {
            BoxCube c;
            c.x = (static_cast<double>(x) + 0.5) * cell;
            c.y = (static_cast<double>(y) + 0.5) * cell;
            c.z = (static_cast<double>(z) + 0.5) * cell;
            c.r = config.anchor_sides_mm[size_base + a];
            set.cubes.push_back(c);
            set.scale_index.push_back(static_cast<std::uint8_t>(s));
            set.size_index.push_back(static_cast<std::uint8_t>(a));
          }
    size_base += n_sizes;
  }
  return set;
}

MatchAssignment match_anchors(const AnchorSet& anchors,
                              const std::vector<BoxCube>& gts,
                              double neg_iou_max) {
  if (anchors.size() == 0)
    throw ConfigError("match_anchors: empty anchor set");

  const std::size_t n = anchors.size();
  MatchAssignment m;
  m.labels.assign(n, AnchorLabel::kNegative);
  m.anchor_of_gt.assign(gts.size(), 0);
  m.gt_of_anchor.assign(n, std::numeric_limits<std::size_t>::max());
  m.iou_of_gt.assign(gts.size(), 0.0);
  if (gts.empty()) return m;

  // Max IoU per anchor over all gts decides negative vs ignored.
  std::vector<double> best_iou_anchor(n, 0.0);
  // Per gt, IoU to every anchor (gt counts are small).
  std::vector<std::vector<double>> iou(gts.size(), std::vector<double>(n));
  for (std::size_t j = 0; j < gts.size(); ++j)
    for (std::size_t i = 0; i < n; ++i) {
      const double v = iou_cube(anchors.cubes[i], gts[j]);
      iou[j][i] = v;
      if (v > best_iou_anchor[i]) best_iou_anchor[i] = v;
    }

  for (std::size_t i = 0; i < n; ++i)
    if (best_iou_anchor[i] >= neg_iou_max) m.labels[i] = AnchorLabel::kIgnored;

  // Highest IoU pairs claim anchors first; a gt whose best anchor is taken
  // falls back to its next best.
  std::vector<bool> gt_done(gts.size(), false);
  std::vector<bool> anchor_taken(n, false);
  for (std::size_t round = 0; round < gts.size(); ++round) {
    double best = -1.0;
    std::size_t bj = 0, bi = 0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (gt_done[j]) continue;
      for (std::size_t i = 0; i < n; ++i) {
        if (anchor_taken[i]) continue;
        if (iou[j][i] > best) {
          best = iou[j][i];
          bj = j;
          bi = i;
        }
      }
    }
    gt_done[bj] = true;
    anchor_taken[bi] = true;
    m.labels[bi] = AnchorLabel::kPositive;
    m.anchor_of_gt[bj] = bi;
    m.gt_of_anchor[bi] = bj;
    m.iou_of_gt[bj] = best;
  }
  return m;
}

std::vector<Detection> nms(const std::vector<Detection>& detections,
                           double iou_threshold) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });

  std::vector<Detection> kept;
  std::vector<bool> removed(detections.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (removed[i]) continue;
    kept.push_back(detections[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (removed[j]) continue;
      if (iou_cube(detections[i].box, detections[j].box) > iou_threshold)
        removed[j] = true;
    }
  }
  return kept;
}

}  // namespace pianet::boxes
