#pragma once

#include <array>
#include <string>
#include <vector>

#include "pianet/data/io.hpp"
#include "pianet/data/volume.hpp"

namespace pianet::eval {

enum class DetLabel { kTruePositive, kFalsePositive, kExcused };

struct LabeledDetection {
  double score = 0.0;
  DetLabel label = DetLabel::kFalsePositive;
  std::size_t scan = 0;    // index into the evaluated scan list
  std::size_t nodule = 0;  // claimed target, valid for true positives
};

struct MatchResult {
  std::vector<LabeledDetection> detections;  // across all scans
  std::size_t total_targets = 0;             // relevant nodules
  std::size_t scan_count = 0;
};

// Center-within-radius matching (radius scaled by hit_rule): per scan and in
// descending score order, a detection claims the nearest unclaimed relevant
// nodule whose scaled radius contains the detection center (true positive);
// later detections inside an already-claimed nodule are excused, as are
// detections inside irrelevant findings; everything else is a false
// positive. Detection scans must exist in the annotation list.
MatchResult match_to_truth(const std::vector<ScanDetections>& detections,
                           const std::vector<ScanAnnotation>& annotations,
                           double hit_rule = 1.0);

struct FrocPoint {
  double fps_per_scan = 0.0;
  double sensitivity = 0.0;
  double threshold = 0.0;
};

// One point per distinct detection score, descending threshold. Excused
// detections contribute to neither axis.
std::vector<FrocPoint> froc(const MatchResult& matched);

struct CpmReport {
  static constexpr std::array<double, 7> kRates{1.0 / 8, 1.0 / 4, 1.0 / 2,
                                                1,       2,       4,
                                                8};
  std::array<double, 7> sensitivity{};  // at the canonical rates
  double cpm = 0.0;
};

// Right-continuous step interpolation: sensitivity of the largest achieved
// fps <= target, 0 when no point qualifies.
CpmReport cpm(const std::vector<FrocPoint>& curve);

// Machine-readable report: JSON with the full curve and the CPM samples,
// and a CSV table of the curve (fps_per_scan, sensitivity, threshold).
void write_report_json(const std::string& path,
                       const std::vector<FrocPoint>& curve,
                       const CpmReport& report);
void write_report_csv(const std::string& path,
                      const std::vector<FrocPoint>& curve);
// Re-reads a JSON report; used for roundtrip checks.
std::pair<std::vector<FrocPoint>, CpmReport> read_report_json(
    const std::string& path);

}  // namespace pianet::eval
