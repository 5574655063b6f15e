#include "pianet/eval/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "pianet/errors.hpp"

namespace pianet::eval {

namespace {

double dist3(double ax, double ay, double az, double bx, double by, double bz) {
  return std::sqrt((ax - bx) * (ax - bx) + (ay - by) * (ay - by) +
                   (az - bz) * (az - bz));
}

std::string fmt_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

MatchResult match_to_truth(const std::vector<ScanDetections>& detections,
                           const std::vector<ScanAnnotation>& annotations,
                           double hit_rule) {
  if (!(hit_rule > 0.0)) throw ConfigError("match: hit_rule must be positive");
  std::map<std::string, std::size_t> scan_of;
  for (std::size_t i = 0; i < annotations.size(); ++i)
    if (!scan_of.emplace(annotations[i].scan_id, i).second)
      throw DataError("match: duplicate scan id " + annotations[i].scan_id);

  MatchResult out;
  out.scan_count = annotations.size();
  for (const auto& a : annotations)
    for (const auto& n : a.nodules)
      if (is_target(n)) ++out.total_targets;

  std::vector<std::vector<bool>> claimed(annotations.size());
  for (std::size_t i = 0; i < annotations.size(); ++i)
    claimed[i].assign(annotations[i].nodules.size(), false);

  for (const auto& scan : detections) {
    auto it = scan_of.find(scan.scan_id);
    if (it == scan_of.end())
      throw DataError("match: detections reference unknown scan " +
                      scan.scan_id);
    const std::size_t si = it->second;
    const auto& nodules = annotations[si].nodules;

    std::vector<std::size_t> order(scan.detections.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scan.detections[a].score > scan.detections[b].score;
    });

    for (std::size_t di : order) {
      const Detection& d = scan.detections[di];
      LabeledDetection ld;
      ld.score = d.score;
      ld.scan = si;
      // nearest containing target, unclaimed first
      std::size_t best = nodules.size();
      double best_dist = 0.0;
      bool best_claimed = true;
      bool excused_irrelevant = false;
      for (std::size_t ni = 0; ni < nodules.size(); ++ni) {
        const Nodule& n = nodules[ni];
        const double dist =
            dist3(d.box.x, d.box.y, d.box.z, n.x_mm, n.y_mm, n.z_mm);
        if (dist > hit_rule * n.diameter_mm / 2.0) continue;
        if (!is_target(n)) {
          excused_irrelevant = true;
          continue;
        }
        const bool c = claimed[si][ni];
        if (best == nodules.size() || (best_claimed && !c) ||
            (best_claimed == c && dist < best_dist)) {
          best = ni;
          best_dist = dist;
          best_claimed = c;
        }
      }
      if (best != nodules.size() && !best_claimed) {
        claimed[si][best] = true;
        ld.label = DetLabel::kTruePositive;
        ld.nodule = best;
      } else if (best != nodules.size() || excused_irrelevant) {
        ld.label = DetLabel::kExcused;
      } else {
        ld.label = DetLabel::kFalsePositive;
      }
      out.detections.push_back(ld);
    }
  }
  return out;
}

std::vector<FrocPoint> froc(const MatchResult& matched) {
  if (matched.scan_count == 0) throw DataError("froc: no scans");
  if (matched.total_targets == 0)
    throw DataError("froc: no relevant nodules; sensitivity is undefined");

  std::vector<const LabeledDetection*> counted;
  for (const auto& d : matched.detections)
    if (d.label != DetLabel::kExcused) counted.push_back(&d);
  if (counted.empty()) return {{0.0, 0.0, 1.0}};

  std::sort(counted.begin(), counted.end(),
            [](const LabeledDetection* a, const LabeledDetection* b) {
              return a->score > b->score;
            });
  std::vector<FrocPoint> curve;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < counted.size(); ++i) {
    if (counted[i]->label == DetLabel::kTruePositive)
      ++tp;
    else
      ++fp;
    const bool boundary =
        i + 1 == counted.size() || counted[i + 1]->score != counted[i]->score;
    if (boundary)
      curve.push_back(
          {static_cast<double>(fp) / static_cast<double>(matched.scan_count),
           static_cast<double>(tp) / static_cast<double>(matched.total_targets),
           counted[i]->score});
  }
  return curve;
}

CpmReport cpm(const std::vector<FrocPoint>& curve) {
  if (curve.empty()) throw ConfigError("cpm: empty curve");
  CpmReport r;
  double sum = 0.0;
  for (std::size_t i = 0; i < CpmReport::kRates.size(); ++i) {
    double best_fps = -1.0;
    double sens = 0.0;
    for (const FrocPoint& p : curve)
      if (p.fps_per_scan <= CpmReport::kRates[i] && p.fps_per_scan >= best_fps) {
        // at equal fps keep the larger sensitivity (later threshold)
        if (p.fps_per_scan > best_fps || p.sensitivity > sens) {
          best_fps = p.fps_per_scan;
          sens = p.sensitivity;
        }
      }
    r.sensitivity[i] = sens;
    sum += sens;
  }
  r.cpm = sum / static_cast<double>(CpmReport::kRates.size());
  return r;
}

void write_report_json(const std::string& path,
                       const std::vector<FrocPoint>& curve,
                       const CpmReport& report) {
  nlohmann::json j;
  j["version"] = 1;
  nlohmann::json c = nlohmann::json::array();
  for (const auto& p : curve)
    c.push_back({{"fps_per_scan", p.fps_per_scan},
                 {"sensitivity", p.sensitivity},
                 {"threshold", p.threshold}});
  j["curve"] = c;
  nlohmann::json s = nlohmann::json::array();
  for (std::size_t i = 0; i < CpmReport::kRates.size(); ++i)
    s.push_back({{"fps_per_scan", CpmReport::kRates[i]},
                 {"sensitivity", report.sensitivity[i]}});
  j["samples"] = s;
  j["cpm"] = report.cpm;
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
  if (!f) throw IoError("short write: " + path);
}

void write_report_csv(const std::string& path,
                      const std::vector<FrocPoint>& curve) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "fps_per_scan,sensitivity,threshold\n";
  for (const auto& p : curve)
    f << fmt_double(p.fps_per_scan) << "," << fmt_double(p.sensitivity) << ","
      << fmt_double(p.threshold) << "\n";
  if (!f) throw IoError("short write: " + path);
}

std::pair<std::vector<FrocPoint>, CpmReport> read_report_json(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for reading: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  std::vector<FrocPoint> curve;
  CpmReport report;
  try {
    for (const auto& p : j.at("curve"))
      curve.push_back({p.at("fps_per_scan").get<double>(),
                       p.at("sensitivity").get<double>(),
                       p.at("threshold").get<double>()});
    const auto& s = j.at("samples");
    for (std::size_t i = 0; i < CpmReport::kRates.size(); ++i)
      report.sensitivity[i] = s.at(i).at("sensitivity").get<double>();
    report.cpm = j.at("cpm").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": malformed report: " + e.what());
  }
  return {curve, report};
}

}  // namespace pianet::eval
