#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <deque>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "pianet/boxes/anchors.hpp"
#include "pianet/data/augment.hpp"
#include "pianet/data/cubes.hpp"
#include "pianet/data/io.hpp"
#include "pianet/data/phantom.hpp"
#include "pianet/data/volume.hpp"
#include "pianet/errors.hpp"
#include "pianet/eval/eval.hpp"
#include "pianet/model/pianet.hpp"
#include "pianet/nn/gradcheck.hpp"
#include "pianet/train/checkpoint.hpp"
#include "pianet/train/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pianet;

namespace {

// ---- config plumbing ----------------------------------------------------

json load_config(const std::string& path, const std::set<std::string>& allowed) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
  if (!j.contains("version") || !j["version"].is_number_integer() ||
      j["version"].get<int>() != 1)
    throw ConfigError(path + ": config requires \"version\": 1");
  for (const auto& [key, _] : j.items())
    if (key != "version" && !allowed.count(key))
      throw ConfigError(path + ": unknown config key \"" + key + "\"");
  return j;
}

template <class T>
void from_cfg(const json& j, const char* key, T& dst) {
  if (j.contains(key)) {
    try {
      dst = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config key \"") + key + "\": " + e.what());
    }
  }
}

template <class T>
void override_opt(const std::optional<T>& src, T& dst) {
  if (src) dst = *src;
}

struct ManifestWriter {
  json m;
  std::chrono::steady_clock::time_point start =
      std::chrono::steady_clock::now();

  ManifestWriter(const std::string& command, const std::string& config_path,
                 const json& snapshot) {
    m["command"] = command;
    m["config_file"] = config_path;
    m["config"] = snapshot;
    m["outputs"] = json::array();
  }
  void output(const std::string& path) { m["outputs"].push_back(path); }
  void write(const fs::path& dir) {
    m["elapsed_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    fs::create_directories(dir);
    std::ofstream f(dir / "run_manifest.json");
    if (!f) throw IoError("cannot write manifest in " + dir.string());
    f << m.dump(2) << "\n";
  }
};

model::PiaNetConfig model_from_cfg(const json& j) {
  model::PiaNetConfig m;
  std::size_t side = m.input_cube_side;
  from_cfg(j, "cube_side", side);
  m = model::PiaNetConfig::with_side(side);
  from_cfg(j, "contracting_widths", m.contracting_widths);
  from_cfg(j, "expanding_widths", m.expanding_widths);
  from_cfg(j, "anchor_sides_mm", m.anchor_sides_mm);
  m.validate();
  return m;
}

const std::set<std::string> kModelKeys = {"cube_side", "contracting_widths",
                                          "expanding_widths", "anchor_sides_mm"};

train::TrainConfig train_from_cfg(const json& j) {
  train::TrainConfig t;
  from_cfg(j, "lr", t.lr);
  from_cfg(j, "decay_factor", t.decay_factor);
  from_cfg(j, "decay_at", t.decay_at);
  from_cfg(j, "momentum", t.momentum);
  from_cfg(j, "weight_decay", t.weight_decay);
  from_cfg(j, "batch", t.batch);
  from_cfg(j, "epochs", t.epochs);
  from_cfg(j, "cubes_per_step", t.cubes_per_step);
  from_cfg(j, "steps", t.steps);
  from_cfg(j, "seed", t.seed);
  from_cfg(j, "alpha", t.loss.alpha);
  from_cfg(j, "beta", t.loss.beta);
  from_cfg(j, "mining", t.mining);
  from_cfg(j, "k_floor", t.k_floor);
  from_cfg(j, "k_per_positive", t.k_per_positive);
  from_cfg(j, "pool_factor", t.pool_factor);
  from_cfg(j, "neg_iou_max", t.neg_iou_max);
  from_cfg(j, "background_cube_rate", t.background_cube_rate);
  return t;
}

const std::set<std::string> kTrainKeys = {
    "lr",    "decay_factor", "decay_at",      "momentum",   "weight_decay",
    "batch", "epochs",       "cubes_per_step", "steps",     "seed",
    "alpha", "beta",         "mining",        "k_floor",    "k_per_positive",
    "pool_factor", "neg_iou_max", "background_cube_rate"};

std::set<std::string> merge_keys(std::initializer_list<std::set<std::string>> sets) {
  std::set<std::string> out;
  for (const auto& s : sets) out.insert(s.begin(), s.end());
  return out;
}

// ---- dataset conventions --------------------------------------------------
// A data directory holds annotations.csv plus <scan_id>.mhd/.raw and
// optional <scan_id>_mask.mhd/.raw per scan, all isotropic and normalized.

struct Dataset {
  std::vector<ScanAnnotation> annotations;
  std::vector<Volume> volumes;  // parallel to annotations
};

Dataset load_dataset(const std::string& dir) {
  Dataset d;
  const fs::path root(dir);
  d.annotations = read_annotations((root / "annotations.csv").string());
  if (d.annotations.empty()) throw DataError(dir + ": no annotated scans");
  for (const auto& a : d.annotations) {
    Volume v = read_metaimage((root / (a.scan_id + ".mhd")).string());
    const fs::path mask = root / (a.scan_id + "_mask.mhd");
    if (fs::exists(mask)) read_mask_metaimage(mask.string(), v);
    d.volumes.push_back(std::move(v));
  }
  return d;
}

std::vector<BoxCube> target_boxes_voxels(const ScanAnnotation& a,
                                         const Volume& v) {
  std::vector<BoxCube> out;
  for (const auto& n : a.nodules)
    if (is_target(n))
      out.push_back({n.x_mm / v.spacing[2], n.y_mm / v.spacing[1],
                     n.z_mm / v.spacing[0], n.diameter_mm / v.spacing[2]});
  return out;
}

// ---- subcommands ----------------------------------------------------------

int cmd_phantom(const std::string& config_path, const json& cfg) {
  std::string out_dir = "phantoms";
  std::size_t count = 1;
  PhantomSpec spec;
  from_cfg(cfg, "out_dir", out_dir);
  from_cfg(cfg, "count", count);
  from_cfg(cfg, "seed", spec.seed);
  std::size_t side = 64;
  from_cfg(cfg, "side", side);
  spec.extents = {side, side, side};
  from_cfg(cfg, "extents", spec.extents);
  from_cfg(cfg, "spacing", spec.spacing);
  from_cfg(cfg, "nodules_min", spec.nodules_min);
  from_cfg(cfg, "nodules_max", spec.nodules_max);
  from_cfg(cfg, "diameter_min_mm", spec.diameter_min_mm);
  from_cfg(cfg, "diameter_max_mm", spec.diameter_max_mm);
  from_cfg(cfg, "contrast_min", spec.contrast_min);
  from_cfg(cfg, "contrast_max", spec.contrast_max);
  from_cfg(cfg, "noise_level", spec.noise_level);
  from_cfg(cfg, "vessel_count", spec.vessel_count);
  from_cfg(cfg, "wall_count", spec.wall_count);
  from_cfg(cfg, "lung_frac", spec.lung_frac);
  from_cfg(cfg, "hu_output", spec.hu_output);

  ManifestWriter manifest("phantom", config_path, cfg);
  fs::create_directories(out_dir);
  std::vector<ScanAnnotation> all;
  for (std::size_t i = 0; i < count; ++i) {
    PhantomSpec s = spec;
    s.seed = spec.seed + i;
    char id[32];
    std::snprintf(id, sizeof id, "scan_%03zu", i);
    s.scan_id = id;
    auto [v, ann] = generate_phantom(s);
    const std::string base = (fs::path(out_dir) / id).string();
    write_metaimage(base + ".mhd", v,
                    spec.hu_output ? ElementType::kShort : ElementType::kDouble);
    write_mask_metaimage(base + "_mask.mhd", v);
    manifest.output(base + ".mhd");
    all.push_back(std::move(ann));
  }
  const std::string ann_path = (fs::path(out_dir) / "annotations.csv").string();
  write_annotations(ann_path, all);
  manifest.output(ann_path);
  manifest.write(out_dir);
  std::cout << "wrote " << count << " phantom scan(s) to " << out_dir << "\n";
  return 0;
}

int cmd_preprocess(const std::string& config_path, const json& cfg) {
  std::string input, mask, annotations, out_dir = "preprocessed";
  double hu_min = -1200.0, hu_max = 600.0;
  bool crop = true;
  from_cfg(cfg, "input", input);
  from_cfg(cfg, "mask", mask);
  from_cfg(cfg, "annotations", annotations);
  from_cfg(cfg, "out_dir", out_dir);
  from_cfg(cfg, "hu_min", hu_min);
  from_cfg(cfg, "hu_max", hu_max);
  from_cfg(cfg, "crop_to_mask", crop);
  if (input.empty()) throw ConfigError("preprocess: \"input\" is required");

  ManifestWriter manifest("preprocess", config_path, cfg);
  Volume v = read_metaimage(input);
  if (!mask.empty()) read_mask_metaimage(mask, v);
  v = resample_isotropic(v);
  v = normalize_intensity(v, hu_min, hu_max);
  std::array<std::size_t, 3> origin{0, 0, 0};
  if (v.has_mask()) {
    v = apply_lung_mask(v);
    if (crop) v = crop_to_mask(v, origin);
  }
  fs::create_directories(out_dir);
  const std::string scan_id = fs::path(input).stem().string();
  const std::string base = (fs::path(out_dir) / scan_id).string();
  write_metaimage(base + ".mhd", v);
  manifest.output(base + ".mhd");
  if (v.has_mask()) {
    write_mask_metaimage(base + "_mask.mhd", v);
    manifest.output(base + "_mask.mhd");
  }
  if (!annotations.empty()) {
    auto scans = read_annotations(annotations);
    for (auto& s : scans)
      for (auto& n : s.nodules) {
        n.x_mm -= static_cast<double>(origin[2]);
        n.y_mm -= static_cast<double>(origin[1]);
        n.z_mm -= static_cast<double>(origin[0]);
      }
    const std::string ann_path =
        (fs::path(out_dir) / "annotations.csv").string();
    write_annotations(ann_path, scans);
    manifest.output(ann_path);
  }
  manifest.m["crop_origin_zyx"] = origin;
  manifest.m["extents_zyx"] = v.extents;
  manifest.write(out_dir);
  std::cout << "preprocessed " << input << " -> " << base << ".mhd ("
            << v.extents[2] << "x" << v.extents[1] << "x" << v.extents[0]
            << ")\n";
  return 0;
}

int cmd_pretrain(const std::string& config_path, const json& cfg) {
  std::string data_dir, out = "stage1.ck";
  from_cfg(cfg, "data_dir", data_dir);
  from_cfg(cfg, "out", out);
  if (data_dir.empty()) throw ConfigError("pretrain: \"data_dir\" is required");
  const model::PiaNetConfig mc = model_from_cfg(cfg);
  train::TrainConfig tc = train_from_cfg(cfg);
  PatchConfig pc;
  pc.patch_side = mc.input_cube_side / 2;
  from_cfg(cfg, "negatives_per_positive", pc.negatives_per_positive);
  from_cfg(cfg, "augment_copies", pc.augment_copies);

  ManifestWriter manifest("pretrain", config_path, cfg);
  Dataset data = load_dataset(data_dir);
  Rng patch_rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<PatchSample> patches;
  for (std::size_t i = 0; i < data.volumes.size(); ++i) {
    auto scan_patches = crop_patches(
        data.volumes[i], target_boxes_voxels(data.annotations[i], data.volumes[i]),
        pc, patch_rng);
    for (auto& p : scan_patches) patches.push_back(std::move(p));
  }
  model::Stage1Classifier net(mc, tc.seed);
  train::Stage1Trainer trainer(net, std::move(patches), tc);
  trainer.run_epochs(tc.epochs, &std::cout);
  train::Checkpoint ck = trainer.checkpoint();
  train::save_checkpoint(out, ck);
  manifest.output(out);
  manifest.write(fs::path(out).parent_path().empty()
                     ? fs::path(".")
                     : fs::path(out).parent_path());
  std::cout << "stage-1 checkpoint: " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const json& cfg) {
  std::string data_dir, init, out = "stage2.ck", resume;
  from_cfg(cfg, "data_dir", data_dir);
  from_cfg(cfg, "init", init);
  from_cfg(cfg, "resume", resume);
  from_cfg(cfg, "out", out);
  if (data_dir.empty()) throw ConfigError("train: \"data_dir\" is required");
  const model::PiaNetConfig mc = model_from_cfg(cfg);
  const train::TrainConfig tc = train_from_cfg(cfg);

  ManifestWriter manifest("train", config_path, cfg);
  Dataset data = load_dataset(data_dir);
  std::vector<train::TrainScan> scans;
  for (std::size_t i = 0; i < data.volumes.size(); ++i) {
    auto boxes = target_boxes_voxels(data.annotations[i], data.volumes[i]);
    scans.push_back({std::move(data.volumes[i]), std::move(boxes)});
  }
  train::CubeSampler sampler(std::move(scans), mc.input_cube_side,
                             tc.background_cube_rate,
                             AugmentConfig::flip_resize_only());

  model::PiaNet net = model::build_pianet(mc, tc.seed);
  train::Stage2Trainer trainer(net, sampler, tc);
  std::size_t steps = tc.steps;
  if (!resume.empty()) {
    trainer.restore(train::load_checkpoint(resume));
    steps = tc.steps > trainer.step() ? tc.steps - trainer.step() : 0;
  } else if (!init.empty()) {
    const auto ck = train::load_checkpoint(init);
    train::transfer_features(ck, net.params());
    train::transfer_features(ck, net.state());
  }
  trainer.run_steps(steps, &std::cout);
  train::save_checkpoint(out, trainer.checkpoint());
  manifest.output(out);
  manifest.write(fs::path(out).parent_path().empty()
                     ? fs::path(".")
                     : fs::path(out).parent_path());
  std::cout << "stage-2 checkpoint: " << out << "\n";
  return 0;
}

int cmd_detect(const std::string& config_path, const json& cfg) {
  std::string checkpoint, data_dir, out = "detections.csv";
  double score_min = 0.1, nms_iou = 0.1;
  std::size_t stride = 0;
  from_cfg(cfg, "checkpoint", checkpoint);
  from_cfg(cfg, "data_dir", data_dir);
  from_cfg(cfg, "out", out);
  from_cfg(cfg, "score_min", score_min);
  from_cfg(cfg, "nms_iou", nms_iou);
  from_cfg(cfg, "stride", stride);
  if (checkpoint.empty() || data_dir.empty())
    throw ConfigError("detect: \"checkpoint\" and \"data_dir\" are required");

  ManifestWriter manifest("detect", config_path, cfg);
  const train::Checkpoint ck = train::load_checkpoint(checkpoint);
  model::PiaNet net = model::build_pianet(ck.model, 0);
  train::restore_params(ck, net.params());
  train::restore_params(ck, net.state());
  const auto anchors = boxes::generate_anchors(ck.model);
  const std::size_t side = ck.model.input_cube_side;
  if (stride == 0) stride = side / 2;

  Dataset data = load_dataset(data_dir);
  std::vector<ScanDetections> results;
  for (std::size_t i = 0; i < data.volumes.size(); ++i) {
    const Volume& v = data.volumes[i];
    std::vector<std::pair<std::array<std::size_t, 3>, std::vector<Detection>>>
        per_cube;
    for (const auto& cube : extract_cubes(v, {}, side, stride))
      per_cube.emplace_back(cube.origin,
                            train::detect_cube(net, anchors, cube.cube,
                                               score_min, nms_iou));
    ScanDetections sd;
    sd.scan_id = data.annotations[i].scan_id;
    for (Detection d : stitch_detections(per_cube, nms_iou)) {
      d.box.x *= v.spacing[2];
      d.box.y *= v.spacing[1];
      d.box.z *= v.spacing[0];
      d.box.r *= v.spacing[2];
      sd.detections.push_back(d);
    }
    results.push_back(std::move(sd));
  }
  write_detections(out, results);
  manifest.output(out);
  manifest.write(fs::path(out).parent_path().empty()
                     ? fs::path(".")
                     : fs::path(out).parent_path());
  std::size_t n = 0;
  for (const auto& r : results) n += r.detections.size();
  std::cout << "wrote " << n << " detection(s) to " << out << "\n";
  return 0;
}

int cmd_evaluate(const std::string& config_path, const json& cfg) {
  std::string detections, annotations, out_dir = "report";
  double hit_rule = 1.0;
  from_cfg(cfg, "detections", detections);
  from_cfg(cfg, "annotations", annotations);
  from_cfg(cfg, "out_dir", out_dir);
  from_cfg(cfg, "hit_rule", hit_rule);
  if (detections.empty() || annotations.empty())
    throw ConfigError("evaluate: \"detections\" and \"annotations\" are required");

  ManifestWriter manifest("evaluate", config_path, cfg);
  const auto matched = eval::match_to_truth(read_detections(detections),
                                            read_annotations(annotations),
                                            hit_rule);
  const auto curve = eval::froc(matched);
  const auto report = eval::cpm(curve);
  fs::create_directories(out_dir);
  const std::string jpath = (fs::path(out_dir) / "froc.json").string();
  const std::string cpath = (fs::path(out_dir) / "froc.csv").string();
  eval::write_report_json(jpath, curve, report);
  eval::write_report_csv(cpath, curve);
  manifest.output(jpath);
  manifest.output(cpath);
  manifest.write(out_dir);
  std::cout << "cpm " << report.cpm << " over " << matched.scan_count
            << " scan(s), " << matched.total_targets << " target(s)\n";
  return 0;
}

int cmd_gradcheck(const std::string& config_path, const json& cfg) {
  std::uint64_t seed = 7;
  double tolerance = 1e-3;
  double fraction = 0.02;
  from_cfg(cfg, "seed", seed);
  from_cfg(cfg, "tolerance", tolerance);
  from_cfg(cfg, "fraction", fraction);

  model::PiaNetConfig mc = model::PiaNetConfig::with_side(32);
  mc.contracting_widths = {6, 8, 16, 16, 16};
  mc.expanding_widths = {16, 16, 32};
  model::PiaNet net = model::build_pianet(mc, seed);
  const auto anchors = boxes::generate_anchors(mc);

  Rng rng(seed + 1);
  Tensor5 cube(Tensor5::Shape{1, 1, 32, 32, 32});
  for (auto& v : cube.vec()) v = rng.uniform();
  const std::vector<BoxCube> gts = {{9.0, 11.0, 13.0, 7.0},
                                    {22.0, 20.0, 18.0, 10.0}};
  const auto assignment = boxes::match_anchors(anchors, gts);
  std::vector<std::array<double, 4>> targets(anchors.size(), {0, 0, 0, 0});
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const std::size_t a = assignment.anchor_of_gt[g];
    targets[a] = encode_box(gts[g], anchors.cubes[a]);
  }
  const loss::LossConfig lc;

  auto loss_fn = [&](bool with_grad) {
    const auto pred = net.forward(cube, nn::Mode::kTrain, with_grad);
    const std::size_t n = pred.logits.size();
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double m = std::max(pred.logits[i][0], pred.logits[i][1]);
      const double e0 = std::exp(pred.logits[i][0] - m);
      const double e1 = std::exp(pred.logits[i][1] - m);
      scores[i] = e1 / (e0 + e1);
    }
    std::vector<double> gs(n, 0.0);
    std::vector<std::array<double, 4>> go(n, {0, 0, 0, 0});
    const auto b = loss::multitask_loss(assignment, scores, pred.offsets,
                                        targets, nullptr, lc, &gs, &go);
    if (with_grad) {
      std::vector<std::array<double, 2>> gl(n, {0.0, 0.0});
      for (std::size_t i = 0; i < n; ++i) {
        const double d = gs[i] * scores[i] * (1.0 - scores[i]);
        gl[i] = {-d, d};
      }
      net.zero_grad();
      net.backward(go, gl);
    }
    return b.total;
  };

  // Conv biases under train-mode batchnorm have exactly zero gradient; the
  // dead zone keeps finite-difference noise there from reading as failures.
  Rng pick(seed + 2);
  const auto report =
      nn::gradcheck(loss_fn, net.params(), 1e-5, fraction, &pick, 1e-6);
  std::cout << "checked " << report.checked << " coordinates, max rel err "
            << report.max_rel_err << " at " << report.worst.name << "["
            << report.worst.element << "]\n";
  if (!report.finite) {
    std::cerr << "E_NUMERIC gradcheck produced non-finite values\n";
    return 4;
  }
  if (!report.passed(tolerance)) {
    std::cerr << "E_NUMERIC gradcheck exceeded tolerance " << tolerance << "\n";
    return 4;
  }
  std::cout << "gradcheck passed at tolerance " << tolerance << "\n";
  (void)config_path;
  return 0;
}

int cmd_slice(const std::string& config_path, const json& cfg) {
  std::string volume, detections, out_dir = "slices";
  double score_min = 0.8;
  from_cfg(cfg, "volume", volume);
  from_cfg(cfg, "detections", detections);
  from_cfg(cfg, "out_dir", out_dir);
  from_cfg(cfg, "score_min", score_min);
  if (volume.empty() || detections.empty())
    throw ConfigError("slice: \"volume\" and \"detections\" are required");

  ManifestWriter manifest("slice", config_path, cfg);
  const Volume v = read_metaimage(volume);
  const std::string scan_id = fs::path(volume).stem().string();
  fs::create_directories(out_dir);
  std::size_t written = 0;
  for (const auto& sd : read_detections(detections)) {
    if (sd.scan_id != scan_id) continue;
    for (std::size_t di = 0; di < sd.detections.size(); ++di) {
      const Detection& d = sd.detections[di];
      if (d.score < score_min || !std::isfinite(d.box.z) ||
          !std::isfinite(d.box.y) || !std::isfinite(d.box.x) ||
          !std::isfinite(d.box.r))
        continue;
      const long zc = std::llround(d.box.z / v.spacing[0]);
      if (zc < 0 || zc >= static_cast<long>(v.extents[0])) continue;
      // axial slice as 8-bit PGM with the box outline burned in
      const std::size_t H = v.extents[1], W = v.extents[2];
      std::vector<std::uint8_t> img(H * W);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          img[y * W + x] = static_cast<std::uint8_t>(std::clamp(
              v.at(static_cast<std::size_t>(zc), y, x), 0.0, 255.0));
      const long half = std::clamp<long>(
          std::llround(d.box.r / (2.0 * v.spacing[2])), 0,
          static_cast<long>(std::max(H, W)));
      const long yc = std::llround(d.box.y / v.spacing[1]);
      const long xc = std::llround(d.box.x / v.spacing[2]);
      auto put = [&](long y, long x) {
        if (y >= 0 && y < static_cast<long>(H) && x >= 0 &&
            x < static_cast<long>(W))
          img[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] =
              255;
      };
      for (long t = -half; t <= half; ++t) {
        put(yc - half, xc + t);
        put(yc + half, xc + t);
        put(yc + t, xc - half);
        put(yc + t, xc + half);
      }
      char name[64];
      std::snprintf(name, sizeof name, "%s_z%04ld_det%03zu.pgm",
                    scan_id.c_str(), zc, di);
      const std::string path = (fs::path(out_dir) / name).string();
      std::ofstream f(path, std::ios::binary);
      if (!f) throw IoError("cannot open for writing: " + path);
      f << "P5\n" << W << " " << H << "\n255\n";
      f.write(reinterpret_cast<const char*>(img.data()),
              static_cast<std::streamsize>(img.size()));
      if (!f) throw IoError("short write: " + path);
      manifest.output(path);
      ++written;
    }
  }
  manifest.write(out_dir);
  std::cout << "wrote " << written << " slice overlay(s) to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GGO detection pipeline for 3D CT volumes"};
  app.require_subcommand(1);

  struct Sub {
    CLI::App* cmd;
    std::string config;
    json overrides = json::object();
    std::set<std::string> allowed;
    int (*run)(const std::string&, const json&);
  };
  std::deque<Sub> subs;  // stable addresses; flag lambdas capture elements

  auto add = [&](const char* name, const char* desc,
                 std::set<std::string> allowed,
                 int (*run)(const std::string&, const json&)) -> Sub& {
    subs.push_back({app.add_subcommand(name, desc), "", json::object(),
                    std::move(allowed), run});
    Sub& s = subs.back();
    s.cmd->add_option("--config", s.config, "JSON config file (version 1)");
    for (const auto& key : s.allowed) {
      // every config key is also a flag; flags take precedence
      s.cmd->add_option_function<std::string>(
          "--" + key,
          [&s, key](const std::string& value) {
            try {
              s.overrides[key] = json::parse(value);
            } catch (const json::exception&) {
              s.overrides[key] = value;  // bare strings need no quoting
            }
          },
          "overrides config key " + key);
    }
    return s;
  };

  add("phantom", "generate synthetic scans with known ground truth",
      {"out_dir", "count", "seed", "side", "extents", "spacing", "nodules_min",
       "nodules_max", "diameter_min_mm", "diameter_max_mm", "contrast_min",
       "contrast_max", "noise_level", "vessel_count", "wall_count", "lung_frac",
       "hu_output"},
      cmd_phantom);
  add("preprocess", "resample, normalize, mask and crop a CT volume",
      {"input", "mask", "annotations", "out_dir", "hu_min", "hu_max",
       "crop_to_mask"},
      cmd_preprocess);
  add("pretrain", "stage-1 classifier pretraining on labeled patches",
      merge_keys({kModelKeys, kTrainKeys,
                  {"data_dir", "out", "negatives_per_positive",
                   "augment_copies"}}),
      cmd_pretrain);
  add("train", "stage-2 detector fine-tuning with hard negative mining",
      merge_keys({kModelKeys, kTrainKeys, {"data_dir", "init", "resume", "out"}}),
      cmd_train);
  add("detect", "run the detector over scans and write detections CSV",
      {"checkpoint", "data_dir", "out", "score_min", "nms_iou", "stride"},
      cmd_detect);
  add("evaluate", "FROC / CPM analysis of detections against annotations",
      {"detections", "annotations", "out_dir", "hit_rule"}, cmd_evaluate);
  add("gradcheck", "finite-difference verification of the training gradients",
      {"seed", "tolerance", "fraction"}, cmd_gradcheck);
  add("slice", "axial PGM slices with detection outlines burned in",
      {"volume", "detections", "out_dir", "score_min"}, cmd_slice);

  try {
    app.parse(argc, argv);
    for (Sub& s : subs) {
      if (!s.cmd->parsed()) continue;
      json cfg = s.config.empty() ? json{{"version", 1}}
                                  : load_config(s.config, s.allowed);
      for (const auto& [key, value] : s.overrides.items()) cfg[key] = value;
      return s.run(s.config, cfg);
    }
    return 2;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ConfigError& e) {
    std::cerr << "E_CONFIG " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "E_DATA " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "E_NUMERIC " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "E_IO " << e.what() << "\n";
    return 5;
  }
}
