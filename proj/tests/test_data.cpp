#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "pianet/data/augment.hpp"
#include "pianet/data/cubes.hpp"
#include "pianet/data/io.hpp"
#include "pianet/data/phantom.hpp"
#include "pianet/data/volume.hpp"
#include "pianet/errors.hpp"
#include "pianet/rng.hpp"

using namespace pianet;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
  fs::path path;
  TmpDir() {
    path = fs::temp_directory_path() /
           ("pianet_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
  static inline int counter = 0;
};

Volume ramp_volume(std::array<std::size_t, 3> ext, std::array<double, 3> sp,
                   double az, double ay, double ax, double d) {
  Volume v;
  v.extents = ext;
  v.spacing = sp;
  v.data.resize(v.voxel_count());
  for (std::size_t z = 0; z < ext[0]; ++z)
    for (std::size_t y = 0; y < ext[1]; ++y)
      for (std::size_t x = 0; x < ext[2]; ++x)
        v.data[v.index(z, y, x)] =
            az * z * sp[0] + ay * y * sp[1] + ax * x * sp[2] + d;
  return v;
}

}  // namespace

TEST_CASE("isotropic resampling is exact on a field linear in mm") {
  const Volume v =
      ramp_volume({20, 16, 12}, {2.5, 0.7, 1.3}, 3.0, -2.0, 1.5, 40.0);
  const Volume r = resample_isotropic(v);
  CHECK(r.extents[0] == (std::size_t)std::llround(20 * 2.5));
  CHECK(r.extents[1] == (std::size_t)std::llround(16 * 0.7));
  CHECK(r.extents[2] == (std::size_t)std::llround(12 * 1.3));
  CHECK(r.spacing == std::array<double, 3>{1.0, 1.0, 1.0});
  // trilinear interpolation reproduces a linear field away from the borders
  double worst = 0.0;
  for (std::size_t z = 3; z + 4 < r.extents[0]; z += 2)
    for (std::size_t y = 1; y + 2 < r.extents[1]; ++y)
      for (std::size_t x = 1; x + 2 < r.extents[2]; ++x) {
        const double want = 3.0 * z - 2.0 * y + 1.5 * x + 40.0;
        worst = std::max(worst, std::abs(r.at(z, y, x) - want));
      }
  CHECK(worst < 1e-9);
}

TEST_CASE("resampling an already isotropic volume changes nothing") {
  Volume v = ramp_volume({6, 7, 8}, {1.0, 1.0, 1.0}, 1.0, 2.0, 3.0, 5.0);
  v.mask.assign(v.voxel_count(), 0);
  v.mask[v.index(3, 3, 3)] = 1;
  const Volume r = resample_isotropic(v);
  CHECK(r.extents == v.extents);
  CHECK(r.data == v.data);
  CHECK(r.mask == v.mask);
}

TEST_CASE("intensity normalization maps and clamps the HU window") {
  Volume v;
  v.extents = {1, 1, 5};
  v.data = {-2000.0, -1200.0, -300.0, 600.0, 3000.0};
  const Volume n = normalize_intensity(v);
  CHECK(n.data[0] == 0.0);
  CHECK(n.data[1] == 0.0);
  CHECK(n.data[2] == doctest::Approx(255.0 * 900.0 / 1800.0).epsilon(1e-12));
  CHECK(n.data[3] == 255.0);
  CHECK(n.data[4] == 255.0);
}

TEST_CASE("lung masking zeroes outside and requires a mask") {
  Volume v = ramp_volume({4, 4, 4}, {1, 1, 1}, 0.0, 0.0, 0.0, 9.0);
  CHECK_THROWS_AS(apply_lung_mask(v), ConfigError);
  v.mask.assign(v.voxel_count(), 0);
  v.mask[v.index(1, 2, 3)] = 1;
  const Volume m = apply_lung_mask(v);
  for (std::size_t i = 0; i < m.data.size(); ++i)
    CHECK(m.data[i] == (v.mask[i] ? 9.0 : 0.0));
}

TEST_CASE("mask cropping returns the bounding box and its origin") {
  Volume v = ramp_volume({10, 9, 8}, {1, 1, 1}, 1.0, 10.0, 100.0, 0.0);
  v.mask.assign(v.voxel_count(), 0);
  for (std::size_t z = 2; z <= 6; ++z)
    for (std::size_t y = 1; y <= 3; ++y)
      for (std::size_t x = 4; x <= 7; ++x) v.mask[v.index(z, y, x)] = 1;
  std::array<std::size_t, 3> origin{};
  const Volume c = crop_to_mask(v, origin);
  CHECK(origin == std::array<std::size_t, 3>{2, 1, 4});
  CHECK(c.extents == std::array<std::size_t, 3>{5, 3, 4});
  CHECK(c.at(0, 0, 0) == v.at(2, 1, 4));
  CHECK(c.at(4, 2, 3) == v.at(6, 3, 7));
  CHECK(c.mask.size() == c.voxel_count());
}

TEST_CASE("sliding-window tiling counts and origin properties") {
  CHECK(tiling_count(252, 128, 64) == 4);
  CHECK(tiling_count(222, 128, 64) == 3);
  CHECK(tiling_count(192, 128, 64) == 2);
  CHECK(tiling_count(128, 128, 64) == 1);
  CHECK(tiling_count(60, 128, 64) == 1);
  CHECK(tiling_origins(60, 128, 64) == std::vector<std::size_t>{0});

  for (std::size_t extent : {129u, 160u, 192u, 222u, 252u, 300u, 511u}) {
    const auto o = tiling_origins(extent, 128, 64);
    REQUIRE(o.size() == tiling_count(extent, 128, 64));
    REQUIRE(o.size() >= 2);
    CHECK(o.front() == 0);
    CHECK(o.back() == extent - 128);
    for (std::size_t i = 1; i < o.size(); ++i) {
      CHECK(o[i] > o[i - 1]);
      CHECK(o[i] - o[i - 1] <= 128);  // full coverage
    }
  }
}

TEST_CASE("cube extraction attaches truths to the covering windows") {
  Volume v = ramp_volume({192, 130, 96}, {1, 1, 1}, 0.0, 0.0, 0.0, 128.0);
  const std::vector<BoxCube> truths{{40.0, 50.0, 30.0, 8.0},
                                    {90.0, 100.0, 180.0, 10.0}};
  const auto cubes = extract_cubes(v, truths, 128, 64);
  REQUIRE(cubes.size() == tiling_count(192, 128, 64) *
                              tiling_count(130, 128, 64) *
                              tiling_count(96, 128, 64));
  std::size_t attached = 0;
  for (const auto& c : cubes) {
    CHECK(c.cube.shape() == Tensor5::Shape{1, 1, 128, 128, 128});
    for (const auto& t : c.truths) {
      ++attached;
      CHECK(t.x >= 0.0);
      CHECK(t.x < 128.0);
      CHECK(t.y >= 0.0);
      CHECK(t.y < 128.0);
      CHECK(t.z >= 0.0);
      CHECK(t.z < 128.0);
      // local + origin reproduces one of the scan-space truths
      const double gx = t.x + c.origin[2];
      const double gy = t.y + c.origin[1];
      const double gz = t.z + c.origin[0];
      const bool hit =
          std::any_of(truths.begin(), truths.end(), [&](const BoxCube& g) {
            return g.x == gx && g.y == gy && g.z == gz && g.r == t.r;
          });
      CHECK(hit);
    }
  }
  CHECK(attached >= truths.size());
}

TEST_CASE("cut_cube pads with zero and scales to [0,1]") {
  Volume v = ramp_volume({8, 8, 8}, {1, 1, 1}, 0.0, 0.0, 0.0, 0.0);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = 255.0;
  v.data[v.index(2, 3, 4)] = 51.0;
  const Tensor5 t = cut_cube(v, {4, 4, 4}, 8);
  CHECK(t.shape() == Tensor5::Shape{1, 1, 8, 8, 8});
  CHECK(t.at(0, 0, 0, 0, 0) == 1.0);          // v(4,4,4)
  CHECK(t.at(0, 0, 3, 3, 3) == 1.0);          // v(7,7,7)
  CHECK(t.at(0, 0, 4, 0, 0) == 0.0);          // beyond the volume
  CHECK(t.at(0, 0, 7, 7, 7) == 0.0);
  const Tensor5 u = cut_cube(v, {0, 0, 0}, 8);
  CHECK(u.at(0, 0, 2, 3, 4) == doctest::Approx(51.0 / 255.0).epsilon(1e-12));
}

TEST_CASE("stitching translates to scan space and prunes duplicates") {
  std::vector<std::pair<std::array<std::size_t, 3>, std::vector<Detection>>>
      per_cube;
  // same physical box seen from two overlapping windows
  per_cube.push_back({{0, 0, 0}, {{{70.0, 70.0, 70.0, 10.0}, 0.9}}});
  per_cube.push_back({{64, 64, 64}, {{{6.0, 6.0, 6.0, 10.0}, 0.8}}});
  // a distinct second box
  per_cube.push_back({{0, 0, 0}, {{{20.0, 20.0, 20.0, 8.0}, 0.7}}});
  const auto out = stitch_detections(per_cube, 0.1);
  REQUIRE(out.size() == 2);
  CHECK(out[0].score == 0.9);
  CHECK(out[0].box.x == 70.0);
  CHECK(out[0].box.z == 70.0);
  CHECK(out[1].score == 0.7);
  // at threshold 1.0 even the exact duplicate survives, translated
  const auto raw = stitch_detections(per_cube, 1.0);
  CHECK(raw.size() == 3);
  CHECK(raw[1].box.x == 70.0);
}

TEST_CASE("axis flips are exact involutions that track boxes") {
  Rng rng(3);
  CubeSample s;
  s.cube = Tensor5(1, 1, 16, 16, 16);
  for (auto& v : s.cube.vec()) v = rng.uniform();
  s.truths = {{3.0, 5.0, 7.0, 4.0}, {10.0, 12.0, 2.0, 6.0}};
  const CubeSample f = flip_axes(s, true, false, true);
  CHECK(f.truths[0].z == 15.0 - 7.0);  // z mirrored about side - 1
  CHECK(f.truths[0].x == 15.0 - 3.0);  // x mirrored too
  CHECK(f.truths[0].y == 5.0);         // y untouched
  const CubeSample back = flip_axes(f, true, false, true);
  CHECK(back.cube.vec() == s.cube.vec());
  for (std::size_t i = 0; i < s.truths.size(); ++i) {
    CHECK(back.truths[i].x == s.truths[i].x);
    CHECK(back.truths[i].y == s.truths[i].y);
    CHECK(back.truths[i].z == s.truths[i].z);
    CHECK(back.truths[i].r == s.truths[i].r);
  }
}

TEST_CASE("augmentation operators keep a marker voxel under the box center") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    CubeSample s;
    const std::size_t side = 32;
    s.cube = Tensor5(1, 1, side, side, side);
    const std::size_t mz = 8 + rng.below(16), my = 8 + rng.below(16),
                      mx = 8 + rng.below(16);
    s.cube.at(0, 0, mz, my, mx) = 1.0;
    s.truths = {{(double)mx, (double)my, (double)mz, 6.0}};

    AugmentConfig cfg;
    cfg.resize = false;  // keep the marker a single crisp voxel
    const CubeSample a = augment(s, cfg, rng);
    REQUIRE(a.truths.size() == 1);
    const auto& t = a.truths[0];
    CHECK(t.x > 0.0);
    CHECK(t.x < (double)side);
    CHECK(t.y > 0.0);
    CHECK(t.y < (double)side);
    CHECK(t.z > 0.0);
    CHECK(t.z < (double)side);
    // the brightest voxel moved with the box center
    double best = -1.0;
    std::size_t bz = 0, by = 0, bx = 0;
    for (std::size_t z = 0; z < side; ++z)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
          if (a.cube.at(0, 0, z, y, x) > best) {
            best = a.cube.at(0, 0, z, y, x);
            bz = z;
            by = y;
            bx = x;
          }
    CHECK(best > 0.5);
    CHECK(std::abs((double)bx - t.x) <= 1.0);
    CHECK(std::abs((double)by - t.y) <= 1.0);
    CHECK(std::abs((double)bz - t.z) <= 1.0);
  }
}

TEST_CASE("resizing scales box sides along with the voxel grid") {
  Rng rng(5);
  CubeSample s;
  s.cube = Tensor5(1, 1, 32, 32, 32);
  for (auto& v : s.cube.vec()) v = rng.uniform();
  s.truths = {{16.0, 16.0, 16.0, 8.0}};
  for (int t = 0; t < 10; ++t) {
    const CubeSample r = augment_resize(s, rng);
    REQUIRE(r.truths.size() == 1);
    const double f = r.truths[0].r / 8.0;
    CHECK(f >= 0.9 - 1e-9);
    CHECK(f <= 1.1 + 1e-9);
    CHECK(r.truths[0].x == doctest::Approx(16.0 * f).epsilon(1e-9));
    CHECK(r.cube.shape() == s.cube.shape());
  }
}

TEST_CASE("phantoms are deterministic and anatomically plausible") {
  PhantomSpec spec;
  spec.seed = 42;
  spec.extents = {64, 64, 64};
  const auto [v1, a1] = generate_phantom(spec);
  const auto [v2, a2] = generate_phantom(spec);
  CHECK(v1.data == v2.data);
  CHECK(v1.mask == v2.mask);
  REQUIRE(a1.nodules.size() == a2.nodules.size());
  CHECK(a1.scan_id == "phantom");

  REQUIRE(v1.has_mask());
  REQUIRE(a1.nodules.size() >= spec.nodules_min);
  CHECK(a1.nodules.size() <= spec.nodules_max);
  for (const auto& n : a1.nodules) {
    CHECK(n.diameter_mm >= spec.diameter_min_mm);
    CHECK(n.diameter_mm <= spec.diameter_max_mm);
    CHECK(is_target(n));
    // center sits inside the lung mask (coordinates are mm = voxels here)
    const auto z = (std::size_t)std::llround(n.z_mm);
    const auto y = (std::size_t)std::llround(n.y_mm);
    const auto x = (std::size_t)std::llround(n.x_mm);
    REQUIRE(z < v1.extents[0]);
    CHECK(v1.mask[v1.index(z, y, x)] == 1);
    // nodule center is brighter than the local background
    CHECK(v1.at(z, y, x) > spec.background_level + spec.contrast_min / 2.0);
  }
  for (double d : v1.data) {
    CHECK(d >= 0.0);
    CHECK(d <= 255.0);
  }

  PhantomSpec other = spec;
  other.seed = 43;
  const auto [v3, a3] = generate_phantom(other);
  CHECK(v3.data != v1.data);
}

TEST_CASE("HU phantoms live in the Hounsfield window") {
  PhantomSpec spec;
  spec.seed = 7;
  spec.hu_output = true;
  const auto [v, a] = generate_phantom(spec);
  double lo = 1e9, hi = -1e9;
  for (double d : v.data) {
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  CHECK(lo >= -1200.0);
  CHECK(hi <= 600.0);
  CHECK(lo < -500.0);  // air-like background
  // normalizing brings it back to the display window
  const Volume n = normalize_intensity(v);
  for (double d : n.data) {
    CHECK(d >= 0.0);
    CHECK(d <= 255.0);
  }
}

TEST_CASE("patch cropping produces both classes with clean negatives") {
  PhantomSpec spec;
  spec.seed = 11;
  spec.extents = {96, 96, 96};
  spec.nodules_min = 2;
  spec.nodules_max = 3;
  spec.contrast_min = 80.0;
  spec.contrast_max = 90.0;
  auto [v, ann] = generate_phantom(spec);
  std::vector<BoxCube> boxes;
  for (const auto& n : ann.nodules)
    boxes.push_back({n.x_mm, n.y_mm, n.z_mm, n.diameter_mm});

  PatchConfig pc;
  pc.patch_side = 32;
  Rng rng(12);
  const auto patches = crop_patches(v, boxes, pc, rng);
  std::size_t pos = 0, neg = 0;
  for (const auto& p : patches) {
    CHECK(p.patch.shape() == Tensor5::Shape{1, 1, 32, 32, 32});
    (p.label == 1 ? pos : neg)++;
    for (double d : p.patch.vec()) {
      CHECK(d >= 0.0);
      CHECK(d <= 1.0);
    }
  }
  CHECK(pos >= boxes.size());  // originals plus augmented copies
  CHECK(neg > 0);
}

TEST_CASE("metaimage roundtrips") {
  TmpDir tmp;
  Rng rng(21);
  Volume v;
  v.extents = {5, 6, 7};
  v.spacing = {2.0, 0.75, 0.75};
  v.data.resize(v.voxel_count());
  for (auto& d : v.data) d = rng.uniform(-1000.0, 500.0);

  SUBCASE("doubles are bit-exact") {
    write_metaimage(tmp.file("v.mhd"), v, ElementType::kDouble);
    const Volume r = read_metaimage(tmp.file("v.mhd"));
    CHECK(r.extents == v.extents);
    CHECK(r.spacing == v.spacing);
    CHECK(r.data == v.data);
  }

  SUBCASE("shorts round to integers") {
    for (auto& d : v.data) d = std::floor(d);
    write_metaimage(tmp.file("s.mhd"), v, ElementType::kShort);
    const Volume r = read_metaimage(tmp.file("s.mhd"));
    CHECK(r.data == v.data);
  }

  SUBCASE("masks ride along as MET_UCHAR") {
    v.mask.assign(v.voxel_count(), 0);
    v.mask[3] = 1;
    v.mask[100] = 1;
    write_mask_metaimage(tmp.file("m.mhd"), v);
    Volume r = v;
    r.mask.clear();
    read_mask_metaimage(tmp.file("m.mhd"), r);
    CHECK(r.mask == v.mask);
  }

  SUBCASE("truncated payload raises an IO error") {
    write_metaimage(tmp.file("t.mhd"), v, ElementType::kDouble);
    fs::resize_file(tmp.file("t.raw"), 16);
    CHECK_THROWS_AS(read_metaimage(tmp.file("t.mhd")), DataError);
  }

  SUBCASE("missing file raises an IO error") {
    CHECK_THROWS_AS(read_metaimage(tmp.file("absent.mhd")), IoError);
  }
}

TEST_CASE("flat volume roundtrip is bit-exact") {
  TmpDir tmp;
  Rng rng(22);
  Volume v;
  v.extents = {4, 3, 9};
  v.spacing = {1.0, 1.0, 1.0};
  v.data.resize(v.voxel_count());
  for (auto& d : v.data) d = rng.normal();
  v.mask.assign(v.voxel_count(), 0);
  v.mask[5] = 1;
  write_flat_volume(tmp.file("v.piavol"), v);
  const Volume r = read_flat_volume(tmp.file("v.piavol"));
  CHECK(r.extents == v.extents);
  CHECK(r.data == v.data);
  CHECK(r.mask == v.mask);
}

TEST_CASE("annotation CSV roundtrip and validation") {
  TmpDir tmp;
  std::vector<ScanAnnotation> scans(2);
  scans[0].scan_id = "s1";
  scans[0].nodules = {{10.5, 20.25, 30.125, 8.0, 4, true},
                      {50.0, 60.0, 70.0, 12.5, 2, false}};
  scans[1].scan_id = "s2";
  scans[1].nodules = {{1.0, 2.0, 3.0, 4.0, 3, true}};
  write_annotations(tmp.file("a.csv"), scans);
  const auto back = read_annotations(tmp.file("a.csv"));
  REQUIRE(back.size() == 2);
  CHECK(back[0].scan_id == "s1");
  REQUIRE(back[0].nodules.size() == 2);
  CHECK(back[0].nodules[0].x_mm == 10.5);
  CHECK(back[0].nodules[0].agreement == 4);
  CHECK(back[0].nodules[1].relevant == false);
  CHECK(back[1].nodules.size() == 1);

  std::FILE* f = std::fopen(tmp.file("bad.csv").c_str(), "w");
  std::fputs("scan_id,x_mm,y_mm,z_mm,diameter_mm,agreement,relevant\n", f);
  std::fputs("s1,1,2,3,4,5,1\n", f);  // agreement out of range
  std::fclose(f);
  CHECK_THROWS_AS(read_annotations(tmp.file("bad.csv")), DataError);
}

TEST_CASE("detection CSV roundtrip") {
  TmpDir tmp;
  std::vector<ScanDetections> scans(1);
  scans[0].scan_id = "s9";
  scans[0].detections = {{{1.5, 2.5, 3.5, 8.0}, 0.75},
                         {{10.0, 11.0, 12.0, 16.0}, 0.25}};
  write_detections(tmp.file("d.csv"), scans);
  const auto back = read_detections(tmp.file("d.csv"));
  REQUIRE(back.size() == 1);
  REQUIRE(back[0].detections.size() == 2);
  CHECK(back[0].detections[0].box.y == 2.5);
  CHECK(back[0].detections[1].score == 0.25);
  CHECK_THROWS_AS(read_detections(tmp.file("nope.csv")), IoError);
}
