#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct TmpDir {
  fs::path path;
  TmpDir() {
    path = fs::temp_directory_path() /
           ("pianet_cli_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
  static inline int counter = 0;
};

int run(const std::string& args, const std::string& log) {
  const std::string cmd =
      std::string(PIANET_CLI) + " " + args + " >" + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1 || !WIFEXITED(status)) return -1;
  return WEXITSTATUS(status);
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<char>(std::istreambuf_iterator<char>(f),
                           std::istreambuf_iterator<char>());
}

const std::string kSmallModel =
    " --cube_side 32 --contracting_widths '[6,8,16,16,16]'"
    " --expanding_widths '[16,16,32]'";

}  // namespace

TEST_CASE("unknown config keys and bad versions exit with code 2") {
  TmpDir tmp;
  {
    std::ofstream f(tmp.file("bogus.json"));
    f << "{\"version\":1,\"bogus\":3}\n";
  }
  CHECK(run("phantom --config " + tmp.file("bogus.json"),
            tmp.file("log1")) == 2);
  {
    std::ofstream f(tmp.file("vers.json"));
    f << "{\"version\":2,\"out_dir\":\"" << tmp.file("p") << "\"}\n";
  }
  CHECK(run("phantom --config " + tmp.file("vers.json"),
            tmp.file("log2")) == 2);
}

TEST_CASE("missing inputs map to the declared exit codes") {
  TmpDir tmp;
  CHECK(run("preprocess --input " + tmp.file("absent.mhd"),
            tmp.file("log1")) == 5);
  CHECK(run("detect --checkpoint " + tmp.file("absent.ck") + " --data_dir " +
                tmp.file("absent"),
            tmp.file("log2")) == 5);
  CHECK(run("evaluate --detections " + tmp.file("a.csv") + " --annotations " +
                tmp.file("b.csv") + " --out_dir " + tmp.file("r"),
            tmp.file("log3")) == 5);
  CHECK(run("train --steps 1", tmp.file("log4")) == 2);  // data_dir required
}

TEST_CASE("phantom generation is deterministic per seed") {
  TmpDir tmp;
  const std::string base =
      " --count 1 --side 48 --nodules_min 1 --nodules_max 2";
  const std::string common = base + " --seed 77";
  REQUIRE(run("phantom --out_dir " + tmp.file("a") + common,
              tmp.file("log1")) == 0);
  REQUIRE(run("phantom --out_dir " + tmp.file("b") + common,
              tmp.file("log2")) == 0);
  CHECK(slurp(tmp.file("a/scan_000.raw")) == slurp(tmp.file("b/scan_000.raw")));
  CHECK(slurp(tmp.file("a/annotations.csv")) ==
        slurp(tmp.file("b/annotations.csv")));

  REQUIRE(run("phantom --out_dir " + tmp.file("c") + base + " --seed 78",
              tmp.file("log3")) == 0);
  CHECK(slurp(tmp.file("a/scan_000.raw")) != slurp(tmp.file("c/scan_000.raw")));
}

TEST_CASE("the pipeline runs end to end on a desk-scale dataset") {
  TmpDir tmp;
  const std::string data = tmp.file("data");
  REQUIRE(run("phantom --out_dir " + data +
                  " --count 2 --seed 5 --side 48 --diameter_min_mm 8"
                  " --diameter_max_mm 14 --contrast_min 70 --contrast_max 90",
              tmp.file("log_phantom")) == 0);
  REQUIRE(fs::exists(data + "/scan_001.mhd"));

  REQUIRE(run("pretrain --data_dir " + data + " --out " + tmp.file("s1.ck") +
                  kSmallModel + " --epochs 2 --batch 4 --seed 1",
              tmp.file("log_pretrain")) == 0);
  REQUIRE(fs::exists(tmp.file("s1.ck")));

  REQUIRE(run("train --data_dir " + data + " --init " + tmp.file("s1.ck") +
                  " --out " + tmp.file("s2.ck") + kSmallModel +
                  " --steps 3 --cubes_per_step 1 --seed 2 --k_floor 4",
              tmp.file("log_train")) == 0);
  REQUIRE(fs::exists(tmp.file("s2.ck")));

  REQUIRE(run("detect --checkpoint " + tmp.file("s2.ck") + " --data_dir " +
                  data + " --out " + tmp.file("det.csv") + " --score_min 0.05",
              tmp.file("log_detect")) == 0);
  REQUIRE(fs::exists(tmp.file("det.csv")));

  REQUIRE(run("evaluate --detections " + tmp.file("det.csv") +
                  " --annotations " + data + "/annotations.csv --out_dir " +
                  tmp.file("report"),
              tmp.file("log_eval")) == 0);
  CHECK(fs::exists(tmp.file("report/froc.json")));
  CHECK(fs::exists(tmp.file("report/froc.csv")));

  CHECK(run("slice --volume " + data + "/scan_000.mhd --detections " +
                tmp.file("det.csv") + " --out_dir " + tmp.file("slices"),
            tmp.file("log_slice")) == 0);
}

TEST_CASE("checkpoint training resume continues the step schedule") {
  TmpDir tmp;
  const std::string data = tmp.file("data");
  REQUIRE(run("phantom --out_dir " + data + " --count 1 --seed 9 --side 48",
              tmp.file("log_phantom")) == 0);
  const std::string opts =
      kSmallModel + " --cubes_per_step 1 --seed 3 --k_floor 4 --data_dir " + data;
  REQUIRE(run("train " + opts + " --steps 2 --out " + tmp.file("p1.ck"),
              tmp.file("log_t1")) == 0);
  REQUIRE(run("train " + opts + " --steps 4 --resume " + tmp.file("p1.ck") +
                  " --out " + tmp.file("p2.ck"),
              tmp.file("log_t2")) == 0);
  CHECK(fs::exists(tmp.file("p2.ck")));
}

TEST_CASE("gradient verification subcommand passes") {
  TmpDir tmp;
  CHECK(run("gradcheck --seed 7 --fraction 0.004", tmp.file("log")) == 0);
}
