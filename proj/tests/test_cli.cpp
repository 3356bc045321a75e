#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string binary() {
  const char* env = std::getenv("GNFLOW_BIN");
  REQUIRE_MESSAGE(env != nullptr, "GNFLOW_BIN must point at the gnflow executable");
  return env;
}

int run(const std::string& args) {
  const std::string cmd = binary() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("gnflow_test_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("generate: header contract and byte-identical reruns") {
  TempDir tmp;
  const std::string data = tmp / "tri.gnf";
  CHECK(run("generate --system triangle --nodes 5 --times 100 --samples 200 --seed 7 --out " +
            data) == 0);
  std::ifstream f(data);
  std::string header;
  std::getline(f, header);
  CHECK(header == "gnflow-data-v1 triangle 5 1 100 200 7");
  CHECK(fs::exists(data + ".dag.csv"));

  const std::string data2 = tmp / "tri2.gnf";
  CHECK(run("generate --system triangle --nodes 5 --times 100 --samples 200 --seed 7 --out " +
            data2) == 0);
  CHECK(slurp(data) == slurp(data2));
  CHECK(slurp(data + ".dag.csv") == slurp(data2 + ".dag.csv"));
}

TEST_CASE("generate: usage errors exit with code 2") {
  CHECK(run("generate --nodes 0") == 2);
  CHECK(run("generate --system hexagon --out /dev/null") == 2);
  CHECK(run("") == 2);  // missing subcommand
}

TEST_CASE("train/eval: artifacts, determinism of h(A) column, exit codes") {
  TempDir tmp;
  const std::string data = tmp / "d.gnf";
  REQUIRE(run("generate --system triangle --nodes 3 --times 8 --samples 24 --seed 3 --out " +
              data) == 0);

  const std::string run_none = tmp / "run_none";
  CHECK(run("train --data " + data + " --arch resnet --graph none --epochs 3 --patience 3 "
            "--batch 8 --seed 5 --out-dir " + run_none) == 0);
  CHECK(fs::exists(run_none + "/manifest.txt"));
  CHECK(fs::exists(run_none + "/history.csv"));
  CHECK(fs::exists(run_none + "/model.ckpt"));
  CHECK(fs::exists(run_none + "/metrics.json"));
  {
    std::ifstream mf(run_none + "/manifest.txt");
    std::string first;
    std::getline(mf, first);
    CHECK(first == "gnflow-manifest-v1");
  }

  const std::string run_learned = tmp / "run_learned";
  CHECK(run("train --data " + data + " --arch resnet --graph learned --epochs 3 --patience 3 "
            "--batch 8 --outer 2 --seed 5 --out-dir " + run_learned) == 0);
  const std::string hist = slurp(run_learned + "/history.csv");
  CHECK(hist.find("# gnflow-history-v1") == 0);
  CHECK(hist.find("h_A") != std::string::npos);

  // eval with and without a truth DAG
  const std::string metrics = tmp / "m.json";
  CHECK(run("eval --checkpoint " + run_learned + "/model.ckpt --data " + data +
            " --truth " + data + ".dag.csv --threshold 0.3 --out " + metrics) == 0);
  const std::string mj = slurp(metrics);
  CHECK(mj.find("gnflow-metrics-v1") != std::string::npos);
  CHECK(mj.find("\"mse\"") != std::string::npos);
  CHECK(mj.find("\"shd\"") != std::string::npos);
  CHECK(mj.find("\"threshold\": 0.3") != std::string::npos);

  const std::string metrics2 = tmp / "m2.json";
  CHECK(run("eval --checkpoint " + run_learned + "/model.ckpt --data " + data + " --out " +
            metrics2) == 0);
  const std::string mj2 = slurp(metrics2);
  CHECK(mj2.find("\"mse\"") != std::string::npos);
  CHECK(mj2.find("\"shd\"") == std::string::npos);

  // data errors exit with 3, unknown arch with 2
  CHECK(run("train --data " + tmp / "missing.gnf" + " --out-dir " + tmp / "x") == 3);
  CHECK(run("train --data " + data + " --arch transformer --out-dir " + tmp / "y") == 2);
  CHECK(run("eval --checkpoint " + tmp / "nope.ckpt" + " --data " + data) == 3);
}

TEST_CASE("study and bench: version headers and row counts") {
  TempDir tmp;
  const std::string data = tmp / "d.gnf";
  REQUIRE(run("generate --system triangle --nodes 3 --times 6 --samples 16 --seed 9 --out " +
              data) == 0);

  const std::string study = tmp / "study.csv";
  CHECK(run("study --data " + data + " --sigmas 0,0.2 --seeds 1 --epochs 2 --outer 1 "
            "--batch 8 --out " + study) == 0);
  std::ifstream sf(study);
  std::string line;
  std::getline(sf, line);
  CHECK(line == "# gnflow-study-v1");
  std::getline(sf, line);
  CHECK(line == "sigma,seed,tpr,fdr,fpr,shd,mse,h_A");
  int rows = 0;
  while (std::getline(sf, line)) ++rows;
  CHECK(rows == 2);

  const std::string bench = tmp / "bench.csv";
  CHECK(run("bench --data " + data + " --epochs 1 --batch 8 --out " + bench) == 0);
  std::ifstream bf(bench);
  std::getline(bf, line);
  CHECK(line == "# gnflow-bench-v1");
  std::getline(bf, line);
  CHECK(line == "arch,graph,epochs,seconds_per_epoch");
  rows = 0;
  while (std::getline(bf, line)) ++rows;
  CHECK(rows == 6);
}

TEST_CASE("GNFLOW_SEED environment default") {
  TempDir tmp;
  const std::string d1 = tmp / "a.gnf";
  const std::string d2 = tmp / "b.gnf";
  const std::string base = "generate --system sawtooth --nodes 3 --times 5 --samples 4 --out ";
  const std::string cmd1 = "GNFLOW_SEED=42 " + binary() + " " + base + d1 + " >/dev/null 2>&1";
  REQUIRE(std::system(cmd1.c_str()) == 0);
  REQUIRE(run(base + d2 + " --seed 42") == 0);
  CHECK(slurp(d1) == slurp(d2));
}
