#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

TEST_SUITE_BEGIN("cli");

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

CmdResult run_cli(const std::string& args) {
  static int counter = 0;
  const std::string base =
      (fs::temp_directory_path() / ("armamba_cli_" + std::to_string(counter++))).string();
  const std::string cmd = std::string(ARMAMBA_CLI_PATH) + " " + args + " >" + base + ".out 2>" +
                          base + ".err";
  const int rc = std::system(cmd.c_str());
  CmdResult r;
  r.exit_code = WEXITSTATUS(rc);
  r.out = slurp(base + ".out");
  r.err = slurp(base + ".err");
  return r;
}

std::string temp_dir(const std::string& name) {
  const std::string dir = (fs::temp_directory_path() / ("armamba_cli_" + name)).string();
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("layout subcommand reports the 192/16/64 geometry") {
  CmdResult r = run_cli("layout --image 192 --patch 16 --cluster 64 --order row-forward");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("9 clusters, grid 3x3, k=16") != std::string::npos);
  CHECK(r.out.find("perm=[0,1,2,3,4,5,6,7,8]") != std::string::npos);
}

TEST_CASE("layout rejects non-divisible geometry with exit 2") {
  CmdResult r = run_cli("layout --image 192 --patch 16 --cluster 50");
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("not divisible") != std::string::npos);
}

TEST_CASE("layout col-forward permutation on the 3x3 grid") {
  CmdResult r = run_cli("layout --image 192 --patch 16 --cluster 64 --order col-forward");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("perm=[0,3,6,1,4,7,2,5,8]") != std::string::npos);
}

TEST_CASE("selfcheck fast passes on a pristine build") {
  CmdResult r = run_cli("selfcheck --level fast");
  CHECK(r.exit_code == 0);
  CHECK(r.err.find("all passed") != std::string::npos);
}

TEST_CASE("fault injection: corrupted zoh threshold fails naming the invariant") {
  CmdResult r = run_cli("selfcheck --level fast --corrupt-zoh-threshold 0.25");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("[FAIL]") != std::string::npos);
  CHECK(r.err.find("zoh continuity") != std::string::npos);
}

TEST_CASE("bench emits the documented CSV schema and a sequential baseline") {
  CmdResult r = run_cli("bench --kernel scan --L 512 --D 8 --N 4 --workers 1 2 --reps 1");
  CHECK(r.exit_code == 0);
  CHECK(r.out.rfind("path,L,N,D,workers,wall_ns,throughput_tokens_per_s\n", 0) == 0);
  CHECK(r.out.find("sequential,512,4,8,1,") != std::string::npos);
  CHECK(r.out.find("parallel,512,4,8,2,") != std::string::npos);
}

TEST_CASE("unknown config keys are rejected with exit 2, naming the key") {
  const std::string dir = temp_dir("badcfg");
  {
    std::ofstream f(dir + "/cfg.json");
    f << "{\"model\": {\"width\": 16, \"depht\": 2}}";
  }
  CmdResult r = run_cli("pretrain --config " + dir + "/cfg.json --out " + dir + "/out");
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("depht") != std::string::npos);
}

TEST_CASE("synth + pretrain + finetune + eval round trip on a toy config") {
  const std::string dir = temp_dir("pipeline");
  CmdResult s = run_cli("synth --out " + dir + "/d.armd --classes 4 --train-per-class 8 " +
                        "--val-per-class 4 --size 16 --seed 5");
  REQUIRE(s.exit_code == 0);
  {
    std::ofstream f(dir + "/cfg.json");
    f << R"({"model": {"width": 16, "depth": 1, "state_dim": 2, "patch_size": 4,
             "cluster_size": 8, "image_h": 16, "image_w": 16, "dec_depth": 1,
             "dec_width": 16, "num_classes": 4},
             "train": {"batch_size": 8, "epochs": 1, "warmup_epochs": 1,
             "base_lr": 0.008, "ema_decay": 0.9, "dataset": ")" +
             dir + R"(/d.armd"}})";
  }
  CmdResult p = run_cli("pretrain --config " + dir + "/cfg.json --out " + dir +
                        "/pre --seed 1 --deterministic");
  REQUIRE(p.exit_code == 0);
  CHECK(fs::exists(dir + "/pre/final.armc"));
  CHECK(fs::exists(dir + "/pre/ckpt_epoch_0.armc"));
  CHECK(fs::exists(dir + "/pre/metrics.csv"));

  CmdResult f = run_cli("finetune --config " + dir + "/cfg.json --ckpt " + dir +
                        "/pre/final.armc --out " + dir + "/fin --seed 1 --deterministic");
  REQUIRE(f.exit_code == 0);
  CHECK(f.out.find("best_top1,") != std::string::npos);

  CmdResult e = run_cli("eval --config " + dir + "/cfg.json --ckpt " + dir +
                        "/fin/best.armc --seed 1");
  REQUIRE(e.exit_code == 0);
  CHECK(e.out.find("metric,value\ntop1,") != std::string::npos);

  // eval top-1 must match the training log's best row
  const std::string fin_out = f.out;
  const std::string eval_out = e.out;
  const double best = std::stod(fin_out.substr(fin_out.find("best_top1,") + 10));
  const double top1 = std::stod(eval_out.substr(eval_out.find("top1,") + 5));
  CHECK(top1 == doctest::Approx(best).epsilon(1e-9));
}

TEST_CASE("deterministic rerun produces byte-stable artifacts") {
  const std::string dir = temp_dir("stable");
  CmdResult s = run_cli("synth --out " + dir + "/d.armd --classes 4 --train-per-class 8 " +
                        "--val-per-class 4 --size 16 --seed 5");
  REQUIRE(s.exit_code == 0);
  {
    std::ofstream f(dir + "/cfg.json");
    f << R"({"model": {"width": 16, "depth": 1, "state_dim": 2, "patch_size": 4,
             "cluster_size": 8, "image_h": 16, "image_w": 16, "dec_depth": 1,
             "dec_width": 16},
             "train": {"batch_size": 8, "epochs": 1, "warmup_epochs": 1,
             "base_lr": 0.008, "dataset": ")" + dir + R"(/d.armd"}})";
  }
  for (const char* out : {"/a", "/b"}) {
    CmdResult p = run_cli("pretrain --config " + dir + "/cfg.json --out " + dir + out +
                          " --seed 9 --deterministic");
    REQUIRE(p.exit_code == 0);
  }
  CHECK(slurp(dir + "/a/metrics.csv") == slurp(dir + "/b/metrics.csv"));
  CHECK(slurp(dir + "/a/final.armc") == slurp(dir + "/b/final.armc"));
  CHECK(!slurp(dir + "/a/final.armc").empty());
}

TEST_SUITE_END();
