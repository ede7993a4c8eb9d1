// armamba: autoregressive pretraining for Mamba-style vision models.
// Subcommands cover layout inspection, invariant self-checks, scan-kernel
// benchmarks, dataset tooling and the pretrain/finetune/eval pipeline.
// Human-readable output goes to stderr, machine-readable (CSV) to stdout.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "armamba/blocks.hpp"
#include "armamba/checkpoint.hpp"
#include "armamba/config.hpp"
#include "armamba/dataio.hpp"
#include "armamba/layout.hpp"
#include "armamba/selfcheck.hpp"
#include "armamba/ssm.hpp"
#include "armamba/threadpool.hpp"
#include "armamba/trainer.hpp"

namespace {

using namespace armamba;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonOpts {
  uint64_t seed = 0;
  bool deterministic = false;
  int workers = 1;
  std::vector<std::string> overrides;
  std::string config_path;
};

void add_common(CLI::App* cmd, CommonOpts& c, bool with_config) {
  cmd->add_option("--seed", c.seed, "RNG seed");
  cmd->add_flag("--deterministic", c.deterministic,
                "byte-stable artifacts (wall-clock columns zeroed)");
  cmd->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
  if (with_config) {
    cmd->add_option("--config", c.config_path, "JSON config file")->required();
    cmd->add_option("--set", c.overrides, "override, e.g. model.width=128")->take_all();
  }
}

config::FullConfig load_cfg(const CommonOpts& c) {
  config::FullConfig cfg = config::load_config_file(c.config_path);
  return config::apply_overrides(cfg, c.overrides);
}

int cmd_layout(int64_t image, int64_t patch, int64_t cluster, const std::string& order,
               uint64_t seed) {
  layout::ClusterLayout lay =
      layout::make_layout(image, image, patch, cluster, layout::order_from_name(order), seed);
  std::string perm = "[";
  for (size_t i = 0; i < lay.perm.size(); ++i)
    perm += (i ? "," : "") + std::to_string(lay.perm[i]);
  perm += "]";
  std::printf("%lld clusters, grid %lldx%lld, k=%lld, perm=%s\n", (long long)lay.num_clusters(),
              (long long)lay.grid_h(), (long long)lay.grid_w(),
              (long long)lay.patches_per_cluster(), perm.c_str());
  return kExitOk;
}

int cmd_selfcheck(const std::string& level, double corrupt_zoh_threshold, uint64_t seed) {
  if (corrupt_zoh_threshold > 0) ssm::zoh_series_threshold() = corrupt_zoh_threshold;
  const auto results = selfcheck::run(level == "full", seed);
  bool all_ok = true;
  for (const auto& r : results) {
    all_ok = all_ok && r.passed;
    std::fprintf(stderr, "[%s] %s: %s%s%s\n", r.passed ? "PASS" : "FAIL", r.module.c_str(),
                 r.name.c_str(), r.detail.empty() ? "" : " -- ", r.detail.c_str());
  }
  std::fprintf(stderr, "%zu checks, %s\n", results.size(), all_ok ? "all passed" : "FAILURES");
  return all_ok ? kExitOk : kExitCheckFailed;
}

int cmd_bench(int64_t l, int64_t d, int64_t n, const std::vector<int>& workers, int reps,
              uint64_t seed, bool deterministic) {
  Rng rng(seed + 12);
  Tensor a_bar = Tensor::empty({1, l, d, n}, DType::f32);
  Tensor b_bar = Tensor::empty({1, l, d, n}, DType::f32);
  Tensor c = Tensor::empty({1, l, n}, DType::f32);
  Tensor x = Tensor::empty({1, l, d}, DType::f32);
  for (int64_t i = 0; i < a_bar.numel(); ++i) a_bar.set(i, rng.uniform(0.05, 0.98));
  for (int64_t i = 0; i < b_bar.numel(); ++i) b_bar.set(i, rng.uniform(-0.5, 0.5));
  for (int64_t i = 0; i < c.numel(); ++i) c.set(i, rng.uniform(-1.0, 1.0));
  for (int64_t i = 0; i < x.numel(); ++i) x.set(i, rng.uniform(-1.0, 1.0));
  NoGradGuard ng;

  auto time_ns = [&](auto&& fn) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      const auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, double(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
    }
    return best;
  };

  // deterministic mode zeroes the timing columns so output bytes are stable
  auto emit = [&](const char* path, int w, double ns) {
    if (deterministic)
      std::printf("%s,%lld,%lld,%lld,%d,0,0\n", path, (long long)l, (long long)n, (long long)d, w);
    else
      std::printf("%s,%lld,%lld,%lld,%d,%.0f,%.0f\n", path, (long long)l, (long long)n,
                  (long long)d, w, ns, double(l) * 1e9 / ns);
  };
  std::printf("path,L,N,D,workers,wall_ns,throughput_tokens_per_s\n");
  set_num_workers(1);
  Tensor y_seq;
  const double seq_ns = time_ns([&] { y_seq = ssm::scan_recurrent(a_bar, b_bar, c, x); });
  emit("sequential", 1, seq_ns);
  for (int w : workers) {
    set_num_workers(w);
    Tensor y_par;
    const double par_ns = time_ns([&] { y_par = ssm::scan_parallel(a_bar, b_bar, c, x, 64); });
    double max_diff = 0;
    for (int64_t i = 0; i < y_par.numel(); ++i)
      max_diff = std::max(max_diff, std::abs(y_par.at(i) - y_seq.at(i)));
    if (max_diff > 1e-5) {
      std::fprintf(stderr, "parallel path diverged from sequential: max abs %.3g\n", max_diff);
      return kExitCheckFailed;
    }
    emit("parallel", w, par_ns);
  }
  set_num_workers(1);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"autoregressive pretraining of selective state-space vision models"};
  app.require_subcommand(1);

  // layout
  auto* lay_cmd = app.add_subcommand("layout", "inspect the image -> sequence layout");
  int64_t image = 192, patch = 16, cluster = 64;
  std::string order = "row-forward";
  uint64_t lay_seed = 0;
  lay_cmd->add_option("--image", image, "square image size");
  lay_cmd->add_option("--patch", patch, "patch size");
  lay_cmd->add_option("--cluster", cluster, "cluster size");
  lay_cmd->add_option("--order", order, "row-forward|row-backward|col-forward|col-backward|random");
  lay_cmd->add_option("--seed", lay_seed, "seed for random order");
  bool lay_det = false;
  lay_cmd->add_flag("--deterministic", lay_det, "output is already byte-stable");

  // selfcheck
  auto* check_cmd = app.add_subcommand("selfcheck", "run the invariant suite");
  std::string level = "fast";
  double corrupt_zoh = 0;
  uint64_t check_seed = 0;
  bool check_det = false;
  check_cmd->add_option("--level", level, "fast|full")->check(CLI::IsMember({"fast", "full"}));
  check_cmd->add_option("--seed", check_seed, "seed for randomized trials");
  check_cmd->add_flag("--deterministic", check_det, "output is already byte-stable");
  check_cmd->add_option("--corrupt-zoh-threshold", corrupt_zoh,
                        "fault-injection hook: override the zoh series threshold")
      ->group("");  // hidden

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "scan kernel benchmark (CSV to stdout)");
  std::string kernel = "scan";
  int64_t bench_l = 8192, bench_d = 64, bench_n = 16;
  std::vector<int> bench_workers = {1, 2, 4};
  int bench_reps = 3;
  bench_cmd->add_option("--kernel", kernel, "kernel to benchmark")->check(CLI::IsMember({"scan"}));
  bench_cmd->add_option("--L", bench_l, "sequence length");
  bench_cmd->add_option("--D", bench_d, "channels");
  bench_cmd->add_option("--N", bench_n, "state dimension");
  bench_cmd->add_option("--workers", bench_workers, "worker counts to sweep")->take_all();
  bench_cmd->add_option("--reps", bench_reps, "repetitions (best-of)");
  uint64_t bench_seed = 0;
  bool bench_det = false;
  bench_cmd->add_option("--seed", bench_seed, "input generation seed");
  bench_cmd->add_flag("--deterministic", bench_det, "zero timing columns for byte-stable output");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic shapes dataset");
  std::string synth_out = "synth.armd";
  int64_t classes = 10, train_pc = 200, val_pc = 50, synth_size = 64;
  uint64_t synth_seed = 0;
  synth_cmd->add_option("--out", synth_out, "output packed file");
  synth_cmd->add_option("--classes", classes, "number of classes");
  synth_cmd->add_option("--train-per-class", train_pc, "train images per class");
  synth_cmd->add_option("--val-per-class", val_pc, "val images per class");
  synth_cmd->add_option("--size", synth_size, "image side");
  synth_cmd->add_option("--seed", synth_seed, "generator seed");
  bool synth_det = false;
  synth_cmd->add_flag("--deterministic", synth_det, "output is already byte-stable");

  // ingest
  auto* ingest_cmd = app.add_subcommand("ingest", "pack a directory of per-class PPM images");
  std::string ingest_dir, ingest_out = "dataset.armd";
  int64_t ingest_h = 64, ingest_w = 64;
  double val_fraction = 0.2;
  ingest_cmd->add_option("--dir", ingest_dir, "directory of per-class subdirectories")->required();
  ingest_cmd->add_option("--out", ingest_out, "output packed file");
  ingest_cmd->add_option("--height", ingest_h, "target height");
  ingest_cmd->add_option("--width", ingest_w, "target width");
  ingest_cmd->add_option("--val-fraction", val_fraction, "fraction per class held out");
  uint64_t ingest_seed = 0;
  bool ingest_det = false;
  ingest_cmd->add_option("--seed", ingest_seed, "unused; ingestion is order-deterministic");
  ingest_cmd->add_flag("--deterministic", ingest_det, "output is already byte-stable");

  // pretrain / finetune / eval
  CommonOpts pre_opts, fin_opts, eval_opts;
  auto* pre_cmd = app.add_subcommand("pretrain", "autoregressive pretraining");
  std::string pre_out = "runs/pretrain", pre_resume;
  int64_t pre_dump = 0;
  add_common(pre_cmd, pre_opts, true);
  pre_cmd->add_option("--out", pre_out, "output directory");
  pre_cmd->add_option("--resume", pre_resume, "epoch checkpoint to resume from");
  pre_cmd->add_option("--dump-triptychs", pre_dump, "write N input/prediction/target PPM triads");
  int64_t pre_stop = 0;
  pre_cmd->add_option("--stop-after", pre_stop,
                      "stop after N steps without changing the lr schedule");

  auto* fin_cmd = app.add_subcommand("finetune", "supervised finetuning");
  std::string fin_out = "runs/finetune", fin_ckpt;
  add_common(fin_cmd, fin_opts, true);
  fin_cmd->add_option("--out", fin_out, "output directory");
  fin_cmd->add_option("--ckpt", fin_ckpt, "pretraining checkpoint (omit for from-scratch)");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a finetuned checkpoint");
  std::string eval_ckpt;
  add_common(eval_cmd, eval_opts, true);
  eval_cmd->add_option("--ckpt", eval_ckpt, "finetuned checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*lay_cmd) return cmd_layout(image, patch, cluster, order, lay_seed);
    if (*check_cmd) return cmd_selfcheck(level, corrupt_zoh, check_seed);
    if (*bench_cmd) return cmd_bench(bench_l, bench_d, bench_n, bench_workers, bench_reps, bench_seed, bench_det);
    if (*synth_cmd) {
      dataio::generate_synthetic(synth_out, synth_out + ".manifest.json", classes, train_pc,
                                 val_pc, synth_size, synth_seed);
      std::fprintf(stderr, "wrote %s (%lld classes, %lld train + %lld val per class)\n",
                   synth_out.c_str(), (long long)classes, (long long)train_pc, (long long)val_pc);
      return kExitOk;
    }
    if (*ingest_cmd) {
      dataio::ingest_ppm_dir(ingest_dir, ingest_out, ingest_out + ".manifest.json", ingest_h,
                             ingest_w, val_fraction);
      std::fprintf(stderr, "wrote %s\n", ingest_out.c_str());
      return kExitOk;
    }
    if (*pre_cmd) {
      set_num_workers(pre_opts.workers);
      trainer::RunOptions ro;
      ro.seed = pre_opts.seed;
      ro.deterministic_artifacts = pre_opts.deterministic;
      ro.resume = pre_resume;
      ro.dump_triptychs = pre_dump;
      ro.stop_after_steps = pre_stop;
      trainer::RunResult res = trainer::run_pretrain(load_cfg(pre_opts), pre_out, ro);
      std::fprintf(stderr, "pretrain done: %lld steps, final loss %.4f, checkpoint %s\n",
                   (long long)res.steps, res.losses.empty() ? 0.0 : res.losses.back(),
                   res.final_ckpt.c_str());
      return kExitOk;
    }
    if (*fin_cmd) {
      set_num_workers(fin_opts.workers);
      trainer::RunOptions ro;
      ro.seed = fin_opts.seed;
      ro.deterministic_artifacts = fin_opts.deterministic;
      trainer::RunResult res = trainer::run_finetune(load_cfg(fin_opts), fin_ckpt, fin_out, ro);
      std::fprintf(stderr, "finetune done: %lld steps, best top-1 %.4f, best checkpoint %s\n",
                   (long long)res.steps, res.best_top1, res.best_ckpt.c_str());
      std::printf("metric,value\nbest_top1,%.6f\n", res.best_top1);
      return kExitOk;
    }
    if (*eval_cmd) {
      set_num_workers(eval_opts.workers);
      config::FullConfig cfg = load_cfg(eval_opts);
      checkpoint::Checkpoint ck = checkpoint::Checkpoint::load(eval_ckpt);
      trainer::FinetuneModel model = trainer::finetune_from_checkpoint(ck);
      dataio::PackedDataset ds = dataio::PackedDataset::read(cfg.train.dataset);
      const std::string man_path =
          cfg.train.manifest.empty() ? cfg.train.dataset + ".manifest.json" : cfg.train.manifest;
      dataio::Manifest man = dataio::Manifest::load(man_path);
      man.validate(ds);
      const double top1 =
          trainer::evaluate(model, ds, man.val_offset, man.val_count, cfg.train.eval_batch_size);
      std::fprintf(stderr, "top-1 on %lld val images: %.4f\n", (long long)man.val_count, top1);
      std::printf("metric,value\ntop1,%.6f\n", top1);
      return kExitOk;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.kind() == ErrorKind::numeric ? kExitNumeric : kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitOk;
}
