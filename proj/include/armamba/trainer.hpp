#pragma once

#include <optional>
#include <string>
#include <vector>

#include "armamba/blocks.hpp"
#include "armamba/checkpoint.hpp"
#include "armamba/config.hpp"
#include "armamba/dataio.hpp"
#include "armamba/objective.hpp"

namespace armamba::trainer {

struct OptimState {
  std::vector<std::string> names;
  std::vector<Tensor> m, v;  // aligned with names
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.95, weight_decay = 0.05, eps = 1e-8;
};

OptimState init_optim(const blocks::NamedTensors& params, double beta1, double beta2,
                      double weight_decay);

// One AdamW step (decoupled decay applied before the moment update). If any
// gradient contains NaN/Inf the step is aborted with no parameter touched and
// the offending parameter name is returned.
std::optional<std::string> adamw_step(const blocks::NamedTensors& params, OptimState& st,
                                      double lr);

// Linear 0 -> peak over [0, warmup], then cosine from peak to lr_min.
double cosine_lr(int64_t step, int64_t warmup_steps, int64_t total_steps, double lr_peak,
                 double lr_min);

// Scales all grads by min(1, max_norm/||g||); returns the pre-clip norm.
double clip_global_norm(const blocks::NamedTensors& params, double max_norm);

struct EmaState {
  std::vector<std::string> names;
  std::vector<Tensor> shadow;
};
EmaState ema_init(const blocks::NamedTensors& params);
void ema_update(EmaState& ema, const blocks::NamedTensors& params, double decay);
// Exchanges parameter values with the shadow (call twice to restore).
void ema_swap(EmaState& ema, const blocks::NamedTensors& params);

enum class AugmentMode { pretrain, finetune };

// Random resized crop (area [0.2,1], aspect [3/4,4/3], bilinear) to
// target_h x target_w plus horizontal flip with p=0.5; output f32 in [0,1].
Tensor augment(const uint8_t* src, int64_t src_h, int64_t src_w, int64_t target_h,
               int64_t target_w, AugmentMode mode, Rng& rng);
Tensor hflip(const Tensor& img);  // [H,W,3]
// Deterministic eval path: shorter-side resize + center crop.
Tensor eval_preprocess(const uint8_t* src, int64_t src_h, int64_t src_w, int64_t target_h,
                       int64_t target_w);

struct PretrainModel {
  blocks::ModelConfig cfg;
  blocks::EncoderParams enc;
  objective::DecoderParams dec;
};

struct FinetuneModel {
  blocks::ModelConfig cfg;
  blocks::EncoderParams enc;
};

PretrainModel build_pretrain_model(const blocks::ModelConfig& cfg, uint64_t seed,
                                   DType dtype = DType::f32);
FinetuneModel build_finetune_model(const blocks::ModelConfig& cfg, uint64_t seed,
                                   DType dtype = DType::f32);

blocks::NamedTensors named_params(const PretrainModel& model);
blocks::NamedTensors named_params(const FinetuneModel& model);

checkpoint::Checkpoint to_checkpoint(const PretrainModel& model);
checkpoint::Checkpoint to_checkpoint(const FinetuneModel& model);
PretrainModel pretrain_from_checkpoint(const checkpoint::Checkpoint& ck);
FinetuneModel finetune_from_checkpoint(const checkpoint::Checkpoint& ck);

struct RunResult {
  std::vector<double> losses;  // one entry per optimization step
  std::vector<double> top1_ema, top1_raw;  // per epoch (finetune)
  double best_top1 = 0.0;
  std::string metrics_path, final_ckpt, best_ckpt;
  int64_t steps = 0;
};

struct RunOptions {
  uint64_t seed = 0;
  bool deterministic_artifacts = false;  // zero wall_ms columns for byte-stable outputs
  std::string resume;                    // pretraining: checkpoint to continue from
  int64_t dump_triptychs = 0;            // write N (input|prediction|target) PPMs at the end
  // simulate an interruption: stop after this many optimization steps without
  // touching the lr schedule (unlike train.max_steps, which defines it)
  int64_t stop_after_steps = 0;
};

RunResult run_pretrain(const config::FullConfig& cfg, const std::string& out_dir,
                       const RunOptions& opt);
// pretrained_ckpt empty -> from-scratch baseline with the same schedule
RunResult run_finetune(const config::FullConfig& cfg, const std::string& pretrained_ckpt,
                       const std::string& out_dir, const RunOptions& opt);

double evaluate(const FinetuneModel& model, const dataio::PackedDataset& ds, int64_t offset,
                int64_t count, int64_t batch_size);

}  // namespace armamba::trainer
