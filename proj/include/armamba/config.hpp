#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "armamba/blocks.hpp"

namespace armamba::config {

struct TrainConfig {
  double base_lr = 1.5e-4;  // peak lr = base_lr * batch_size / 256
  double lr_min = 1e-6;
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.95;
  int64_t batch_size = 32;
  int64_t epochs = 100;
  int64_t max_steps = 0;  // 0: run epochs to completion
  int64_t warmup_epochs = 5;
  double ema_decay = 0.9999;
  double clip_norm = 1.0;  // 0 disables clipping
  int64_t eval_batch_size = 64;
  std::string dataset;   // packed dataset path
  std::string manifest;  // manifest path; defaults to <dataset>.manifest.json

  double peak_lr() const { return base_lr * double(batch_size) / 256.0; }
};

struct FullConfig {
  blocks::ModelConfig model;
  TrainConfig train;
};

std::string model_to_json(const blocks::ModelConfig& m);  // deterministic (sorted keys)
blocks::ModelConfig model_from_json(const std::string& text);

// Parses {"model": {...}, "train": {...}}; unknown keys anywhere are
// rejected with the offending key named.
FullConfig load_config_file(const std::string& path);
FullConfig parse_config(const std::string& text);

// "model.width=128" / "train.base_lr=3e-4" style overrides, applied on top
// of the parsed file.
FullConfig apply_overrides(const FullConfig& cfg, const std::vector<std::string>& overrides);

}  // namespace armamba::config
