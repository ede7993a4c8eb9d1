#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "armamba/tensor.hpp"

namespace armamba::checkpoint {

// Binary container: magic "ARMC", version, embedded config JSON, sorted
// name -> tensor map (u64 LE dims, LE payload), optional optimizer moments
// and EMA shadow. Writes are atomic (temp file + rename) and byte-stable:
// save -> load -> save reproduces the file exactly.
struct Checkpoint {
  std::string config_json;
  std::map<std::string, Tensor> tensors;
  bool has_optim = false;
  uint64_t optim_step = 0;
  std::map<std::string, Tensor> optim;  // "m:<name>" and "v:<name>"
  bool has_ema = false;
  std::map<std::string, Tensor> ema;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

// Expands a uni_1scan pretraining checkpoint into the cross_4scan finetuning
// arrangement: every block's single scan is deep-copied into 4 directional
// slots, decoder weights are dropped, a fresh classifier head is initialized,
// and the positional table is bilinearly resized if the patch grid changed.
Checkpoint convert_pretrain_to_finetune(const Checkpoint& ckpt, int64_t num_classes,
                                        int64_t image_h, int64_t image_w, uint64_t seed);

}  // namespace armamba::checkpoint
