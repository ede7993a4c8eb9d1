#pragma once

#include <string>
#include <vector>

#include "armamba/layout.hpp"
#include "armamba/ssm.hpp"
#include "armamba/tensor.hpp"

namespace armamba::blocks {

enum class ScanArrangement { uni_1scan, cross_4scan };
enum class TargetKind { normed_pixel, raw_pixel };
enum class NormUnit { cluster, patch };

struct ModelConfig {
  int64_t width = 768;
  int64_t depth = 12;
  int64_t state_dim = 16;
  int64_t expand = 1;  // fixed to 1; kept explicit because it is a stated knob
  int64_t patch_size = 16;
  int64_t cluster_size = 64;
  int64_t image_h = 192, image_w = 192;
  layout::OrderKind order = layout::OrderKind::row_forward;
  ScanArrangement scan_mode = ScanArrangement::uni_1scan;
  int64_t dec_depth = 4, dec_width = 512;
  TargetKind target_kind = TargetKind::normed_pixel;
  NormUnit norm_unit = NormUnit::cluster;
  ssm::Discretization discretization = ssm::Discretization::zoh_exact;
  int64_t conv_k = 4;
  int64_t num_classes = 0;

  void validate() const;
  int64_t patch_grid_h() const { return image_h / patch_size; }
  int64_t patch_grid_w() const { return image_w / patch_size; }
  int64_t num_patches() const { return patch_grid_h() * patch_grid_w(); }
  int64_t patch_dim() const { return patch_size * patch_size * 3; }
  int64_t patches_per_cluster() const {
    return (cluster_size / patch_size) * (cluster_size / patch_size);
  }
};

// SwiGLU hidden width: 8/3 * D rounded to the nearest multiple of 8.
int64_t swiglu_hidden(int64_t d);

struct BlockParams {
  Tensor norm1_g, norm1_b;
  std::vector<ssm::SsmScanParams> mixer;  // 1 (pretrain) or 4 (finetune)
  Tensor norm2_g, norm2_b;
  Tensor w_up, w_gate, w_down;  // [D,Dff], [D,Dff], [Dff,D]
};

struct EncoderParams {
  Tensor patch_w, patch_b;  // [p*p*3, D], [D]
  Tensor pos;               // [num_patches, D], indexed by true grid location
  std::vector<BlockParams> blocks;
  // classifier readout, present when num_classes > 0
  Tensor head_norm_g, head_norm_b, head_w, head_b;
};

Tensor swiglu_forward(const Tensor& x, const Tensor& w_up, const Tensor& w_gate,
                      const Tensor& w_down);

Tensor block_forward_pretrain(const Tensor& x, const BlockParams& params,
                              const ssm::MixerOptions& opt = {});

// Token grid scanned in four directions (raster, reversed raster, transposed
// raster, reversed transposed raster); the four mixer outputs are averaged
// before the residual add.
Tensor block_forward_finetune(const Tensor& x, const BlockParams& params, int64_t grid_h,
                              int64_t grid_w, const ssm::MixerOptions& opt = {});

BlockParams init_block(const ModelConfig& cfg, int64_t width, int64_t scans, Rng& rng,
                       DType dtype = DType::f32);

struct BuildResult {
  EncoderParams params;
  int64_t param_count = 0;  // analytic, checked against registered elements
};

BuildResult build_encoder(const ModelConfig& cfg, Rng& rng, DType dtype = DType::f32);

int64_t encoder_param_count(const ModelConfig& cfg);  // analytic ledger
int64_t block_param_count(int64_t width, int64_t state_dim, int64_t conv_k, int64_t scans);
int64_t mixer_param_count(int64_t width, int64_t state_dim, int64_t conv_k);

// tokens [B,L,p*p*3] in layout order; token_to_patch maps sequence slot ->
// grid patch index for the positional embedding lookup. In cross_4scan mode
// the sequence must be in raster order (identity map).
Tensor encoder_forward(const EncoderParams& enc, const ModelConfig& cfg, const Tensor& tokens,
                       const std::vector<int64_t>& token_to_patch,
                       const ssm::MixerOptions& opt = {});

// mean-pool over tokens -> LayerNorm -> linear head
Tensor classifier_forward(const EncoderParams& enc, const Tensor& encoder_out);

// Named views of every trainable tensor, sorted by name.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
NamedTensors named_params(const EncoderParams& enc);
void collect_block_params(NamedTensors& out, const std::string& prefix, const BlockParams& b);

}  // namespace armamba::blocks
