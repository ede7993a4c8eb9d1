#pragma once

#include <vector>

#include "armamba/blocks.hpp"
#include "armamba/layout.hpp"

namespace armamba::objective {

// Next-cluster regression targets under the shift-k formulation: the token at
// sequence position t is trained to predict the patch k positions ahead,
// k = patches per cluster, so every patch of cluster i+1 is predicted from a
// prefix ending inside cluster i.
struct ArTargets {
  Tensor target;        // [L-k, p*p*3] (single image) or [B, L-k, p*p*3]
  int64_t shift_k = 0;  // patches per cluster
  int64_t valid = 0;    // L - k
};

ArTargets build_targets(const Tensor& img, const layout::ClusterLayout& lay,
                        blocks::TargetKind kind,
                        blocks::NormUnit unit = blocks::NormUnit::cluster);

// Normalize a token sequence in layout order: per-cluster (or per-patch)
// mean/std over all pixel values, eps inside the sqrt so constant units map
// to exact zeros.
Tensor normalize_tokens(const Tensor& tokens, const layout::ClusterLayout& lay,
                        blocks::NormUnit unit, double eps = 1e-6);

struct DecoderParams {
  Tensor proj_in_w, proj_in_b;   // [D, W], [W]
  std::vector<blocks::BlockParams> blocks;  // causal 1-scan MambaMLP at width W
  Tensor proj_out_w, proj_out_b;  // [W, p*p*3], [p*p*3]
};

DecoderParams init_decoder(const blocks::ModelConfig& cfg, Rng& rng, DType dtype = DType::f32);
int64_t decoder_param_count(const blocks::ModelConfig& cfg);
void collect_decoder_params(blocks::NamedTensors& out, const DecoderParams& dec);

Tensor decoder_forward(const Tensor& encoder_out, const DecoderParams& dec,
                       const ssm::MixerOptions& opt = {});

// MSE between the prediction at position t and the target patch at t+k,
// averaged over the valid positions and pixel dims. targets: [B, L-k, p*p*3].
Tensor ar_loss(const Tensor& encoder_out, const DecoderParams& dec, const ArTargets& targets,
               const ssm::MixerOptions& opt = {});

}  // namespace armamba::objective
