#include "armamba/objective.hpp"

#include <cmath>

#include "armamba/ops.hpp"

namespace armamba::objective {

using namespace ops;

Tensor normalize_tokens(const Tensor& tokens, const layout::ClusterLayout& lay,
                        blocks::NormUnit unit, double eps) {
  const int64_t l = tokens.dim(0), pd = tokens.dim(1);
  const int64_t group = unit == blocks::NormUnit::cluster ? lay.patches_per_cluster() : 1;
  Tensor out = Tensor::empty(tokens.shape(), tokens.dtype());
  auto run = [&]<typename T>() {
    const T* src = tokens.data<T>().data();
    T* dst = out.data<T>().data();
    for (int64_t g0 = 0; g0 < l; g0 += group) {
      const int64_t n = group * pd;
      const T* s = src + g0 * pd;
      double mean = 0;
      for (int64_t i = 0; i < n; ++i) mean += double(s[i]);
      mean /= double(n);
      double var = 0;
      for (int64_t i = 0; i < n; ++i) {
        const double c = double(s[i]) - mean;
        var += c * c;
      }
      var /= double(n);
      const double rstd = 1.0 / std::sqrt(var + eps);
      T* o = dst + g0 * pd;
      for (int64_t i = 0; i < n; ++i) o[i] = T((double(s[i]) - mean) * rstd);
    }
  };
  tokens.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

ArTargets build_targets(const Tensor& img, const layout::ClusterLayout& lay,
                        blocks::TargetKind kind, blocks::NormUnit unit) {
  Tensor tokens = layout::patchify(img, lay);
  if (kind == blocks::TargetKind::normed_pixel) tokens = normalize_tokens(tokens, lay, unit);
  const int64_t l = tokens.dim(0), pd = tokens.dim(1);
  const int64_t k = lay.patches_per_cluster();
  if (l <= k) fail(ErrorKind::config, "build_targets: sequence too short for shift k");
  ArTargets t;
  t.shift_k = k;
  t.valid = l - k;
  t.target = Tensor::empty({t.valid, pd}, tokens.dtype());
  std::memcpy(t.target.impl()->storage->raw(),
              tokens.impl()->storage->raw() + size_t(k * pd) * dtype_size(tokens.dtype()),
              t.target.impl()->storage->size);
  return t;
}

DecoderParams init_decoder(const blocks::ModelConfig& cfg, Rng& rng, DType dtype) {
  DecoderParams dec;
  const int64_t d = cfg.width, w = cfg.dec_width;
  dec.proj_in_w = Tensor::glorot({d, w}, rng, dtype, true);
  dec.proj_in_b = Tensor::zeros({w}, dtype, true);
  blocks::ModelConfig dcfg = cfg;
  dcfg.width = w;
  for (int64_t i = 0; i < cfg.dec_depth; ++i)
    dec.blocks.push_back(blocks::init_block(dcfg, w, 1, rng, dtype));
  dec.proj_out_w = Tensor::glorot({w, cfg.patch_dim()}, rng, dtype, true);
  dec.proj_out_b = Tensor::zeros({cfg.patch_dim()}, dtype, true);
  return dec;
}

int64_t decoder_param_count(const blocks::ModelConfig& cfg) {
  int64_t c = cfg.width * cfg.dec_width + cfg.dec_width;
  c += cfg.dec_depth * blocks::block_param_count(cfg.dec_width, cfg.state_dim, cfg.conv_k, 1);
  c += cfg.dec_width * cfg.patch_dim() + cfg.patch_dim();
  return c;
}

void collect_decoder_params(blocks::NamedTensors& out, const DecoderParams& dec) {
  out.emplace_back("dec.in.w", dec.proj_in_w);
  out.emplace_back("dec.in.b", dec.proj_in_b);
  for (size_t i = 0; i < dec.blocks.size(); ++i) {
    std::string idx = std::to_string(i);
    blocks::collect_block_params(out, "dec.b" + std::string(idx.size() < 2 ? "0" : "") + idx,
                                 dec.blocks[i]);
  }
  out.emplace_back("dec.out.w", dec.proj_out_w);
  out.emplace_back("dec.out.b", dec.proj_out_b);
}

Tensor decoder_forward(const Tensor& encoder_out, const DecoderParams& dec,
                       const ssm::MixerOptions& opt) {
  if (encoder_out.rank() != 3) fail(ErrorKind::dimension, "decoder_forward: expect [B,L,D]");
  Tensor x = linear(encoder_out, dec.proj_in_w, dec.proj_in_b);
  for (const auto& b : dec.blocks) x = blocks::block_forward_pretrain(x, b, opt);
  return linear(x, dec.proj_out_w, dec.proj_out_b);
}

Tensor ar_loss(const Tensor& encoder_out, const DecoderParams& dec, const ArTargets& targets,
               const ssm::MixerOptions& opt) {
  if (targets.target.rank() != 3)
    fail(ErrorKind::contract, "ar_loss: expected batched targets [B, L-k, dim]");
  const int64_t l = encoder_out.dim(1);
  if (targets.valid + targets.shift_k != l || targets.target.dim(0) != encoder_out.dim(0))
    fail(ErrorKind::contract, "ar_loss: targets were built for a different layout (valid " +
                                  std::to_string(targets.valid) + " + k " +
                                  std::to_string(targets.shift_k) + " != L " + std::to_string(l) +
                                  ")");
  Tensor pred = decoder_forward(encoder_out, dec, opt);
  if (pred.dim(2) != targets.target.dim(2))
    fail(ErrorKind::contract, "ar_loss: prediction dim != target dim");
  return mse_loss(slice_axis1(pred, 0, targets.valid), targets.target);
}

}  // namespace armamba::objective
