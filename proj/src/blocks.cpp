#include "armamba/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "armamba/ops.hpp"

namespace armamba::blocks {

using namespace ops;

void ModelConfig::validate() const {
  if (width < 1 || depth < 1) fail(ErrorKind::config, "config: width and depth must be >= 1");
  if (expand != 1) fail(ErrorKind::config, "config: only expand=1 is supported");
  if (state_dim < 1) fail(ErrorKind::config, "config: state_dim must be >= 1");
  if (dec_depth < 1 || dec_width < 1) fail(ErrorKind::config, "config: decoder dims must be >= 1");
  if (conv_k < 1) fail(ErrorKind::config, "config: conv_k must be >= 1");
  if (cluster_size % patch_size != 0)
    fail(ErrorKind::config, "config: cluster_size " + std::to_string(cluster_size) +
                                " not divisible by patch_size " + std::to_string(patch_size));
  if (image_h % cluster_size != 0 || image_w % cluster_size != 0)
    fail(ErrorKind::config, "config: image " + std::to_string(image_h) + "x" +
                                std::to_string(image_w) + " not divisible by cluster_size " +
                                std::to_string(cluster_size));
}

int64_t swiglu_hidden(int64_t d) {
  const double raw = 8.0 / 3.0 * double(d);
  int64_t m = int64_t(std::llround(raw / 8.0)) * 8;
  return std::max<int64_t>(m, 8);
}

Tensor swiglu_forward(const Tensor& x, const Tensor& w_up, const Tensor& w_gate,
                      const Tensor& w_down) {
  return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

Tensor block_forward_pretrain(const Tensor& x, const BlockParams& params,
                              const ssm::MixerOptions& opt) {
  if (params.mixer.size() != 1)
    fail(ErrorKind::contract, "block_forward_pretrain: expected 1 scan, got " +
                                  std::to_string(params.mixer.size()));
  Tensor h = add(x, ssm::mamba_mixer_forward(layer_norm(x, params.norm1_g, params.norm1_b),
                                             params.mixer[0], ssm::ScanDirection::forward, opt));
  return add(h, swiglu_forward(layer_norm(h, params.norm2_g, params.norm2_b), params.w_up,
                               params.w_gate, params.w_down));
}

namespace {

// the four cross-scan visit orders over a Gh x Gw raster-stored grid
std::vector<std::vector<int64_t>> cross_scan_orders(int64_t gh, int64_t gw) {
  const int64_t l = gh * gw;
  std::vector<std::vector<int64_t>> orders(4);
  auto& fwd = orders[0];
  fwd.resize(size_t(l));
  for (int64_t i = 0; i < l; ++i) fwd[size_t(i)] = i;
  auto& bwd = orders[1];
  bwd.resize(size_t(l));
  for (int64_t i = 0; i < l; ++i) bwd[size_t(i)] = l - 1 - i;
  auto& col = orders[2];
  col.reserve(size_t(l));
  for (int64_t c = 0; c < gw; ++c)
    for (int64_t r = 0; r < gh; ++r) col.push_back(r * gw + c);
  auto& colb = orders[3];
  colb.assign(col.rbegin(), col.rend());
  return orders;
}

}  // namespace

Tensor block_forward_finetune(const Tensor& x, const BlockParams& params, int64_t grid_h,
                              int64_t grid_w, const ssm::MixerOptions& opt) {
  if (params.mixer.size() != 4)
    fail(ErrorKind::contract, "block_forward_finetune: expected 4 scans, got " +
                                  std::to_string(params.mixer.size()));
  if (x.dim(1) != grid_h * grid_w)
    fail(ErrorKind::dimension, "block_forward_finetune: L=" + std::to_string(x.dim(1)) +
                                   " != grid " + std::to_string(grid_h) + "x" +
                                   std::to_string(grid_w));
  Tensor normed = layer_norm(x, params.norm1_g, params.norm1_b);
  const auto orders = cross_scan_orders(grid_h, grid_w);
  Tensor mixed;
  for (int i = 0; i < 4; ++i) {
    Tensor yi = ssm::mamba_mixer_forward_ordered(normed, params.mixer[size_t(i)], orders[size_t(i)], opt);
    mixed = i == 0 ? yi : add(mixed, yi);
  }
  Tensor h = add(x, scale(mixed, 0.25));
  return add(h, swiglu_forward(layer_norm(h, params.norm2_g, params.norm2_b), params.w_up,
                               params.w_gate, params.w_down));
}

BlockParams init_block(const ModelConfig& cfg, int64_t width, int64_t scans, Rng& rng,
                       DType dtype) {
  BlockParams b;
  b.norm1_g = Tensor::full({width}, 1.0, dtype);
  b.norm1_g.set_requires_grad(true);
  b.norm1_b = Tensor::zeros({width}, dtype, true);
  b.norm2_g = Tensor::full({width}, 1.0, dtype);
  b.norm2_g.set_requires_grad(true);
  b.norm2_b = Tensor::zeros({width}, dtype, true);
  for (int64_t s = 0; s < scans; ++s)
    b.mixer.push_back(ssm::init_ssm_params(width, cfg.state_dim, cfg.conv_k, rng, dtype));
  const int64_t dff = swiglu_hidden(width);
  b.w_up = Tensor::glorot({width, dff}, rng, dtype, true);
  b.w_gate = Tensor::glorot({width, dff}, rng, dtype, true);
  b.w_down = Tensor::glorot({dff, width}, rng, dtype, true);
  return b;
}

int64_t mixer_param_count(int64_t d, int64_t n, int64_t k) {
  const int64_t r = std::max<int64_t>(d / 16, 1);
  int64_t c = d * n;            // a_log
  c += d * r + r * d + d;       // dt projection + bias
  c += 2 * d * n;               // w_b, w_c
  c += d * k + d;               // conv
  c += 3 * (d * d + d);         // in / gate / out projections
  return c;
}

int64_t block_param_count(int64_t d, int64_t n, int64_t k, int64_t scans) {
  return 4 * d + scans * mixer_param_count(d, n, k) + 3 * d * swiglu_hidden(d);
}

int64_t encoder_param_count(const ModelConfig& cfg) {
  const int64_t scans = cfg.scan_mode == ScanArrangement::uni_1scan ? 1 : 4;
  int64_t c = cfg.patch_dim() * cfg.width + cfg.width;  // patch embed
  c += cfg.num_patches() * cfg.width;                   // positional table
  c += cfg.depth * block_param_count(cfg.width, cfg.state_dim, cfg.conv_k, scans);
  if (cfg.num_classes > 0)
    c += 2 * cfg.width + cfg.width * cfg.num_classes + cfg.num_classes;  // readout
  return c;
}

BuildResult build_encoder(const ModelConfig& cfg, Rng& rng, DType dtype) {
  cfg.validate();
  BuildResult res;
  EncoderParams& e = res.params;
  e.patch_w = Tensor::glorot({cfg.patch_dim(), cfg.width}, rng, dtype, true);
  e.patch_b = Tensor::zeros({cfg.width}, dtype, true);
  e.pos = Tensor::randn({cfg.num_patches(), cfg.width}, rng, 0.02, dtype, true);
  const int64_t scans = cfg.scan_mode == ScanArrangement::uni_1scan ? 1 : 4;
  for (int64_t i = 0; i < cfg.depth; ++i)
    e.blocks.push_back(init_block(cfg, cfg.width, scans, rng, dtype));
  if (cfg.num_classes > 0) {
    e.head_norm_g = Tensor::full({cfg.width}, 1.0, dtype);
    e.head_norm_g.set_requires_grad(true);
    e.head_norm_b = Tensor::zeros({cfg.width}, dtype, true);
    e.head_w = Tensor::glorot({cfg.width, cfg.num_classes}, rng, dtype, true);
    e.head_b = Tensor::zeros({cfg.num_classes}, dtype, true);
  }
  res.param_count = encoder_param_count(cfg);
  int64_t registered = 0;
  for (const auto& [name, t] : named_params(e)) registered += t.numel();
  if (registered != res.param_count)
    fail(ErrorKind::contract, "build_encoder: analytic count " + std::to_string(res.param_count) +
                                  " != registered " + std::to_string(registered));
  return res;
}

Tensor encoder_forward(const EncoderParams& enc, const ModelConfig& cfg, const Tensor& tokens,
                       const std::vector<int64_t>& token_to_patch, const ssm::MixerOptions& opt) {
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.patch_dim())
    fail(ErrorKind::dimension, "encoder_forward: expect tokens [B,L," +
                                   std::to_string(cfg.patch_dim()) + "], got " +
                                   shape_str(tokens.shape()));
  const int64_t bsz = tokens.dim(0), l = tokens.dim(1);
  if (int64_t(token_to_patch.size()) != l && int64_t(token_to_patch.size()) != bsz * l)
    fail(ErrorKind::dimension, "encoder_forward: token_to_patch must have L or B*L entries");
  Tensor x = linear(tokens, enc.patch_w, enc.patch_b);
  Tensor pos = gather_rows(enc.pos, token_to_patch);
  if (int64_t(token_to_patch.size()) == bsz * l) pos = reshape(pos, {bsz, l, pos.dim(1)});
  x = add(x, pos);
  if (cfg.scan_mode == ScanArrangement::uni_1scan) {
    for (const auto& b : enc.blocks) x = block_forward_pretrain(x, b, opt);
  } else {
    for (const auto& b : enc.blocks)
      x = block_forward_finetune(x, b, cfg.patch_grid_h(), cfg.patch_grid_w(), opt);
  }
  return x;
}

Tensor classifier_forward(const EncoderParams& enc, const Tensor& encoder_out) {
  if (!enc.head_w.defined()) fail(ErrorKind::contract, "classifier_forward: model has no head");
  Tensor pooled = mean_axis1(encoder_out);
  return linear(layer_norm(pooled, enc.head_norm_g, enc.head_norm_b), enc.head_w, enc.head_b);
}

namespace {

std::string zpad(int64_t i) {
  std::string s = std::to_string(i);
  return s.size() < 2 ? "0" + s : s;
}

void collect_mixer(blocks::NamedTensors& out, const std::string& p, const ssm::SsmScanParams& m) {
  out.emplace_back(p + ".a_log", m.a_log);
  out.emplace_back(p + ".w_dt_down", m.w_dt_down);
  out.emplace_back(p + ".w_dt_up", m.w_dt_up);
  out.emplace_back(p + ".dt_bias", m.dt_bias);
  out.emplace_back(p + ".w_b", m.w_b);
  out.emplace_back(p + ".w_c", m.w_c);
  out.emplace_back(p + ".conv_w", m.conv_w);
  out.emplace_back(p + ".conv_b", m.conv_b);
  out.emplace_back(p + ".w_in", m.w_in);
  out.emplace_back(p + ".b_in", m.b_in);
  out.emplace_back(p + ".w_gate", m.w_gate);
  out.emplace_back(p + ".b_gate", m.b_gate);
  out.emplace_back(p + ".w_out", m.w_out);
  out.emplace_back(p + ".b_out", m.b_out);
}

}  // namespace

void collect_block_params(NamedTensors& out, const std::string& prefix, const BlockParams& b) {
  out.emplace_back(prefix + ".norm1.g", b.norm1_g);
  out.emplace_back(prefix + ".norm1.b", b.norm1_b);
  for (size_t m = 0; m < b.mixer.size(); ++m)
    collect_mixer(out, prefix + ".mix" + std::to_string(m), b.mixer[m]);
  out.emplace_back(prefix + ".norm2.g", b.norm2_g);
  out.emplace_back(prefix + ".norm2.b", b.norm2_b);
  out.emplace_back(prefix + ".mlp.w_up", b.w_up);
  out.emplace_back(prefix + ".mlp.w_gate", b.w_gate);
  out.emplace_back(prefix + ".mlp.w_down", b.w_down);
}

NamedTensors named_params(const EncoderParams& enc) {
  NamedTensors out;
  out.emplace_back("enc.patch.w", enc.patch_w);
  out.emplace_back("enc.patch.b", enc.patch_b);
  out.emplace_back("enc.pos", enc.pos);
  for (size_t i = 0; i < enc.blocks.size(); ++i)
    collect_block_params(out, "enc.b" + zpad(int64_t(i)), enc.blocks[i]);
  if (enc.head_w.defined()) {
    out.emplace_back("head.norm.g", enc.head_norm_g);
    out.emplace_back("head.norm.b", enc.head_norm_b);
    out.emplace_back("head.w", enc.head_w);
    out.emplace_back("head.b", enc.head_b);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

}  // namespace armamba::blocks
