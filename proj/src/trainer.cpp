#include "armamba/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "armamba/ops.hpp"

namespace armamba::trainer {

namespace fs = std::filesystem;

OptimState init_optim(const blocks::NamedTensors& params, double beta1, double beta2,
                      double weight_decay) {
  OptimState st;
  st.beta1 = beta1;
  st.beta2 = beta2;
  st.weight_decay = weight_decay;
  for (const auto& [name, t] : params) {
    st.names.push_back(name);
    st.m.push_back(Tensor::zeros(t.shape(), t.dtype()));
    st.v.push_back(Tensor::zeros(t.shape(), t.dtype()));
  }
  return st;
}

std::optional<std::string> adamw_step(const blocks::NamedTensors& params, OptimState& st,
                                      double lr) {
  if (params.size() != st.names.size())
    fail(ErrorKind::contract, "adamw_step: optimizer state does not match parameter set");
  // validate every grad before touching any parameter
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i].second;
    if (!p.has_grad()) fail(ErrorKind::contract, "adamw_step: missing grad for " + params[i].first);
    auto check = [&]<typename T>() {
      const T* g = p.impl()->grad->as<T>();
      for (int64_t j = 0; j < p.numel(); ++j)
        if (!std::isfinite(double(g[j]))) return false;
      return true;
    };
    const bool ok = p.dtype() == DType::f32 ? check.template operator()<float>()
                                            : check.template operator()<double>();
    if (!ok) return params[i].first;
  }

  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i].second;
    auto run = [&]<typename T>() {
      T* pv = p.impl()->storage->as<T>();
      const T* g = p.impl()->grad->as<T>();
      T* m = st.m[i].impl()->storage->as<T>();
      T* v = st.v[i].impl()->storage->as<T>();
      const int64_t n = p.numel();
      const T b1 = T(st.beta1), b2 = T(st.beta2);
      const T decay = T(1.0 - lr * st.weight_decay);
      for (int64_t j = 0; j < n; ++j) {
        if (st.weight_decay != 0.0) pv[j] *= decay;
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        const double mhat = double(m[j]) / bc1;
        const double vhat = double(v[j]) / bc2;
        pv[j] = T(double(pv[j]) - lr * mhat / (std::sqrt(vhat) + st.eps));
      }
    };
    p.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  }
  return std::nullopt;
}

double cosine_lr(int64_t step, int64_t warmup_steps, int64_t total_steps, double lr_peak,
                 double lr_min) {
  if (warmup_steps > total_steps)
    fail(ErrorKind::config, "cosine_lr: warmup (" + std::to_string(warmup_steps) +
                                ") exceeds total steps (" + std::to_string(total_steps) + ")");
  if (step < 0 || step > total_steps) fail(ErrorKind::contract, "cosine_lr: step out of range");
  if (warmup_steps > 0 && step < warmup_steps)
    return lr_peak * double(step) / double(warmup_steps);
  if (total_steps == warmup_steps) return lr_peak;
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double clip_global_norm(const blocks::NamedTensors& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (int64_t j = 0; j < p.numel(); ++j) {
      const double g = p.grad_at(j);
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      auto run = [&]<typename T>() {
        T* g = p.impl()->grad->as<T>();
        for (int64_t j = 0; j < p.numel(); ++j) g[j] = T(double(g[j]) * s);
      };
      p.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
    }
  }
  return norm;
}

EmaState ema_init(const blocks::NamedTensors& params) {
  EmaState e;
  for (const auto& [name, p] : params) {
    e.names.push_back(name);
    e.shadow.push_back(p.clone());
  }
  return e;
}

void ema_update(EmaState& ema, const blocks::NamedTensors& params, double decay) {
  if (ema.shadow.size() != params.size())
    fail(ErrorKind::contract, "ema_update: shadow does not match parameter set");
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i].second;
    Tensor& s = ema.shadow[i];
    if (s.shape() != p.shape()) fail(ErrorKind::contract, "ema_update: shape mismatch for " + params[i].first);
    auto run = [&]<typename T>() {
      T* sv = s.impl()->storage->as<T>();
      const T* pv = p.impl()->storage->as<T>();
      const T d = T(decay);
      for (int64_t j = 0; j < p.numel(); ++j) sv[j] = d * sv[j] + (T(1) - d) * pv[j];
    };
    p.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  }
}

void ema_swap(EmaState& ema, const blocks::NamedTensors& params) {
  for (size_t i = 0; i < params.size(); ++i)
    std::swap(ema.shadow[i].impl()->storage, params[i].second.impl()->storage);
}

namespace {

// bilinear crop-resize from a u8 source window to f32 [th,tw,3] in [0,1]
Tensor crop_resize(const uint8_t* src, int64_t sw_stride, int64_t cy, int64_t cx, int64_t ch,
                   int64_t cw, int64_t th, int64_t tw) {
  Tensor out = Tensor::empty({th, tw, 3}, DType::f32);
  float* dst = out.data<float>().data();
  for (int64_t y = 0; y < th; ++y)
    for (int64_t x = 0; x < tw; ++x) {
      const double fy = (double(y) + 0.5) * double(ch) / double(th) - 0.5;
      const double fx = (double(x) + 0.5) * double(cw) / double(tw) - 0.5;
      const int64_t y0 = std::clamp<int64_t>(int64_t(std::floor(fy)), 0, ch - 1);
      const int64_t x0 = std::clamp<int64_t>(int64_t(std::floor(fx)), 0, cw - 1);
      const int64_t y1 = std::min(y0 + 1, ch - 1), x1 = std::min(x0 + 1, cw - 1);
      const double wy = std::clamp(fy - double(y0), 0.0, 1.0);
      const double wx = std::clamp(fx - double(x0), 0.0, 1.0);
      for (int64_t c = 0; c < 3; ++c) {
        const double v00 = src[((cy + y0) * sw_stride + cx + x0) * 3 + c];
        const double v01 = src[((cy + y0) * sw_stride + cx + x1) * 3 + c];
        const double v10 = src[((cy + y1) * sw_stride + cx + x0) * 3 + c];
        const double v11 = src[((cy + y1) * sw_stride + cx + x1) * 3 + c];
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        dst[(y * tw + x) * 3 + c] = float(v / 255.0);
      }
    }
  return out;
}

}  // namespace

Tensor hflip(const Tensor& img) {
  const int64_t h = img.dim(0), w = img.dim(1);
  Tensor out = Tensor::empty(img.shape(), img.dtype());
  auto run = [&]<typename T>() {
    const T* s = img.data<T>().data();
    T* d = out.data<T>().data();
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t c = 0; c < 3; ++c) d[(y * w + x) * 3 + c] = s[(y * w + (w - 1 - x)) * 3 + c];
  };
  img.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor augment(const uint8_t* src, int64_t src_h, int64_t src_w, int64_t target_h,
               int64_t target_w, AugmentMode /*mode*/, Rng& rng) {
  // both phases use the same crop policy; the target size differs by config
  int64_t cy = 0, cx = 0, ch = src_h, cw = src_w;
  bool found = false;
  const double src_area = double(src_h) * double(src_w);
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double area = rng.uniform(0.2, 1.0) * src_area;
    const double log_r = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double ratio = std::exp(log_r);
    const int64_t w = int64_t(std::lround(std::sqrt(area * ratio)));
    const int64_t h = int64_t(std::lround(std::sqrt(area / ratio)));
    if (w >= 1 && h >= 1 && w <= src_w && h <= src_h) {
      cx = int64_t(rng.next_below(uint64_t(src_w - w + 1)));
      cy = int64_t(rng.next_below(uint64_t(src_h - h + 1)));
      cw = w;
      ch = h;
      found = true;
    }
  }
  if (!found) {
    // center-crop fallback after 10 degenerate draws
    const int64_t side = std::min(src_h, src_w);
    cy = (src_h - side) / 2;
    cx = (src_w - side) / 2;
    ch = cw = side;
  }
  Tensor img = crop_resize(src, src_w, cy, cx, ch, cw, target_h, target_w);
  if (rng.next_double() < 0.5) img = hflip(img);
  return img;
}

Tensor eval_preprocess(const uint8_t* src, int64_t src_h, int64_t src_w, int64_t target_h,
                       int64_t target_w) {
  // crop the largest window with the target aspect, then resize
  const double target_ratio = double(target_w) / double(target_h);
  int64_t cw = src_w, ch = int64_t(std::lround(double(src_w) / target_ratio));
  if (ch > src_h) {
    ch = src_h;
    cw = int64_t(std::lround(double(src_h) * target_ratio));
  }
  cw = std::clamp<int64_t>(cw, 1, src_w);
  ch = std::clamp<int64_t>(ch, 1, src_h);
  return crop_resize(src, src_w, (src_h - ch) / 2, (src_w - cw) / 2, ch, cw, target_h, target_w);
}

PretrainModel build_pretrain_model(const blocks::ModelConfig& cfg, uint64_t seed, DType dtype) {
  blocks::ModelConfig c = cfg;
  c.scan_mode = blocks::ScanArrangement::uni_1scan;
  c.num_classes = 0;
  c.validate();
  Rng rng = Rng(seed).fork(0x6d6f64656cull);
  PretrainModel m{c, blocks::build_encoder(c, rng).params, objective::init_decoder(c, rng)};
  return m;
}

FinetuneModel build_finetune_model(const blocks::ModelConfig& cfg, uint64_t seed, DType dtype) {
  blocks::ModelConfig c = cfg;
  c.scan_mode = blocks::ScanArrangement::cross_4scan;
  if (c.num_classes < 2) fail(ErrorKind::config, "finetune model needs num_classes >= 2");
  c.validate();
  Rng rng = Rng(seed).fork(0x6d6f64656cull);
  return FinetuneModel{c, blocks::build_encoder(c, rng).params};
}

blocks::NamedTensors named_params(const PretrainModel& model) {
  blocks::NamedTensors out = blocks::named_params(model.enc);
  objective::collect_decoder_params(out, model.dec);
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

blocks::NamedTensors named_params(const FinetuneModel& model) { return blocks::named_params(model.enc); }

namespace {

checkpoint::Checkpoint make_ckpt(const blocks::ModelConfig& cfg, const blocks::NamedTensors& params) {
  checkpoint::Checkpoint ck;
  ck.config_json = config::model_to_json(cfg);
  for (const auto& [name, t] : params) ck.tensors.emplace(name, t.clone());
  return ck;
}

void load_named(const blocks::NamedTensors& params, const checkpoint::Checkpoint& ck) {
  if (params.size() != ck.tensors.size())
    fail(ErrorKind::format, "checkpoint: expected " + std::to_string(params.size()) +
                                " tensors, found " + std::to_string(ck.tensors.size()));
  for (const auto& [name, t] : params) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) fail(ErrorKind::format, "checkpoint: missing tensor '" + name + "'");
    if (it->second.shape() != t.shape() || it->second.dtype() != t.dtype())
      fail(ErrorKind::format, "checkpoint: shape/dtype mismatch for '" + name + "'");
    std::memcpy(t.impl()->storage->raw(), it->second.impl()->storage->raw(),
                t.impl()->storage->size);
  }
}

}  // namespace

checkpoint::Checkpoint to_checkpoint(const PretrainModel& model) {
  return make_ckpt(model.cfg, named_params(model));
}

checkpoint::Checkpoint to_checkpoint(const FinetuneModel& model) {
  return make_ckpt(model.cfg, named_params(model));
}

PretrainModel pretrain_from_checkpoint(const checkpoint::Checkpoint& ck) {
  blocks::ModelConfig cfg = config::model_from_json(ck.config_json);
  if (cfg.scan_mode != blocks::ScanArrangement::uni_1scan)
    fail(ErrorKind::contract, "checkpoint does not hold a uni_1scan pretraining model");
  PretrainModel m = build_pretrain_model(cfg, 0);
  load_named(named_params(m), ck);
  return m;
}

FinetuneModel finetune_from_checkpoint(const checkpoint::Checkpoint& ck) {
  blocks::ModelConfig cfg = config::model_from_json(ck.config_json);
  if (cfg.scan_mode != blocks::ScanArrangement::cross_4scan)
    fail(ErrorKind::contract, "checkpoint does not hold a cross_4scan finetuning model");
  FinetuneModel m = build_finetune_model(cfg, 0);
  load_named(named_params(m), ck);
  return m;
}

namespace {

struct MetricsLog {
  std::ofstream file;
  bool zero_wall = false;
  explicit MetricsLog(const std::string& path, bool zero_wall_) : file(path, std::ios::trunc),
                                                                  zero_wall(zero_wall_) {
    if (!file) fail(ErrorKind::io, "cannot write metrics to '" + path + "'");
    file << "step,epoch,lr,loss,top1,wall_ms\n";
  }
  void row(int64_t step, int64_t epoch, double lr, double loss, double top1, double wall_ms,
           bool has_top1) {
    char buf[160];
    if (has_top1)
      std::snprintf(buf, sizeof buf, "%lld,%lld,%.8g,%.8g,%.6g,%.6g\n", (long long)step,
                    (long long)epoch, lr, loss, top1, zero_wall ? 0.0 : wall_ms);
    else
      std::snprintf(buf, sizeof buf, "%lld,%lld,%.8g,%.8g,,%.6g\n", (long long)step,
                    (long long)epoch, lr, loss, zero_wall ? 0.0 : wall_ms);
    file << buf;
  }
};

std::vector<int64_t> epoch_order(int64_t n, uint64_t seed, int64_t epoch) {
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).fork(0x73687566ull, uint64_t(epoch));
  rng.shuffle(order);
  return order;
}

double wall_ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

// batched tokens + per-sample pos maps + AR targets for a pretraining batch
struct PretrainBatch {
  Tensor tokens;                  // [B,L,Pd]
  std::vector<int64_t> pos_map;   // B*L (flattened per-sample token->patch)
  objective::ArTargets targets;   // batched
};

PretrainBatch make_pretrain_batch(const blocks::ModelConfig& cfg,
                                  const dataio::PackedDataset& ds,
                                  const std::vector<int64_t>& indices, uint64_t seed,
                                  int64_t epoch) {
  const int64_t bsz = int64_t(indices.size());
  PretrainBatch out;
  Tensor first;
  for (int64_t i = 0; i < bsz; ++i) {
    const int64_t idx = indices[size_t(i)];
    Rng aug_rng = Rng(seed).fork(0x617567ull, uint64_t(epoch), uint64_t(idx));
    Tensor img = augment(ds.image(idx), ds.height(), ds.width(), cfg.image_h, cfg.image_w,
                         AugmentMode::pretrain, aug_rng);
    // random order draws a fresh permutation per image per epoch
    const uint64_t lay_seed = Rng(seed).fork(0x6f7264ull, uint64_t(epoch), uint64_t(idx)).next_u64();
    layout::ClusterLayout lay = layout::make_layout(cfg.image_h, cfg.image_w, cfg.patch_size,
                                                    cfg.cluster_size, cfg.order, lay_seed);
    Tensor tokens = layout::patchify(img, lay);
    objective::ArTargets t = objective::build_targets(img, lay, cfg.target_kind, cfg.norm_unit);
    const auto map = lay.token_to_patch();
    if (i == 0) {
      const int64_t l = tokens.dim(0), pd = tokens.dim(1);
      out.tokens = Tensor::empty({bsz, l, pd}, DType::f32);
      out.targets.shift_k = t.shift_k;
      out.targets.valid = t.valid;
      out.targets.target = Tensor::empty({bsz, t.valid, pd}, DType::f32);
      out.pos_map.reserve(size_t(bsz * l));
    }
    std::memcpy(out.tokens.data<float>().data() + i * tokens.numel(),
                tokens.data<float>().data(), size_t(tokens.numel()) * 4);
    std::memcpy(out.targets.target.data<float>().data() + i * t.target.numel(),
                t.target.data<float>().data(), size_t(t.target.numel()) * 4);
    out.pos_map.insert(out.pos_map.end(), map.begin(), map.end());
  }
  return out;
}

Tensor finetune_batch_tokens(const blocks::ModelConfig& cfg, const dataio::PackedDataset& ds,
                             const std::vector<int64_t>& indices, uint64_t seed, int64_t epoch,
                             bool train_mode) {
  const int64_t bsz = int64_t(indices.size());
  const layout::ClusterLayout raster = layout::make_layout(
      cfg.image_h, cfg.image_w, cfg.patch_size, cfg.patch_size, layout::OrderKind::row_forward);
  Tensor out;
  for (int64_t i = 0; i < bsz; ++i) {
    const int64_t idx = indices[size_t(i)];
    Tensor img;
    if (train_mode) {
      Rng aug_rng = Rng(seed).fork(0x617567ull, uint64_t(epoch), uint64_t(idx));
      img = augment(ds.image(idx), ds.height(), ds.width(), cfg.image_h, cfg.image_w,
                    AugmentMode::finetune, aug_rng);
    } else {
      img = eval_preprocess(ds.image(idx), ds.height(), ds.width(), cfg.image_h, cfg.image_w);
    }
    Tensor tokens = layout::patchify(img, raster);
    if (i == 0) out = Tensor::empty({bsz, tokens.dim(0), tokens.dim(1)}, DType::f32);
    std::memcpy(out.data<float>().data() + i * tokens.numel(), tokens.data<float>().data(),
                size_t(tokens.numel()) * 4);
  }
  return out;
}

std::vector<int64_t> identity_map(int64_t n) {
  std::vector<int64_t> v(static_cast<size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void attach_optim(checkpoint::Checkpoint& ck, const OptimState& st) {
  ck.has_optim = true;
  ck.optim_step = uint64_t(st.step);
  for (size_t i = 0; i < st.names.size(); ++i) {
    ck.optim.emplace("m:" + st.names[i], st.m[i].clone());
    ck.optim.emplace("v:" + st.names[i], st.v[i].clone());
  }
}

void restore_optim(OptimState& st, const checkpoint::Checkpoint& ck) {
  st.step = int64_t(ck.optim_step);
  for (size_t i = 0; i < st.names.size(); ++i) {
    auto mi = ck.optim.find("m:" + st.names[i]);
    auto vi = ck.optim.find("v:" + st.names[i]);
    if (mi == ck.optim.end() || vi == ck.optim.end())
      fail(ErrorKind::format, "checkpoint: missing optimizer state for " + st.names[i]);
    std::memcpy(st.m[i].impl()->storage->raw(), mi->second.impl()->storage->raw(),
                st.m[i].impl()->storage->size);
    std::memcpy(st.v[i].impl()->storage->raw(), vi->second.impl()->storage->raw(),
                st.v[i].impl()->storage->size);
  }
}

void dump_triptychs(const PretrainModel& model, const dataio::PackedDataset& ds,
                    const dataio::Manifest& man, const std::string& out_dir, int64_t count,
                    uint64_t seed) {
  NoGradGuard ng;
  const blocks::ModelConfig& cfg = model.cfg;
  const layout::ClusterLayout lay = layout::make_layout(cfg.image_h, cfg.image_w, cfg.patch_size,
                                                        cfg.cluster_size, cfg.order, seed);
  const auto map = lay.token_to_patch();
  auto to_u8 = [](const Tensor& img) {
    // min-max per panel: targets may be standardized
    double lo = 1e30, hi = -1e30;
    for (int64_t i = 0; i < img.numel(); ++i) {
      lo = std::min(lo, img.at(i));
      hi = std::max(hi, img.at(i));
    }
    const double s = hi > lo ? 255.0 / (hi - lo) : 0.0;
    dataio::PpmImage out;
    out.width = img.dim(1);
    out.height = img.dim(0);
    out.pixels.resize(size_t(img.numel()));
    for (int64_t i = 0; i < img.numel(); ++i)
      out.pixels[size_t(i)] = uint8_t(std::lround((img.at(i) - lo) * s));
    return out;
  };
  for (int64_t i = 0; i < std::min(count, man.val_count); ++i) {
    const int64_t idx = man.val_offset + i;
    Tensor img = eval_preprocess(ds.image(idx), ds.height(), ds.width(), cfg.image_h, cfg.image_w);
    Tensor tokens = layout::patchify(img, lay);
    objective::ArTargets t = objective::build_targets(img, lay, cfg.target_kind, cfg.norm_unit);
    Tensor batch = ops::reshape(tokens, {1, tokens.dim(0), tokens.dim(1)});
    Tensor enc_out = blocks::encoder_forward(model.enc, cfg, batch, map);
    Tensor pred = objective::decoder_forward(enc_out, model.dec);
    // re-assemble full-length token sequences for unpatchify
    Tensor pred_tokens = Tensor::zeros({tokens.dim(0), tokens.dim(1)}, DType::f32);
    Tensor targ_tokens = Tensor::zeros({tokens.dim(0), tokens.dim(1)}, DType::f32);
    for (int64_t p = 0; p < t.valid; ++p)
      for (int64_t j = 0; j < tokens.dim(1); ++j) {
        pred_tokens.set((p + t.shift_k) * tokens.dim(1) + j, pred.at(p * tokens.dim(1) + j));
        targ_tokens.set((p + t.shift_k) * tokens.dim(1) + j, t.target.at(p * tokens.dim(1) + j));
      }
    dataio::write_ppm(out_dir + "/triptych_" + std::to_string(i) + "_input.ppm", to_u8(img));
    dataio::write_ppm(out_dir + "/triptych_" + std::to_string(i) + "_pred.ppm",
                      to_u8(layout::unpatchify(pred_tokens, lay)));
    dataio::write_ppm(out_dir + "/triptych_" + std::to_string(i) + "_target.ppm",
                      to_u8(layout::unpatchify(targ_tokens, lay)));
  }
}

}  // namespace

RunResult run_pretrain(const config::FullConfig& full, const std::string& out_dir,
                       const RunOptions& opt) {
  const auto t_start = std::chrono::steady_clock::now();
  blocks::ModelConfig cfg = full.model;
  cfg.scan_mode = blocks::ScanArrangement::uni_1scan;
  cfg.validate();
  const config::TrainConfig& tc = full.train;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  {
    std::ofstream probe(out_dir + "/.write_probe", std::ios::trunc);
    if (!probe) fail(ErrorKind::io, "output directory '" + out_dir + "' is not writable");
  }
  fs::remove(out_dir + "/.write_probe", ec);

  dataio::PackedDataset ds = dataio::PackedDataset::read(tc.dataset);
  const std::string man_path = tc.manifest.empty() ? tc.dataset + ".manifest.json" : tc.manifest;
  dataio::Manifest man = dataio::Manifest::load(man_path);
  man.validate(ds);
  if (man.train_count < tc.batch_size)
    fail(ErrorKind::config, "pretrain: train split smaller than one batch");

  PretrainModel model = build_pretrain_model(cfg, opt.seed);
  blocks::NamedTensors params = named_params(model);
  OptimState optim = init_optim(params, tc.beta1, tc.beta2, tc.weight_decay);

  int64_t start_epoch = 0;
  if (!opt.resume.empty()) {
    checkpoint::Checkpoint ck = checkpoint::Checkpoint::load(opt.resume);
    model = pretrain_from_checkpoint(ck);
    params = named_params(model);
    optim = init_optim(params, tc.beta1, tc.beta2, tc.weight_decay);
    if (!ck.has_optim) fail(ErrorKind::contract, "resume checkpoint lacks optimizer state");
    restore_optim(optim, ck);
    const int64_t steps_per_epoch = man.train_count / tc.batch_size;
    start_epoch = optim.step / steps_per_epoch;
  }

  const int64_t steps_per_epoch = man.train_count / tc.batch_size;
  const int64_t planned_steps = tc.max_steps > 0
                                    ? std::min(tc.max_steps, tc.epochs * steps_per_epoch)
                                    : tc.epochs * steps_per_epoch;
  const int64_t warmup = std::min(tc.warmup_epochs * steps_per_epoch, planned_steps);
  const double peak = tc.peak_lr();

  MetricsLog log(out_dir + "/metrics.csv", opt.deterministic_artifacts);
  RunResult res;
  res.metrics_path = out_dir + "/metrics.csv";
  ssm::MixerOptions mix;
  mix.disc = cfg.discretization;

  std::string last_good;
  bool done = false;
  for (int64_t epoch = start_epoch; epoch < tc.epochs && !done; ++epoch) {
    const auto order = epoch_order(man.train_count, opt.seed, epoch);
    for (int64_t b = 0; b + tc.batch_size <= man.train_count; b += tc.batch_size) {
      const int64_t step = optim.step;
      if (step >= planned_steps || (opt.stop_after_steps > 0 && step >= opt.stop_after_steps)) {
        done = true;
        break;
      }
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<int64_t> idx(order.begin() + b, order.begin() + b + tc.batch_size);
      for (auto& i : idx) i += man.train_offset;
      PretrainBatch batch = make_pretrain_batch(cfg, ds, idx, opt.seed, epoch);

      Tensor enc_out = blocks::encoder_forward(model.enc, cfg, batch.tokens, batch.pos_map, mix);
      Tensor loss = objective::ar_loss(enc_out, model.dec, batch.targets, mix);
      const double loss_v = loss.item();
      if (!std::isfinite(loss_v)) {
        fail(ErrorKind::numeric, "pretrain: loss is not finite at step " + std::to_string(step) +
                                   (last_good.empty() ? "" : "; last good checkpoint: " + last_good));
      }
      for (const auto& [n, p] : params) p.zero_grad();
      loss.backward();
      if (tc.clip_norm > 0) clip_global_norm(params, tc.clip_norm);
      const double lr = cosine_lr(step, warmup, planned_steps, peak, tc.lr_min);
      if (auto bad = adamw_step(params, optim, lr))
        std::fprintf(stderr, "step %lld: non-finite gradient for %s, step skipped\n",
                     (long long)step, bad->c_str());
      res.losses.push_back(loss_v);
      log.row(step, epoch, lr, loss_v, 0, wall_ms_since(t0), false);
    }
    checkpoint::Checkpoint ck = to_checkpoint(model);
    attach_optim(ck, optim);
    const std::string path = out_dir + "/ckpt_epoch_" + std::to_string(epoch) + ".armc";
    ck.save(path);
    last_good = path;
  }

  checkpoint::Checkpoint final_ck = to_checkpoint(model);  // EMA-free weights
  res.final_ckpt = out_dir + "/final.armc";
  final_ck.save(res.final_ckpt);
  res.steps = optim.step;
  if (opt.dump_triptychs > 0) dump_triptychs(model, ds, man, out_dir, opt.dump_triptychs, opt.seed);
  (void)t_start;
  return res;
}

double evaluate(const FinetuneModel& model, const dataio::PackedDataset& ds, int64_t offset,
                int64_t count, int64_t batch_size) {
  NoGradGuard ng;
  if (count <= 0) return 0.0;
  int64_t correct = 0;
  const auto id_map = identity_map(model.cfg.num_patches());
  for (int64_t b = 0; b < count; b += batch_size) {
    const int64_t n = std::min(batch_size, count - b);
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), offset + b);
    Tensor tokens = finetune_batch_tokens(model.cfg, ds, idx, 0, 0, false);
    Tensor logits = blocks::classifier_forward(model.enc,
                                               blocks::encoder_forward(model.enc, model.cfg, tokens, id_map));
    for (int64_t i = 0; i < n; ++i) {
      int64_t arg = 0;
      double best = logits.at(i * model.cfg.num_classes);
      for (int64_t c = 1; c < model.cfg.num_classes; ++c)
        if (logits.at(i * model.cfg.num_classes + c) > best) {
          best = logits.at(i * model.cfg.num_classes + c);
          arg = c;
        }
      if (arg == int64_t(ds.label(idx[size_t(i)]))) ++correct;
    }
  }
  return double(correct) / double(count);
}

RunResult run_finetune(const config::FullConfig& full, const std::string& pretrained_ckpt,
                       const std::string& out_dir, const RunOptions& opt) {
  blocks::ModelConfig cfg = full.model;
  cfg.scan_mode = blocks::ScanArrangement::cross_4scan;
  const config::TrainConfig& tc = full.train;

  std::error_code ec;
  fs::create_directories(out_dir, ec);

  dataio::PackedDataset ds = dataio::PackedDataset::read(tc.dataset);
  const std::string man_path = tc.manifest.empty() ? tc.dataset + ".manifest.json" : tc.manifest;
  dataio::Manifest man = dataio::Manifest::load(man_path);
  man.validate(ds);
  if (cfg.num_classes != int64_t(man.class_names.size()))
    fail(ErrorKind::config, "finetune: config num_classes (" + std::to_string(cfg.num_classes) +
                                ") != dataset classes (" + std::to_string(man.class_names.size()) +
                                ")");

  FinetuneModel model;
  if (!pretrained_ckpt.empty()) {
    checkpoint::Checkpoint pre = checkpoint::Checkpoint::load(pretrained_ckpt);
    checkpoint::Checkpoint conv = checkpoint::convert_pretrain_to_finetune(
        pre, cfg.num_classes, cfg.image_h, cfg.image_w, opt.seed);
    model = finetune_from_checkpoint(conv);
    // geometry + training knobs follow the requested config
    model.cfg.order = cfg.order;
    model.cfg.target_kind = cfg.target_kind;
  } else {
    model = build_finetune_model(cfg, opt.seed);
  }
  blocks::NamedTensors params = named_params(model);
  OptimState optim = init_optim(params, tc.beta1, tc.beta2, tc.weight_decay);
  EmaState ema = ema_init(params);

  const int64_t steps_per_epoch = man.train_count / tc.batch_size;
  if (steps_per_epoch < 1) fail(ErrorKind::config, "finetune: train split smaller than one batch");
  const int64_t total_steps = tc.epochs * steps_per_epoch;
  const int64_t warmup = std::min(tc.warmup_epochs * steps_per_epoch, total_steps);
  const double peak = tc.peak_lr();

  MetricsLog log(out_dir + "/metrics.csv", opt.deterministic_artifacts);
  RunResult res;
  res.metrics_path = out_dir + "/metrics.csv";
  ssm::MixerOptions mix;
  mix.disc = model.cfg.discretization;

  double best = -1.0;
  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto order = epoch_order(man.train_count, opt.seed, epoch);
    for (int64_t b = 0; b + tc.batch_size <= man.train_count; b += tc.batch_size) {
      const auto t0 = std::chrono::steady_clock::now();
      const int64_t step = optim.step;
      std::vector<int64_t> idx(order.begin() + b, order.begin() + b + tc.batch_size);
      std::vector<int64_t> labels(size_t(tc.batch_size));
      for (size_t i = 0; i < idx.size(); ++i) {
        idx[i] += man.train_offset;
        labels[i] = ds.label(idx[i]);
      }
      Tensor tokens = finetune_batch_tokens(model.cfg, ds, idx, opt.seed, epoch, true);
      Tensor logits = blocks::classifier_forward(
          model.enc, blocks::encoder_forward(model.enc, model.cfg, tokens,
                                             identity_map(model.cfg.num_patches()), mix));
      Tensor loss = ops::cross_entropy(logits, labels);
      const double loss_v = loss.item();
      if (!std::isfinite(loss_v))
        fail(ErrorKind::numeric, "finetune: loss is not finite at step " + std::to_string(step));
      for (const auto& [n, p] : params) p.zero_grad();
      loss.backward();
      if (tc.clip_norm > 0) clip_global_norm(params, tc.clip_norm);
      const double lr = cosine_lr(step, warmup, total_steps, peak, tc.lr_min);
      if (auto bad = adamw_step(params, optim, lr))
        std::fprintf(stderr, "step %lld: non-finite gradient for %s, step skipped\n",
                     (long long)step, bad->c_str());
      ema_update(ema, params, tc.ema_decay);
      res.losses.push_back(loss_v);
      log.row(step, epoch, lr, loss_v, 0, wall_ms_since(t0), false);
    }
    // EMA weights are evaluated every epoch; the raw weights once at the
    // end, where the ema-vs-raw comparison is reported
    const bool last_epoch = epoch == tc.epochs - 1;
    const double raw =
        last_epoch ? evaluate(model, ds, man.val_offset, man.val_count, tc.eval_batch_size) : 0.0;
    ema_swap(ema, params);
    const double ema_top1 = evaluate(model, ds, man.val_offset, man.val_count, tc.eval_batch_size);
    const double epoch_best = std::max(raw, ema_top1);
    if (epoch_best > best) {
      best = epoch_best;
      checkpoint::Checkpoint ck = to_checkpoint(model);  // EMA weights currently swapped in
      if (raw > ema_top1) {
        ema_swap(ema, params);
        ck = to_checkpoint(model);
        ema_swap(ema, params);
      }
      res.best_ckpt = out_dir + "/best.armc";
      ck.save(res.best_ckpt);
    }
    ema_swap(ema, params);
    res.top1_raw.push_back(raw);
    res.top1_ema.push_back(ema_top1);
    log.row(optim.step, epoch, 0, 0, ema_top1, 0, true);
    if (last_epoch)
      std::fprintf(stderr, "epoch %lld: ema top-1 %.4f vs raw top-1 %.4f\n", (long long)epoch,
                   ema_top1, raw);
  }
  res.best_top1 = best;
  res.steps = optim.step;
  checkpoint::Checkpoint final_ck = to_checkpoint(model);
  res.final_ckpt = out_dir + "/final.armc";
  final_ck.save(res.final_ckpt);
  return res;
}

}  // namespace armamba::trainer
