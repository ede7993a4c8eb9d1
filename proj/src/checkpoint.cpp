#include "armamba/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "armamba/blocks.hpp"
#include "armamba/config.hpp"

namespace armamba::checkpoint {

namespace {

void put_u16(std::string& out, uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

struct Reader {
  const uint8_t* p;
  size_t n, pos = 0;
  std::string path;
  void need(size_t k, const char* what) {
    if (pos + k > n)
      fail(ErrorKind::format, path + ": truncated checkpoint reading " + what + " (need " +
                                  std::to_string(pos + k) + " bytes, file has " +
                                  std::to_string(n) + ")");
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = uint16_t(p[pos]) | uint16_t(p[pos + 1]) << 8;
    pos += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[pos + size_t(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[pos + size_t(i)]) << (8 * i);
    pos += 8;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return p[pos++];
  }
  std::string bytes(size_t k, const char* what) {
    need(k, what);
    std::string s(reinterpret_cast<const char*>(p + pos), k);
    pos += k;
    return s;
  }
};

void encode_tensor_map(std::string& out, const std::map<std::string, Tensor>& m) {
  put_u32(out, uint32_t(m.size()));
  for (const auto& [name, t] : m) {
    put_u16(out, uint16_t(name.size()));
    out.append(name);
    out.push_back(char(t.dtype()));
    out.push_back(char(t.rank()));
    for (int64_t d : t.shape()) put_u64(out, uint64_t(d));
    out.append(reinterpret_cast<const char*>(t.impl()->storage->raw()),
               t.impl()->storage->size);
  }
}

std::map<std::string, Tensor> decode_tensor_map(Reader& r) {
  std::map<std::string, Tensor> m;
  const uint32_t count = r.u32("tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.u16("tensor name length");
    const std::string name = r.bytes(name_len, "tensor name");
    const uint8_t dt = r.u8("dtype");
    if (dt > 1) fail(ErrorKind::format, r.path + ": bad dtype byte for '" + name + "'");
    const uint8_t ndim = r.u8("rank");
    Shape shape(ndim);
    for (uint8_t d = 0; d < ndim; ++d) shape[d] = int64_t(r.u64("dim"));
    Tensor t = Tensor::empty(shape, DType(dt));
    const size_t payload = size_t(t.numel()) * dtype_size(t.dtype());
    r.need(payload, ("payload of '" + name + "'").c_str());
    std::memcpy(t.impl()->storage->raw(), r.p + r.pos, payload);
    r.pos += payload;
    if (!m.emplace(name, t).second)
      fail(ErrorKind::format, r.path + ": duplicate tensor name '" + name + "'");
  }
  return m;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  std::string out;
  out.append("ARMC");
  put_u16(out, 1);  // format version
  put_u32(out, uint32_t(config_json.size()));
  out.append(config_json);
  encode_tensor_map(out, tensors);
  out.push_back(has_optim ? 1 : 0);
  if (has_optim) {
    put_u64(out, optim_step);
    encode_tensor_map(out, optim);
  }
  out.push_back(has_ema ? 1 : 0);
  if (has_ema) encode_tensor_map(out, ema);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::io, "cannot write '" + tmp + "'");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) fail(ErrorKind::io, "short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open checkpoint '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{reinterpret_cast<const uint8_t*>(data.data()), data.size(), 0, path};
  if (r.bytes(4, "magic") != "ARMC") fail(ErrorKind::format, path + ": bad magic (expected ARMC)");
  const uint16_t version = r.u16("version");
  if (version != 1) fail(ErrorKind::format, path + ": unsupported version " + std::to_string(version));
  Checkpoint ck;
  const uint32_t cfg_len = r.u32("config length");
  ck.config_json = r.bytes(cfg_len, "config json");
  ck.tensors = decode_tensor_map(r);
  ck.has_optim = r.u8("optim flag") != 0;
  if (ck.has_optim) {
    ck.optim_step = r.u64("optim step");
    ck.optim = decode_tensor_map(r);
  }
  ck.has_ema = r.u8("ema flag") != 0;
  if (ck.has_ema) ck.ema = decode_tensor_map(r);
  if (r.pos != r.n)
    fail(ErrorKind::format, path + ": " + std::to_string(r.n - r.pos) + " trailing bytes");
  return ck;
}

namespace {

// bilinear resize of a [gh*gw, D] positional table to a new grid
Tensor resize_pos_table(const Tensor& pos, int64_t gh, int64_t gw, int64_t nh, int64_t nw) {
  const int64_t d = pos.dim(1);
  Tensor out = Tensor::empty({nh * nw, d}, pos.dtype());
  auto run = [&]<typename T>() {
    const T* src = pos.data<T>().data();
    T* dst = out.data<T>().data();
    for (int64_t r = 0; r < nh; ++r)
      for (int64_t c = 0; c < nw; ++c) {
        const double fy = nh > 1 ? double(r) * double(gh - 1) / double(nh - 1) : 0.0;
        const double fx = nw > 1 ? double(c) * double(gw - 1) / double(nw - 1) : 0.0;
        const int64_t y0 = int64_t(fy), x0 = int64_t(fx);
        const int64_t y1 = std::min(y0 + 1, gh - 1), x1 = std::min(x0 + 1, gw - 1);
        const double wy = fy - double(y0), wx = fx - double(x0);
        T* o = dst + (r * nw + c) * d;
        for (int64_t j = 0; j < d; ++j) {
          const double v00 = double(src[(y0 * gw + x0) * d + j]);
          const double v01 = double(src[(y0 * gw + x1) * d + j]);
          const double v10 = double(src[(y1 * gw + x0) * d + j]);
          const double v11 = double(src[(y1 * gw + x1) * d + j]);
          o[j] = T((1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11));
        }
      }
  };
  pos.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

}  // namespace

Checkpoint convert_pretrain_to_finetune(const Checkpoint& ckpt, int64_t num_classes,
                                        int64_t image_h, int64_t image_w, uint64_t seed) {
  blocks::ModelConfig cfg = config::model_from_json(ckpt.config_json);
  if (cfg.scan_mode != blocks::ScanArrangement::uni_1scan)
    fail(ErrorKind::contract, "convert: checkpoint is already a cross_4scan model");
  if (num_classes < 2) fail(ErrorKind::config, "convert: num_classes must be >= 2");

  const int64_t old_gh = cfg.patch_grid_h(), old_gw = cfg.patch_grid_w();
  blocks::ModelConfig out_cfg = cfg;
  out_cfg.scan_mode = blocks::ScanArrangement::cross_4scan;
  out_cfg.num_classes = num_classes;
  out_cfg.image_h = image_h;
  out_cfg.image_w = image_w;
  out_cfg.validate();

  Checkpoint out;
  out.config_json = config::model_to_json(out_cfg);
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("dec.", 0) == 0) continue;  // decoder is pretraining-only
    if (name.rfind("head.", 0) == 0)
      fail(ErrorKind::contract, "convert: pretraining checkpoint unexpectedly has a head");
    const size_t mixpos = name.find(".mix0.");
    if (name.rfind("enc.b", 0) == 0 && mixpos != std::string::npos) {
      // deep-copy the single pretrained scan into all four directional slots
      for (int s = 0; s < 4; ++s) {
        std::string n = name;
        n.replace(mixpos, 6, ".mix" + std::to_string(s) + ".");
        out.tensors.emplace(n, t.clone());
      }
    } else if (name == "enc.pos" && (out_cfg.patch_grid_h() != old_gh ||
                                     out_cfg.patch_grid_w() != old_gw)) {
      out.tensors.emplace(name, resize_pos_table(t, old_gh, old_gw, out_cfg.patch_grid_h(),
                                                 out_cfg.patch_grid_w()));
    } else {
      out.tensors.emplace(name, t.clone());
    }
  }
  // fresh classifier readout
  Rng rng = Rng(seed).fork(0x68656164ull);
  const DType dt = ckpt.tensors.begin()->second.dtype();
  out.tensors.emplace("head.norm.g", Tensor::full({cfg.width}, 1.0, dt));
  out.tensors.emplace("head.norm.b", Tensor::zeros({cfg.width}, dt));
  out.tensors.emplace("head.w", Tensor::randn({cfg.width, num_classes}, rng, 0.01, dt));
  out.tensors.emplace("head.b", Tensor::zeros({num_classes}, dt));
  return out;
}

}  // namespace armamba::checkpoint
