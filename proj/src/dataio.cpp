#include "armamba/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace armamba::dataio {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr size_t kHeaderSize = 4 + 2 + 4 + 2 + 2 + 1;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}
void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

}  // namespace

PackedDataset PackedDataset::read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open dataset '" + path + "'");
  PackedDataset ds;
  ds.bytes_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  if (ds.bytes_.size() < kHeaderSize)
    fail(ErrorKind::format, path + ": file shorter than header");
  if (std::memcmp(ds.bytes_.data(), "ARMD", 4) != 0)
    fail(ErrorKind::format, path + ": bad magic (expected ARMD)");
  const uint8_t* p = ds.bytes_.data() + 4;
  const uint16_t version = uint16_t(p[0]) | uint16_t(p[1]) << 8;
  if (version != 1) fail(ErrorKind::format, path + ": unsupported version " + std::to_string(version));
  p += 2;
  uint32_t count = 0;
  for (int i = 0; i < 4; ++i) count |= uint32_t(p[size_t(i)]) << (8 * i);
  p += 4;
  ds.count_ = count;
  ds.height_ = int64_t(p[0]) | int64_t(p[1]) << 8;
  p += 2;
  ds.width_ = int64_t(p[0]) | int64_t(p[1]) << 8;
  p += 2;
  ds.channels_ = *p;
  if (ds.channels_ != 3) fail(ErrorKind::format, path + ": only 3-channel data supported");
  ds.record_size_ = 2 + size_t(ds.height_ * ds.width_ * 3);
  ds.header_size_ = kHeaderSize;
  const size_t expected = kHeaderSize + size_t(ds.count_) * ds.record_size_;
  if (ds.bytes_.size() != expected)
    fail(ErrorKind::format, path + ": length mismatch, expected " + std::to_string(expected) +
                                " bytes, got " + std::to_string(ds.bytes_.size()));
  return ds;
}

uint16_t PackedDataset::label(int64_t index) const {
  if (index < 0 || index >= count_)
    fail(ErrorKind::input, "dataset index " + std::to_string(index) + " out of range [0," +
                               std::to_string(count_) + ")");
  const uint8_t* p = bytes_.data() + header_size_ + size_t(index) * record_size_;
  return uint16_t(p[0]) | uint16_t(p[1]) << 8;
}

const uint8_t* PackedDataset::image(int64_t index) const {
  if (index < 0 || index >= count_)
    fail(ErrorKind::input, "dataset index " + std::to_string(index) + " out of range [0," +
                               std::to_string(count_) + ")");
  return bytes_.data() + header_size_ + size_t(index) * record_size_ + 2;
}

Tensor PackedDataset::image_f32(int64_t index) const {
  const uint8_t* src = image(index);
  Tensor t = Tensor::empty({height_, width_, 3}, DType::f32);
  float* dst = t.data<float>().data();
  const int64_t n = height_ * width_ * 3;
  for (int64_t i = 0; i < n; ++i) dst[i] = float(src[i]) / 255.0f;
  return t;
}

void write_packed(const std::string& path, int64_t h, int64_t w,
                  const std::vector<Record>& records) {
  if (h < 1 || h > 65535 || w < 1 || w > 65535) fail(ErrorKind::input, "write_packed: bad dims");
  std::string out;
  out.append("ARMD");
  put_u16(out, 1);
  put_u32(out, uint32_t(records.size()));
  put_u16(out, uint16_t(h));
  put_u16(out, uint16_t(w));
  out.push_back(3);
  const size_t pix = size_t(h * w * 3);
  for (const auto& r : records) {
    if (r.pixels.size() != pix) fail(ErrorKind::input, "write_packed: record pixel size mismatch");
    put_u16(out, r.label);
    out.append(reinterpret_cast<const char*>(r.pixels.data()), r.pixels.size());
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::io, "cannot write '" + tmp + "'");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) fail(ErrorKind::io, "short write to '" + tmp + "'");
  }
  fs::rename(tmp, path);
}

void Manifest::save(const std::string& path) const {
  json j;
  j["classes"] = class_names;
  j["counts"] = class_counts;
  j["splits"] = {{"train", {{"offset", train_offset}, {"count", train_count}}},
                 {"val", {{"offset", val_offset}, {"count", val_count}}}};
  j["source"] = source;
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot write manifest '" + path + "'");
  f << j.dump(2) << "\n";
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::io, "cannot open manifest '" + path + "'");
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::format, path + ": invalid JSON");
  Manifest m;
  m.class_names = j.at("classes").get<std::vector<std::string>>();
  m.class_counts = j.at("counts").get<std::vector<int64_t>>();
  m.train_offset = j.at("splits").at("train").at("offset").get<int64_t>();
  m.train_count = j.at("splits").at("train").at("count").get<int64_t>();
  m.val_offset = j.at("splits").at("val").at("offset").get<int64_t>();
  m.val_count = j.at("splits").at("val").at("count").get<int64_t>();
  m.source = j.value("source", "");
  return m;
}

void Manifest::validate(const PackedDataset& ds) const {
  if (train_offset + train_count > ds.count() || val_offset + val_count > ds.count())
    fail(ErrorKind::format, "manifest: split ranges exceed dataset");
  const bool overlap = std::max(train_offset, val_offset) <
                       std::min(train_offset + train_count, val_offset + val_count);
  if (overlap && train_count > 0 && val_count > 0)
    fail(ErrorKind::format, "manifest: train/val ranges overlap");
  for (int64_t i = 0; i < ds.count(); ++i)
    if (ds.label(i) >= class_names.size())
      fail(ErrorKind::format, "manifest: record " + std::to_string(i) + " label " +
                                  std::to_string(ds.label(i)) + " >= class count " +
                                  std::to_string(class_names.size()));
}

PpmImage read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open '" + path + "'");
  std::string magic;
  f >> magic;
  if (magic != "P6") fail(ErrorKind::format, path + ": not a binary PPM (P6) file");
  auto next_int = [&]() -> int64_t {
    // skip whitespace and '#' comments
    int c;
    while ((c = f.peek()) != EOF) {
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(c)) {
        f.get();
      } else {
        break;
      }
    }
    int64_t v;
    if (!(f >> v)) fail(ErrorKind::format, path + ": malformed PPM header");
    return v;
  };
  PpmImage img;
  img.width = next_int();
  img.height = next_int();
  const int64_t maxval = next_int();
  if (img.width < 1 || img.height < 1 || maxval < 1 || maxval > 65535)
    fail(ErrorKind::format, path + ": bad PPM dimensions/maxval");
  f.get();  // single whitespace after maxval
  const int64_t n = img.width * img.height * 3;
  img.pixels.resize(size_t(n));
  if (maxval == 255) {
    f.read(reinterpret_cast<char*>(img.pixels.data()), n);
    if (f.gcount() != n) fail(ErrorKind::format, path + ": truncated PPM payload");
  } else if (maxval < 255) {
    std::vector<uint8_t> raw(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(raw.data()), n);
    if (f.gcount() != n) fail(ErrorKind::format, path + ": truncated PPM payload");
    for (int64_t i = 0; i < n; ++i)
      img.pixels[size_t(i)] = uint8_t(std::lround(double(raw[size_t(i)]) * 255.0 / double(maxval)));
  } else {
    std::vector<uint8_t> raw(size_t(2 * n));
    f.read(reinterpret_cast<char*>(raw.data()), 2 * n);
    if (f.gcount() != 2 * n) fail(ErrorKind::format, path + ": truncated PPM payload");
    for (int64_t i = 0; i < n; ++i) {
      const int64_t v = int64_t(raw[size_t(2 * i)]) << 8 | raw[size_t(2 * i + 1)];
      img.pixels[size_t(i)] = uint8_t(std::lround(double(v) * 255.0 / double(maxval)));
    }
  }
  return img;
}

void write_ppm(const std::string& path, const PpmImage& img) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot write '" + path + "'");
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
}

namespace {

// shorter-side resize + center crop, bilinear, u8 -> u8
std::vector<uint8_t> resize_center_crop(const uint8_t* src, int64_t sh, int64_t sw, int64_t th,
                                        int64_t tw) {
  const double scale = std::max(double(th) / double(sh), double(tw) / double(sw));
  const int64_t rh = std::max<int64_t>(th, int64_t(std::lround(double(sh) * scale)));
  const int64_t rw = std::max<int64_t>(tw, int64_t(std::lround(double(sw) * scale)));
  std::vector<uint8_t> out(size_t(th * tw * 3));
  const int64_t y_off = (rh - th) / 2, x_off = (rw - tw) / 2;
  for (int64_t y = 0; y < th; ++y)
    for (int64_t x = 0; x < tw; ++x) {
      const double fy = (double(y + y_off) + 0.5) * double(sh) / double(rh) - 0.5;
      const double fx = (double(x + x_off) + 0.5) * double(sw) / double(rw) - 0.5;
      const int64_t y0 = std::clamp<int64_t>(int64_t(std::floor(fy)), 0, sh - 1);
      const int64_t x0 = std::clamp<int64_t>(int64_t(std::floor(fx)), 0, sw - 1);
      const int64_t y1 = std::min(y0 + 1, sh - 1), x1 = std::min(x0 + 1, sw - 1);
      const double wy = std::clamp(fy - double(y0), 0.0, 1.0);
      const double wx = std::clamp(fx - double(x0), 0.0, 1.0);
      for (int64_t c = 0; c < 3; ++c) {
        const double v00 = src[(y0 * sw + x0) * 3 + c], v01 = src[(y0 * sw + x1) * 3 + c];
        const double v10 = src[(y1 * sw + x0) * 3 + c], v11 = src[(y1 * sw + x1) * 3 + c];
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        out[size_t((y * tw + x) * 3 + c)] = uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  return out;
}

}  // namespace

void ingest_ppm_dir(const std::string& dir, const std::string& out_packed,
                    const std::string& out_manifest, int64_t target_h, int64_t target_w,
                    double val_fraction) {
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) fail(ErrorKind::input, "ingest: no class subdirectories in '" + dir + "'");

  Manifest m;
  std::vector<Record> train, val;
  for (size_t ci = 0; ci < class_dirs.size(); ++ci) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(dir) / class_dirs[ci]))
      if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty())
      fail(ErrorKind::input, "ingest: class directory '" + class_dirs[ci] + "' is empty");
    const int64_t n_val = int64_t(std::floor(double(files.size()) * val_fraction));
    for (size_t fi = 0; fi < files.size(); ++fi) {
      PpmImage img = read_ppm(files[fi]);
      Record rec;
      rec.label = uint16_t(ci);
      rec.pixels = resize_center_crop(img.pixels.data(), img.height, img.width, target_h, target_w);
      (int64_t(fi) < int64_t(files.size()) - n_val ? train : val).push_back(std::move(rec));
    }
    m.class_names.push_back(class_dirs[ci]);
    m.class_counts.push_back(int64_t(files.size()));
  }
  std::vector<Record> all = train;
  all.insert(all.end(), val.begin(), val.end());
  m.train_offset = 0;
  m.train_count = int64_t(train.size());
  m.val_offset = int64_t(train.size());
  m.val_count = int64_t(val.size());
  m.source = "ingest:" + dir;
  write_packed(out_packed, target_h, target_w, all);
  m.save(out_manifest);
}

namespace {

// clutter background: smooth two-tone gradient + sinusoid texture + noise
void paint_background(std::vector<float>& img, int64_t s, Rng& rng) {
  float base[3], tilt[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = float(rng.uniform(0.15, 0.65));
    tilt[c] = float(rng.uniform(-0.25, 0.25));
  }
  const double fx = rng.uniform(1.0, 4.0), fy = rng.uniform(1.0, 4.0);
  const double phase = rng.uniform(0.0, 6.28318);
  const double tex_amp = rng.uniform(0.03, 0.12);
  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      const double u = double(x) / double(s), v = double(y) / double(s);
      const double tex = tex_amp * std::sin(6.28318 * (fx * u + fy * v) + phase);
      for (int64_t c = 0; c < 3; ++c)
        img[size_t((y * s + x) * 3 + c)] = base[c] + tilt[c] * float(u + v - 1.0) + float(tex);
    }
  for (size_t i = 0; i < img.size(); ++i) img[i] += float(rng.normal() * 0.06);
}

enum ShapeType { kCircle = 0, kSquare, kTriangle, kStripes, kNumShapes };

void paint_shape(std::vector<float>& img, int64_t s, int shape, const float color[3], double cx,
                 double cy, double r, double angle) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      const double dx0 = double(x) - cx, dy0 = double(y) - cy;
      const double dx = ca * dx0 + sa * dy0, dy = -sa * dx0 + ca * dy0;
      bool inside = false;
      switch (shape) {
        case kCircle: inside = dx * dx + dy * dy < r * r; break;
        case kSquare: inside = std::abs(dx) < r * 0.9 && std::abs(dy) < r * 0.9; break;
        case kTriangle:
          inside = dy > -r && dy < r && std::abs(dx) < (r - dy) * 0.6;
          break;
        case kStripes: {
          const bool in_disk = dx * dx + dy * dy < r * r;
          inside = in_disk && std::fmod(std::abs(dx + 2.0 * r), r * 0.7) < r * 0.35;
          break;
        }
        default: break;
      }
      if (inside)
        for (int64_t c = 0; c < 3; ++c) img[size_t((y * s + x) * 3 + c)] = color[c];
    }
}

}  // namespace

void generate_synthetic(const std::string& out_packed, const std::string& out_manifest,
                        int64_t classes, int64_t train_per_class, int64_t val_per_class,
                        int64_t size, uint64_t seed) {
  if (classes < 2) fail(ErrorKind::input, "generate_synthetic: need at least 2 classes");
  Rng root(seed);
  std::vector<Record> records;
  Manifest m;
  auto make_image = [&](int64_t cls, uint64_t split_tag, int64_t index) {
    Rng rng = root.fork(split_tag, uint64_t(cls), uint64_t(index));
    std::vector<float> img(size_t(size * size * 3));
    paint_background(img, size, rng);

    const int shape = int(cls % kNumShapes);
    const int64_t family = cls / kNumShapes;
    float color[3];
    // color family = dominant channel with jitter; secondary channels low
    for (int c = 0; c < 3; ++c) color[c] = float(rng.uniform(0.05, 0.35));
    color[family % 3] = float(rng.uniform(0.65, 0.95));
    const double cx = rng.uniform(0.32, 0.68) * double(size);
    const double cy = rng.uniform(0.32, 0.68) * double(size);
    const double r = rng.uniform(0.16, 0.30) * double(size);
    const double angle = rng.uniform(-0.35, 0.35);
    paint_shape(img, size, shape, color, cx, cy, r, angle);

    // distractor: one grey shape that never carries class information
    {
      float grey[3];
      const float g = float(rng.uniform(0.2, 0.8));
      grey[0] = grey[1] = grey[2] = g;
      const int dshape = int(rng.next_below(kNumShapes));
      const double dcx = rng.uniform(0.1, 0.9) * double(size);
      const double dcy = rng.uniform(0.1, 0.9) * double(size);
      const double dr = rng.uniform(0.05, 0.12) * double(size);
      paint_shape(img, size, dshape, grey, dcx, dcy, dr, rng.uniform(-0.5, 0.5));
    }
    for (size_t i = 0; i < img.size(); ++i) img[i] += float(rng.normal() * 0.05);

    Record rec;
    rec.label = uint16_t(cls);
    rec.pixels.resize(img.size());
    for (size_t i = 0; i < img.size(); ++i)
      rec.pixels[i] = uint8_t(std::lround(std::clamp(double(img[i]) * 255.0, 0.0, 255.0)));
    return rec;
  };

  for (int64_t i = 0; i < train_per_class; ++i)
    for (int64_t cls = 0; cls < classes; ++cls) records.push_back(make_image(cls, 0x747261696eull, i));
  const int64_t n_train = int64_t(records.size());
  for (int64_t i = 0; i < val_per_class; ++i)
    for (int64_t cls = 0; cls < classes; ++cls) records.push_back(make_image(cls, 0x76616cull, i));

  for (int64_t c = 0; c < classes; ++c) {
    m.class_names.push_back("class" + std::to_string(c));
    m.class_counts.push_back(train_per_class + val_per_class);
  }
  m.train_offset = 0;
  m.train_count = n_train;
  m.val_offset = n_train;
  m.val_count = int64_t(records.size()) - n_train;
  m.source = "synthetic:seed=" + std::to_string(seed);
  write_packed(out_packed, size, size, records);
  m.save(out_manifest);
}

}  // namespace armamba::dataio
