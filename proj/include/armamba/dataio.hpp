#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "armamba/rng.hpp"
#include "armamba/tensor.hpp"

namespace armamba::dataio {

// Packed dataset: "ARMD", u16 version, u32 count, u16 H, u16 W, u8 C(=3),
// then count records of (u16 LE label, H*W*3 u8 RGB row-major). The whole
// file is held in memory; record access is O(1) pointer math and safe from
// any number of reader threads.
class PackedDataset {
 public:
  static PackedDataset read(const std::string& path);

  int64_t count() const { return count_; }
  int64_t height() const { return height_; }
  int64_t width() const { return width_; }
  int64_t channels() const { return channels_; }

  uint16_t label(int64_t index) const;
  const uint8_t* image(int64_t index) const;  // H*W*3 row-major
  Tensor image_f32(int64_t index) const;      // [H,W,3] scaled to [0,1]

 private:
  int64_t count_ = 0, height_ = 0, width_ = 0, channels_ = 0;
  size_t record_size_ = 0, header_size_ = 0;
  std::vector<uint8_t> bytes_;
};

struct Record {
  uint16_t label;
  std::vector<uint8_t> pixels;  // H*W*3
};

void write_packed(const std::string& path, int64_t h, int64_t w,
                  const std::vector<Record>& records);

// JSON sidecar: class names, per-class counts, disjoint train/val index
// ranges (records are stored train-first), free-form source note.
struct Manifest {
  std::vector<std::string> class_names;
  std::vector<int64_t> class_counts;
  int64_t train_offset = 0, train_count = 0;
  int64_t val_offset = 0, val_count = 0;
  std::string source;

  void save(const std::string& path) const;
  static Manifest load(const std::string& path);
  void validate(const PackedDataset& ds) const;
};

struct PpmImage {
  int64_t width = 0, height = 0;
  std::vector<uint8_t> pixels;  // RGB8, rescaled if maxval != 255
};

PpmImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const PpmImage& img);

// Directory of per-class subdirectories of binary PPM (P6) images ->
// packed file + manifest. Deterministic: classes and files in sorted order;
// images are resized (shorter side) and center-cropped to target dims.
void ingest_ppm_dir(const std::string& dir, const std::string& out_packed,
                    const std::string& out_manifest, int64_t target_h, int64_t target_w,
                    double val_fraction = 0.0);

// Procedural shapes-over-clutter dataset: class = shape type x color family
// with position/scale jitter and textured backgrounds. Reproducible from the
// seed; labels exactly balanced.
void generate_synthetic(const std::string& out_packed, const std::string& out_manifest,
                        int64_t classes, int64_t train_per_class, int64_t val_per_class,
                        int64_t size, uint64_t seed);

}  // namespace armamba::dataio
