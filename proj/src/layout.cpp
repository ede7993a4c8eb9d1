#include "armamba/layout.hpp"

#include <numeric>

namespace armamba::layout {

const char* order_name(OrderKind k) {
  switch (k) {
    case OrderKind::row_forward: return "row-forward";
    case OrderKind::row_backward: return "row-backward";
    case OrderKind::col_forward: return "col-forward";
    case OrderKind::col_backward: return "col-backward";
    case OrderKind::random: return "random";
  }
  return "?";
}

OrderKind order_from_name(const std::string& name) {
  std::string s;
  for (char c : name) s += c == '_' ? '-' : c;
  if (s == "row-forward") return OrderKind::row_forward;
  if (s == "row-backward") return OrderKind::row_backward;
  if (s == "col-forward") return OrderKind::col_forward;
  if (s == "col-backward") return OrderKind::col_backward;
  if (s == "random") return OrderKind::random;
  fail(ErrorKind::config, "unknown order '" + name +
                              "' (expected row-forward, row-backward, col-forward, col-backward, random)");
}

std::vector<int64_t> order_permutation(int64_t grid_h, int64_t grid_w, OrderKind order,
                                       uint64_t seed) {
  std::vector<int64_t> perm;
  perm.reserve(size_t(grid_h * grid_w));
  switch (order) {
    case OrderKind::row_forward:
      for (int64_t r = 0; r < grid_h; ++r)
        for (int64_t c = 0; c < grid_w; ++c) perm.push_back(r * grid_w + c);
      break;
    case OrderKind::row_backward:
      // rows top to bottom, clusters last-to-first inside each row
      for (int64_t r = 0; r < grid_h; ++r)
        for (int64_t c = grid_w - 1; c >= 0; --c) perm.push_back(r * grid_w + c);
      break;
    case OrderKind::col_forward:
      for (int64_t c = 0; c < grid_w; ++c)
        for (int64_t r = 0; r < grid_h; ++r) perm.push_back(r * grid_w + c);
      break;
    case OrderKind::col_backward:
      for (int64_t c = 0; c < grid_w; ++c)
        for (int64_t r = grid_h - 1; r >= 0; --r) perm.push_back(r * grid_w + c);
      break;
    case OrderKind::random: {
      perm.resize(size_t(grid_h * grid_w));
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng = Rng(seed).fork(0x6f72646572ull);  // dedicated order stream
      rng.shuffle(perm);
      break;
    }
  }
  return perm;
}

ClusterLayout make_layout(int64_t h, int64_t w, int64_t p, int64_t s, OrderKind order,
                          uint64_t seed) {
  if (p < 1 || s < 1 || h < 1 || w < 1) fail(ErrorKind::config, "make_layout: dims must be positive");
  if (s % p != 0)
    fail(ErrorKind::config, "make_layout: cluster " + std::to_string(s) +
                                " not divisible by patch " + std::to_string(p));
  if (h % s != 0)
    fail(ErrorKind::config, "make_layout: image height " + std::to_string(h) +
                                " not divisible by cluster " + std::to_string(s));
  if (w % s != 0)
    fail(ErrorKind::config, "make_layout: image width " + std::to_string(w) +
                                " not divisible by cluster " + std::to_string(s));
  ClusterLayout lay;
  lay.image_h = h;
  lay.image_w = w;
  lay.patch = p;
  lay.cluster = s;
  lay.order = order;
  lay.seed = seed;
  lay.perm = order_permutation(lay.grid_h(), lay.grid_w(), order, seed);
  return lay;
}

std::vector<int64_t> ClusterLayout::token_to_patch() const {
  const int64_t cp = cluster / patch;               // patches per cluster side
  const int64_t pw = image_w / patch;               // patch grid width
  std::vector<int64_t> map;
  map.reserve(size_t(num_patches()));
  for (int64_t ci : perm) {
    const int64_t cr = ci / grid_w(), cc = ci % grid_w();
    for (int64_t pr = 0; pr < cp; ++pr)
      for (int64_t pc = 0; pc < cp; ++pc)
        map.push_back((cr * cp + pr) * pw + (cc * cp + pc));
  }
  return map;
}

Tensor patchify(const Tensor& img, const ClusterLayout& lay) {
  if (img.rank() != 3 || img.dim(0) != lay.image_h || img.dim(1) != lay.image_w || img.dim(2) != 3)
    fail(ErrorKind::input, "patchify: image dims " + shape_str(img.shape()) +
                               " do not match layout " + std::to_string(lay.image_h) + "x" +
                               std::to_string(lay.image_w) + "x3");
  const int64_t p = lay.patch, pw = lay.image_w / p;
  const auto map = lay.token_to_patch();
  Tensor tokens = Tensor::empty({int64_t(map.size()), lay.patch_dim()}, img.dtype());
  auto run = [&]<typename T>() {
    const T* src = img.data<T>().data();
    T* dst = tokens.data<T>().data();
    for (size_t t = 0; t < map.size(); ++t) {
      const int64_t g = map[t];
      const int64_t r0 = (g / pw) * p, c0 = (g % pw) * p;
      T* out = dst + int64_t(t) * lay.patch_dim();
      for (int64_t r = 0; r < p; ++r)
        for (int64_t c = 0; c < p; ++c)
          for (int64_t ch = 0; ch < 3; ++ch)
            *out++ = src[((r0 + r) * lay.image_w + (c0 + c)) * 3 + ch];
    }
  };
  img.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return tokens;
}

Tensor unpatchify(const Tensor& tokens, const ClusterLayout& lay) {
  if (tokens.rank() != 2 || tokens.dim(0) != lay.num_patches() || tokens.dim(1) != lay.patch_dim())
    fail(ErrorKind::input, "unpatchify: token shape " + shape_str(tokens.shape()) +
                               " does not match layout (L=" + std::to_string(lay.num_patches()) +
                               ", dim=" + std::to_string(lay.patch_dim()) + ")");
  const int64_t p = lay.patch, pw = lay.image_w / p;
  const auto map = lay.token_to_patch();
  Tensor img = Tensor::empty({lay.image_h, lay.image_w, 3}, tokens.dtype());
  auto run = [&]<typename T>() {
    const T* src = tokens.data<T>().data();
    T* dst = img.data<T>().data();
    for (size_t t = 0; t < map.size(); ++t) {
      const int64_t g = map[t];
      const int64_t r0 = (g / pw) * p, c0 = (g % pw) * p;
      const T* in = src + int64_t(t) * lay.patch_dim();
      for (int64_t r = 0; r < p; ++r)
        for (int64_t c = 0; c < p; ++c)
          for (int64_t ch = 0; ch < 3; ++ch)
            dst[((r0 + r) * lay.image_w + (c0 + c)) * 3 + ch] = *in++;
    }
  };
  tokens.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return img;
}

}  // namespace armamba::layout
