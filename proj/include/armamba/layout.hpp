#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "armamba/rng.hpp"
#include "armamba/tensor.hpp"

namespace armamba::layout {

enum class OrderKind { row_forward, row_backward, col_forward, col_backward, random };

const char* order_name(OrderKind k);
OrderKind order_from_name(const std::string& name);  // "row-forward" etc.

// Geometry of the image -> token mapping: p x p patches grouped into s x s
// clusters, clusters visited in `perm` order, patches row-major inside each
// cluster. perm[i] is the cluster visited at sequence slot i.
struct ClusterLayout {
  int64_t image_h = 0, image_w = 0;
  int64_t patch = 0, cluster = 0;
  OrderKind order = OrderKind::row_forward;
  uint64_t seed = 0;  // used by random order only
  std::vector<int64_t> perm;

  int64_t grid_h() const { return image_h / cluster; }
  int64_t grid_w() const { return image_w / cluster; }
  int64_t num_clusters() const { return grid_h() * grid_w(); }
  int64_t patches_per_cluster() const { return (cluster / patch) * (cluster / patch); }
  int64_t num_patches() const { return (image_h / patch) * (image_w / patch); }
  int64_t patch_dim() const { return patch * patch * 3; }

  // token slot -> global patch index (row-major over the patch grid)
  std::vector<int64_t> token_to_patch() const;
};

ClusterLayout make_layout(int64_t h, int64_t w, int64_t p, int64_t s, OrderKind order,
                          uint64_t seed = 0);

std::vector<int64_t> order_permutation(int64_t grid_h, int64_t grid_w, OrderKind order,
                                       uint64_t seed = 0);

// [H,W,3] f32 image -> [L, p*p*3] tokens in layout order. u8 images are
// scaled to [0,1] by the loader before this point.
Tensor patchify(const Tensor& img, const ClusterLayout& layout);
Tensor unpatchify(const Tensor& tokens, const ClusterLayout& layout);

}  // namespace armamba::layout
