#include "armamba/kernels.hpp"

#include <algorithm>
#include <cstring>

#include "armamba/threadpool.hpp"

namespace armamba::kernels {

namespace {

// Register-blocked inner tile: MR rows of C stay in an on-stack accumulator
// across the whole k sweep of one (row-tile, col-tile) pair.
constexpr int64_t MR = 4;
constexpr int64_t NB = 128;  // column tile, fits L1 alongside one B row slice

template <typename T>
void gemm_tile(const T* a, const T* b, T* c, int64_t i0, int64_t i1, int64_t k_dim, int64_t p,
               bool accum) {
  alignas(64) T acc[MR][NB];
  for (int64_t j0 = 0; j0 < p; j0 += NB) {
    const int64_t jn = std::min(NB, p - j0);
    for (int64_t i = i0; i < i1; i += MR) {
      const int64_t mr = std::min(MR, i1 - i);
      for (int64_t r = 0; r < mr; ++r) {
        if (accum)
          std::memcpy(acc[r], c + (i + r) * p + j0, size_t(jn) * sizeof(T));
        else
          std::memset(acc[r], 0, size_t(jn) * sizeof(T));
      }
      if (mr == MR) {
        for (int64_t k = 0; k < k_dim; ++k) {
          const T* __restrict brow = b + k * p + j0;
          const T a0 = a[(i + 0) * k_dim + k];
          const T a1 = a[(i + 1) * k_dim + k];
          const T a2 = a[(i + 2) * k_dim + k];
          const T a3 = a[(i + 3) * k_dim + k];
          for (int64_t j = 0; j < jn; ++j) {
            const T bv = brow[j];
            acc[0][j] = std::fma(a0, bv, acc[0][j]);
            acc[1][j] = std::fma(a1, bv, acc[1][j]);
            acc[2][j] = std::fma(a2, bv, acc[2][j]);
            acc[3][j] = std::fma(a3, bv, acc[3][j]);
          }
        }
      } else {
        for (int64_t k = 0; k < k_dim; ++k) {
          const T* __restrict brow = b + k * p + j0;
          for (int64_t r = 0; r < mr; ++r) {
            const T av = a[(i + r) * k_dim + k];
            for (int64_t j = 0; j < jn; ++j) acc[r][j] = std::fma(av, brow[j], acc[r][j]);
          }
        }
      }
      for (int64_t r = 0; r < mr; ++r)
        std::memcpy(c + (i + r) * p + j0, acc[r], size_t(jn) * sizeof(T));
    }
  }
}

}  // namespace

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t p, bool accum) {
  if (m <= 0 || p <= 0) return;
  if (k == 0) {
    if (!accum)
      for (int64_t i = 0; i < m * p; ++i) c[i] = T(0);
    return;
  }
  const int64_t row_blocks = (m + MR - 1) / MR;
  ThreadPool::instance().parallel_for(row_blocks, [&](int64_t b0, int64_t b1) {
    gemm_tile(a, b, c, b0 * MR, std::min(b1 * MR, m), k, p, accum);
  });
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t p, bool accum) {
  if (k <= 0 || p <= 0) return;
  if (!accum)
    for (int64_t i = 0; i < k * p; ++i) c[i] = T(0);
  // parallel over rows of C; every row sums its m contributions in order.
  // k is tiled so the active C rows stay in L1 across the m sweep.
  constexpr int64_t KB = 16;
  ThreadPool::instance().parallel_for(k, [&](int64_t k0, int64_t k1) {
    for (int64_t kb = k0; kb < k1; kb += KB) {
      const int64_t ke = std::min(kb + KB, k1);
      for (int64_t mi = 0; mi < m; ++mi) {
        const T* __restrict brow = b + mi * p;
        const T* __restrict arow = a + mi * k;
        for (int64_t ki = kb; ki < ke; ++ki) {
          const T av = arow[ki];
          T* __restrict crow = c + ki * p;
          for (int64_t j = 0; j < p; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
        }
      }
    }
  });
}

template <typename T>
void transpose(const T* in, T* out, int64_t m, int64_t p) {
  constexpr int64_t TB = 32;
  for (int64_t i0 = 0; i0 < m; i0 += TB)
    for (int64_t j0 = 0; j0 < p; j0 += TB) {
      const int64_t i1 = std::min(i0 + TB, m), j1 = std::min(j0 + TB, p);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) out[j * m + i] = in[i * p + j];
    }
}

template void gemm_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t, bool);
template void gemm_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
template void gemm_tn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t, bool);
template void gemm_tn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
template void transpose<float>(const float*, float*, int64_t, int64_t);
template void transpose<double>(const double*, double*, int64_t, int64_t);

}  // namespace armamba::kernels
