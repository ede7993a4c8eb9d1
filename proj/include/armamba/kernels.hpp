#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace armamba::kernels {

// C[M,P] = (accum ? C : 0) + A[M,K] * B[K,P], row-major, blocked and
// thread-parallel over row blocks. Summation order over k is fixed, so the
// result is identical for any worker count.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t p, bool accum = false);

// C[K,P] = (accum ? C : 0) + A^T * B with A [M,K], B [M,P]: the weight-grad
// contraction, computed as rank-1 updates so A never needs transposing.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t p, bool accum = false);

// out[P,M] = in[M,P]
template <typename T>
void transpose(const T* in, T* out, int64_t m, int64_t p);

// exp with a vectorizable polynomial for f32; f64 stays on std::exp so the
// double path keeps full precision for the finite-difference oracles.
// Branch-free (clamp + bit_cast) so the compiler can vectorize loops over it.
inline float fast_exp(float x) {
  // Cephes-style expf: 2^k * exp(r), |r| <= 0.5 ln 2, degree-5 polynomial
  x = std::min(std::max(x, -87.0f), 88.0f);
  const float z = x * 1.44269504088896341f;  // x / ln2
  const float k = std::floor(z + 0.5f);
  float r = x - k * 0.693359375f;  // ln2 split in two for accuracy
  r -= k * -2.12194440e-4f;
  const float r2 = r * r;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r2 + r + 1.0f;
  const float pow2k = std::bit_cast<float>((int32_t(k) + 127) << 23);
  return p * pow2k;
}

inline double fast_exp(double x) { return std::exp(x); }

template <typename T>
inline T stable_softplus(T x) {
  if (x > T(30)) return x;
  if (x < T(-30)) return fast_exp(x);
  return std::log1p(fast_exp(x));
}

template <typename T>
inline T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + fast_exp(-x)) : [](T e) { return e / (T(1) + e); }(fast_exp(x));
}

}  // namespace armamba::kernels
