#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "armamba/tensor.hpp"

namespace armamba::ssm {

enum class ScanMode { sequential, parallel };
enum class ScanDirection { forward, backward };
enum class Discretization { zoh_exact, euler };

// Selective-scan parameter bundle for one scan direction. The state matrix is
// stored as a_log with A = -exp(a_log), so A stays strictly negative; the
// step size is dt = softplus(low-rank projection + bias), strictly positive.
struct SsmScanParams {
  Tensor a_log;                        // [D,N]
  Tensor w_dt_down, w_dt_up, dt_bias;  // [D,r], [r,D], [D]
  Tensor w_b, w_c;                     // [D,N] each
  Tensor conv_w, conv_b;               // [D,k], [D]
  Tensor w_in, b_in;                   // [D,D], [D]
  Tensor w_gate, b_gate;               // [D,D], [D]
  Tensor w_out, b_out;                 // [D,D], [D]
  int64_t state_dim = 0;
  int64_t conv_k = 0;
};

SsmScanParams init_ssm_params(int64_t d, int64_t n, int64_t conv_k, Rng& rng,
                              DType dtype = DType::f32);

// Threshold below which |dt*a| switches to the series evaluation of
// (exp(z)-1)/a. Mutable only for the self-check fault-injection hook.
double& zoh_series_threshold();

// ZOH: a_bar = exp(dt*a), b_bar = ((exp(dt*a)-1)/a) * b, with the series
// branch dt*(1 + z/2 + z^2/6)*b once |z| < threshold. euler keeps a_bar and
// simplifies b_bar to dt*b.
// a: [D,N] (finite, expected negative), dt: [B,L,D] (> 0), b: [B,L,N].
// Returns (a_bar, b_bar), both [B,L,D,N].
std::pair<Tensor, Tensor> zoh_discretize(const Tensor& a, const Tensor& dt, const Tensor& b,
                                         Discretization disc = Discretization::zoh_exact);

// h_t = a_bar_t (.) h_{t-1} + b_bar_t (.) x_t,  y_t[d] = sum_n c_t[n] h_t[d,n],
// h_0 = 0, state never crossing sequence boundaries.
// scan_recurrent is the exact sequential evaluation; scan_parallel runs the
// two-pass chunked form (sequential inside chunks of `chunk`, first-order
// scan across chunk carries) and is worker-count invariant.
Tensor scan_recurrent(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& x);
Tensor scan_parallel(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& x,
                     int64_t chunk = 64);

// LTI-only path: time-invariant a_bar/b_bar [D,N] and c [N]. Builds the
// length-L convolution kernel (c*b_bar, c*a_bar*b_bar, ...) per channel and
// applies it causally. Forward only.
Tensor lti_kernel_apply(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c,
                        const Tensor& x);

// zoh_discretize + scan in one tape node: identical arithmetic to the
// composed ops (bit-for-bit in the forward) without materializing the
// [B,L,D,N] a_bar/b_bar tensors. This is the mixer's training path; the
// separate ops above remain the reference/self-check surface.
// a: [D,N], dt: [B,L,D], b/c: [B,L,N], x: [B,L,D].
Tensor zoh_scan_fused(const Tensor& a, const Tensor& dt, const Tensor& b, const Tensor& c,
                      const Tensor& x, int64_t chunk = 64,
                      Discretization disc = Discretization::zoh_exact);

struct MixerOptions {
  ScanMode mode = ScanMode::parallel;
  int64_t chunk = 64;
  Discretization disc = Discretization::zoh_exact;
};

// Full token mixer: in-projection -> causal depthwise conv + SiLU ->
// input-dependent dt/B/C -> discretize -> scan -> SiLU gate -> out-projection.
// backward direction reverses the sequence, scans forward, reverses back.
Tensor mamba_mixer_forward(const Tensor& x, const SsmScanParams& params,
                           ScanDirection direction = ScanDirection::forward,
                           const MixerOptions& opt = {});

// Same mixer over an arbitrary token order (order[i] = source position of
// sequence slot i); output is returned in the original order.
Tensor mamba_mixer_forward_ordered(const Tensor& x, const SsmScanParams& params,
                                   const std::vector<int64_t>& order, const MixerOptions& opt = {});

}  // namespace armamba::ssm
