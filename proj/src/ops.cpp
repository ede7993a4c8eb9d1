#include "armamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "armamba/kernels.hpp"
#include "armamba/threadpool.hpp"

namespace armamba::ops {

namespace {

// strides of `shape` aligned to an output of rank `out_rank`; broadcast dims
// (missing or extent 1) get stride 0
std::vector<int64_t> bcast_strides(const Shape& shape, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  int64_t stride = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    size_t si = shape.size() - 1 - i, oi = out.size() - 1 - i;
    st[oi] = (shape[si] == 1 && out[oi] != 1) ? 0 : stride;
    stride *= shape[si];
  }
  return st;
}

// true when `shape` is a trailing suffix of `out` (the bias-add pattern);
// the operand then repeats with period numel(shape)
bool is_suffix_shape(const Shape& shape, const Shape& out) {
  if (shape.size() > out.size()) return false;
  for (size_t i = 0; i < shape.size(); ++i)
    if (shape[shape.size() - 1 - i] != out[out.size() - 1 - i]) return false;
  return true;
}

// dispatch an elementwise binary op with broadcasting
template <typename T, typename F>
void ew_binary_kernel(const Tensor& a, const Tensor& b, Tensor& out, F f) {
  const T* pa = a.data<T>().data();
  const T* pb = b.data<T>().data();
  T* po = out.data<T>().data();
  const int64_t n = out.numel();
  if (a.shape() == out.shape() && b.shape() == out.shape()) {
    ThreadPool::instance().parallel_for(n, [&](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) po[i] = f(pa[i], pb[i]);
    });
    return;
  }
  if (a.shape() == out.shape() && is_suffix_shape(b.shape(), out.shape())) {
    const int64_t period = b.numel();
    ThreadPool::instance().parallel_for(n / period, [&](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        const T* ar = pa + r * period;
        T* or_ = po + r * period;
        for (int64_t i = 0; i < period; ++i) or_[i] = f(ar[i], pb[i]);
      }
    });
    return;
  }
  if (b.shape() == out.shape() && is_suffix_shape(a.shape(), out.shape())) {
    const int64_t period = a.numel();
    ThreadPool::instance().parallel_for(n / period, [&](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        const T* br = pb + r * period;
        T* or_ = po + r * period;
        for (int64_t i = 0; i < period; ++i) or_[i] = f(pa[i], br[i]);
      }
    });
    return;
  }
  const auto sa = bcast_strides(a.shape(), out.shape());
  const auto sb = bcast_strides(b.shape(), out.shape());
  const auto& os = out.shape();
  const size_t rank = os.size();
  ThreadPool::instance().parallel_for(n, [&](int64_t i0, int64_t i1) {
    std::vector<int64_t> idx(rank, 0);
    for (int64_t i = i0; i < i1; ++i) {
      int64_t rem = i, ia = 0, ib = 0;
      for (size_t d = rank; d-- > 0;) {
        idx[d] = rem % os[d];
        rem /= os[d];
        ia += idx[d] * sa[d];
        ib += idx[d] * sb[d];
      }
      po[i] = f(pa[ia], pb[ib]);
    }
  });
}

// sum `g` (shaped like out) into the grad buffer of `t` respecting broadcast
template <typename T>
void reduce_into_grad(TensorImpl& t, const T* g, const Shape& out_shape, double sign = 1.0,
                      const T* factor = nullptr, const Shape* factor_shape = nullptr) {
  t.ensure_grad();
  T* tg = t.grad->as<T>();
  const T s = T(sign);
  int64_t n = 1;
  for (auto d : out_shape) n *= d;

  const bool t_full = t.shape == out_shape;
  const bool t_suffix = is_suffix_shape(t.shape, out_shape);
  const bool f_full = factor && *factor_shape == out_shape;
  const bool f_suffix = factor && is_suffix_shape(*factor_shape, out_shape);

  if (t_full && (!factor || f_full || f_suffix)) {
    // destination covers the output: disjoint writes, safe to thread
    const int64_t period = f_suffix && !f_full ? [&] {
      int64_t p = 1;
      for (auto d : *factor_shape) p *= d;
      return p;
    }() : 0;
    ThreadPool::instance().parallel_for(n, [&](int64_t i0, int64_t i1) {
      if (!factor) {
        for (int64_t i = i0; i < i1; ++i) tg[i] += s * g[i];
      } else if (f_full) {
        for (int64_t i = i0; i < i1; ++i) tg[i] += s * g[i] * factor[i];
      } else {
        for (int64_t i = i0; i < i1; ++i) tg[i] += s * g[i] * factor[i % period];
      }
    });
    return;
  }
  if (t_suffix && (!factor || f_full || f_suffix)) {
    // sequential outer accumulation keeps the summation order fixed
    const int64_t period = t.numel();
    int64_t f_period = 0;
    if (f_suffix && !f_full) {
      f_period = 1;
      for (auto d : *factor_shape) f_period *= d;
    }
    for (int64_t r = 0; r < n / period; ++r) {
      const T* gr = g + r * period;
      if (!factor) {
        for (int64_t i = 0; i < period; ++i) tg[i] += s * gr[i];
      } else if (f_full) {
        const T* fr = factor + r * period;
        for (int64_t i = 0; i < period; ++i) tg[i] += s * gr[i] * fr[i];
      } else {
        for (int64_t i = 0; i < period; ++i)
          tg[i] += s * gr[i] * factor[(r * period + i) % f_period];
      }
    }
    return;
  }

  const auto st = bcast_strides(t.shape, out_shape);
  const auto sf = factor ? bcast_strides(*factor_shape, out_shape) : std::vector<int64_t>{};
  const size_t rank = out_shape.size();
  // sequential: broadcast reduction must have a fixed summation order
  for (int64_t i = 0; i < n; ++i) {
    int64_t rem = i, it = 0, ifa = 0;
    for (size_t d = rank; d-- > 0;) {
      int64_t id = rem % out_shape[d];
      rem /= out_shape[d];
      it += id * st[d];
      if (factor) ifa += id * sf[d];
    }
    tg[it] += s * (factor ? g[i] * factor[ifa] : g[i]);
  }
}

template <typename T>
void add_into_grad_same_shape(TensorImpl& t, const T* g) {
  t.ensure_grad();
  T* tg = t.grad->as<T>();
  const int64_t n = t.numel();
  ThreadPool::instance().parallel_for(n, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) tg[i] += g[i];
  });
}

enum class BinKind { add, sub, mul };

Tensor ew_binary(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
  check_same_dtype(a, b, name);
  Shape out_shape = broadcast_shapes(a.shape(), b.shape(), name);
  Tensor av = a, bv = b;
  Tensor out = make_op_result(out_shape, a.dtype(), {a, b}, [av, bv, kind](TensorImpl& self) {
    auto run = [&]<typename T>() {
      const T* g = self.grad->as<T>();
      const T* pa = av.data<T>().data();
      const T* pb = bv.data<T>().data();
      TensorImpl& ia = *av.impl();
      TensorImpl& ib = *bv.impl();
      switch (kind) {
        case BinKind::add:
          if (ia.requires_grad) {
            if (ia.shape == self.shape) add_into_grad_same_shape<T>(ia, g);
            else reduce_into_grad<T>(ia, g, self.shape);
          }
          if (ib.requires_grad) {
            if (ib.shape == self.shape) add_into_grad_same_shape<T>(ib, g);
            else reduce_into_grad<T>(ib, g, self.shape);
          }
          break;
        case BinKind::sub:
          if (ia.requires_grad) reduce_into_grad<T>(ia, g, self.shape);
          if (ib.requires_grad) reduce_into_grad<T>(ib, g, self.shape, -1.0);
          break;
        case BinKind::mul:
          if (ia.requires_grad) reduce_into_grad<T>(ia, g, self.shape, 1.0, pb, &ib.shape);
          if (ib.requires_grad) reduce_into_grad<T>(ib, g, self.shape, 1.0, pa, &ia.shape);
          break;
      }
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  auto run = [&]<typename T>() {
    switch (kind) {
      case BinKind::add: ew_binary_kernel<T>(a, b, out, [](T x, T y) { return x + y; }); break;
      case BinKind::sub: ew_binary_kernel<T>(a, b, out, [](T x, T y) { return x - y; }); break;
      case BinKind::mul: ew_binary_kernel<T>(a, b, out, [](T x, T y) { return x * y; }); break;
    }
  };
  a.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

enum class UnKind { neg, exp, softplus, silu, scale, add_scalar };

Tensor ew_unary(const Tensor& a, UnKind kind, double s, const char* /*name*/) {
  Tensor av = a;
  Tensor out = make_op_result(a.shape(), a.dtype(), {a}, [av, kind, s](TensorImpl& self) {
    TensorImpl& ia = *av.impl();
    if (!ia.requires_grad) return;
    auto run = [&]<typename T>() {
      const T* g = self.grad->as<T>();
      const T* x = av.data<T>().data();
      const T* y = self.storage->as<T>();
      ia.ensure_grad();
      T* dx = ia.grad->as<T>();
      const int64_t n = ia.numel();
      ThreadPool::instance().parallel_for(n, [&](int64_t i0, int64_t i1) {
        switch (kind) {
          case UnKind::neg:
            for (int64_t i = i0; i < i1; ++i) dx[i] -= g[i];
            break;
          case UnKind::exp:
            for (int64_t i = i0; i < i1; ++i) dx[i] += g[i] * y[i];
            break;
          case UnKind::softplus:
            for (int64_t i = i0; i < i1; ++i) dx[i] += g[i] * kernels::sigmoid(x[i]);
            break;
          case UnKind::silu:
            for (int64_t i = i0; i < i1; ++i) {
              const T sg = kernels::sigmoid(x[i]);
              dx[i] += g[i] * sg * (T(1) + x[i] * (T(1) - sg));
            }
            break;
          case UnKind::scale:
            for (int64_t i = i0; i < i1; ++i) dx[i] += g[i] * T(s);
            break;
          case UnKind::add_scalar:
            for (int64_t i = i0; i < i1; ++i) dx[i] += g[i];
            break;
        }
      });
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  auto run = [&]<typename T>() {
    const T* x = a.data<T>().data();
    T* y = out.data<T>().data();
    const int64_t n = a.numel();
    ThreadPool::instance().parallel_for(n, [&](int64_t i0, int64_t i1) {
      switch (kind) {
        case UnKind::neg:
          for (int64_t i = i0; i < i1; ++i) y[i] = -x[i];
          break;
        case UnKind::exp:
          for (int64_t i = i0; i < i1; ++i) y[i] = kernels::fast_exp(x[i]);
          break;
        case UnKind::softplus:
          for (int64_t i = i0; i < i1; ++i) y[i] = kernels::stable_softplus(x[i]);
          break;
        case UnKind::silu:
          for (int64_t i = i0; i < i1; ++i) y[i] = x[i] * kernels::sigmoid(x[i]);
          break;
        case UnKind::scale:
          for (int64_t i = i0; i < i1; ++i) y[i] = x[i] * T(s);
          break;
        case UnKind::add_scalar:
          for (int64_t i = i0; i < i1; ++i) y[i] = x[i] + T(s);
          break;
      }
    });
  };
  a.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    const int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      fail(ErrorKind::dimension, std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                                     shape_str(b));
    out[rank - 1 - i] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return ew_binary(a, b, BinKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return ew_binary(a, b, BinKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return ew_binary(a, b, BinKind::mul, "mul"); }

Tensor neg(const Tensor& a) { return ew_unary(a, UnKind::neg, 0, "neg"); }
Tensor exp(const Tensor& a) { return ew_unary(a, UnKind::exp, 0, "exp"); }
Tensor softplus(const Tensor& a) { return ew_unary(a, UnKind::softplus, 0, "softplus"); }
Tensor silu(const Tensor& a) { return ew_unary(a, UnKind::silu, 0, "silu"); }
Tensor scale(const Tensor& a, double s) { return ew_unary(a, UnKind::scale, s, "scale"); }
Tensor add_scalar(const Tensor& a, double s) { return ew_unary(a, UnKind::add_scalar, s, "add_scalar"); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "matmul");
  if (a.rank() < 2 || b.rank() < 2) fail(ErrorKind::dimension, "matmul: operands must have rank >= 2");
  const int64_t m = a.shape()[a.rank() - 2], k = a.shape()[a.rank() - 1];
  const int64_t kb = b.shape()[b.rank() - 2], p = b.shape()[b.rank() - 1];
  if (k != kb)
    fail(ErrorKind::dimension,
         "matmul: inner dims disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch = broadcast_shapes(batch_a, batch_b, "matmul");
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(p);

  Tensor av = a, bv = b;
  Tensor out = make_op_result(out_shape, a.dtype(), {a, b}, [av, bv, m, k, p](TensorImpl& self) {
    auto run = [&]<typename T>() {
      TensorImpl& ia = *av.impl();
      TensorImpl& ib = *bv.impl();
      const T* g = self.grad->as<T>();
      const T* pa = av.data<T>().data();
      const T* pb = bv.data<T>().data();
      const int64_t batch_n = self.numel() / (m * p);
      const int64_t a_batch = ia.numel() / (m * k);
      const int64_t b_batch = ib.numel() / (k * p);
      std::vector<T> scratch(size_t(std::max(m * k, k * p)));
      if (ia.requires_grad) {
        ia.ensure_grad();
        T* da = ia.grad->as<T>();
        // dA = dY * B^T per batch; broadcast batches accumulate sequentially
        std::vector<T> bt(size_t(k) * size_t(p));
        if (b_batch == 1) kernels::transpose(pb, bt.data(), k, p);
        if (b_batch == 1 && a_batch == batch_n) {
          // flattened: [batch*m, p] x [p, k]
          kernels::gemm_nn(g, bt.data(), da, batch_n * m, p, k, true);
        } else {
          for (int64_t n = 0; n < batch_n; ++n) {
            if (b_batch != 1) kernels::transpose(pb + (n % b_batch) * k * p, bt.data(), k, p);
            if (a_batch == batch_n) {
              kernels::gemm_nn(g + n * m * p, bt.data(), da + n * m * k, m, p, k, true);
            } else {
              kernels::gemm_nn(g + n * m * p, bt.data(), scratch.data(), m, p, k, false);
              T* dst = da + (n % a_batch) * m * k;
              for (int64_t i = 0; i < m * k; ++i) dst[i] += scratch[i];
            }
          }
        }
      }
      if (ib.requires_grad) {
        ib.ensure_grad();
        T* db = ib.grad->as<T>();
        if (b_batch == 1 && a_batch == batch_n) {
          // common case: shared weight; flatten batch into one contraction
          kernels::gemm_tn(pa, g, db, batch_n * m, k, p, true);
        } else {
          for (int64_t n = 0; n < batch_n; ++n) {
            const T* an = pa + (n % a_batch) * m * k;
            if (b_batch == batch_n) {
              kernels::gemm_tn(an, g + n * m * p, db + n * k * p, m, k, p, true);
            } else {
              kernels::gemm_tn(an, g + n * m * p, scratch.data(), m, k, p, false);
              T* dst = db + (n % b_batch) * k * p;
              for (int64_t i = 0; i < k * p; ++i) dst[i] += scratch[i];
            }
          }
        }
      }
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });

  auto run = [&]<typename T>() {
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* po = out.data<T>().data();
    const int64_t batch_n = out.numel() / (m * p);
    const int64_t a_batch = a.numel() / (m * k);
    const int64_t b_batch = b.numel() / (k * p);
    if (b_batch == 1) {
      // flatten all batches of a into one [batch*m, k] gemm
      kernels::gemm_nn(pa, pb, po, batch_n * m, k, p, false);
    } else {
      for (int64_t n = 0; n < batch_n; ++n)
        kernels::gemm_nn(pa + (n % a_batch) * m * k, pb + (n % b_batch) * k * p, po + n * m * p, m,
                         k, p, false);
    }
  };
  a.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_same_dtype(x, gamma, "layer_norm");
  check_same_dtype(x, beta, "layer_norm");
  if (x.rank() < 1 || x.shape().back() == 0) fail(ErrorKind::dimension, "layer_norm: empty last dim");
  const int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    fail(ErrorKind::dimension, "layer_norm: gamma/beta must have " + std::to_string(d) + " elements");
  if (eps <= 0) fail(ErrorKind::input, "layer_norm: eps must be positive");
  const int64_t rows = x.numel() / d;

  // saved for backward: x_hat and rstd
  Tensor xhat = Tensor::empty(x.shape(), x.dtype());
  Tensor rstd = Tensor::empty({rows}, x.dtype());

  Tensor xv = x, gv = gamma, bv = beta;
  Tensor out = make_op_result(
      x.shape(), x.dtype(), {x, gamma, beta}, [xv, gv, bv, xhat, rstd, d, rows](TensorImpl& self) {
        auto run = [&]<typename T>() {
          const T* g = self.grad->as<T>();
          const T* xh = xhat.data<T>().data();
          const T* rs = rstd.data<T>().data();
          const T* gam = gv.data<T>().data();
          TensorImpl& ix = *xv.impl();
          TensorImpl& ig = *gv.impl();
          TensorImpl& ib = *bv.impl();
          if (ix.requires_grad) {
            ix.ensure_grad();
            T* dx = ix.grad->as<T>();
            ThreadPool::instance().parallel_for(rows, [&](int64_t r0, int64_t r1) {
              for (int64_t r = r0; r < r1; ++r) {
                const T* gr = g + r * d;
                const T* xr = xh + r * d;
                T* dxr = dx + r * d;
                T s1 = 0, s2 = 0;
                for (int64_t i = 0; i < d; ++i) {
                  const T gg = gr[i] * gam[i];
                  s1 += gg;
                  s2 += gg * xr[i];
                }
                s1 /= T(d);
                s2 /= T(d);
                for (int64_t i = 0; i < d; ++i)
                  dxr[i] += rs[r] * (gr[i] * gam[i] - s1 - xr[i] * s2);
              }
            });
          }
          if (ig.requires_grad) {
            ig.ensure_grad();
            T* dg = ig.grad->as<T>();
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t i = 0; i < d; ++i) dg[i] += g[r * d + i] * xh[r * d + i];
          }
          if (ib.requires_grad) {
            ib.ensure_grad();
            T* dbt = ib.grad->as<T>();
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t i = 0; i < d; ++i) dbt[i] += g[r * d + i];
          }
        };
        self.dtype == DType::f32 ? run.template operator()<float>()
                                 : run.template operator()<double>();
      });

  auto run = [&]<typename T>() {
    const T* px = x.data<T>().data();
    const T* pg = gamma.data<T>().data();
    const T* pb = beta.data<T>().data();
    T* po = out.data<T>().data();
    T* ph = xhat.data<T>().data();
    T* pr = rstd.data<T>().data();
    ThreadPool::instance().parallel_for(rows, [&](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        const T* xr = px + r * d;
        T mean = 0;
        for (int64_t i = 0; i < d; ++i) mean += xr[i];
        mean /= T(d);
        T var = 0;
        for (int64_t i = 0; i < d; ++i) {
          const T c = xr[i] - mean;
          var += c * c;
        }
        var /= T(d);
        const T r_std = T(1) / std::sqrt(var + T(eps));
        pr[r] = r_std;
        for (int64_t i = 0; i < d; ++i) {
          const T h = (xr[i] - mean) * r_std;
          ph[r * d + i] = h;
          po[r * d + i] = h * pg[i] + pb[i];
        }
      }
    });
  };
  x.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_same_dtype(x, w, "depthwise_conv1d");
  if (x.rank() != 3 || w.rank() != 2) fail(ErrorKind::dimension, "depthwise_conv1d: expect x [B,L,D], w [D,k]");
  const int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2), k = w.dim(1);
  if (w.dim(0) != d)
    fail(ErrorKind::dimension, "depthwise_conv1d: channel mismatch, x has " + std::to_string(d) +
                                   ", w has " + std::to_string(w.dim(0)));
  if (bias.defined() && bias.numel() != d) fail(ErrorKind::dimension, "depthwise_conv1d: bias size");
  if (k < 1) fail(ErrorKind::dimension, "depthwise_conv1d: k must be >= 1");

  Tensor xv = x, wv = w, bv = bias;
  std::vector<Tensor> parents = {x, w};
  if (bias.defined()) parents.push_back(bias);
  Tensor out = make_op_result(x.shape(), x.dtype(), parents, [xv, wv, bv, b, l, d, k](TensorImpl& self) {
    auto run = [&]<typename T>() {
      const T* g = self.grad->as<T>();
      const T* px = xv.data<T>().data();
      const T* pw = wv.data<T>().data();
      TensorImpl& ix = *xv.impl();
      TensorImpl& iw = *wv.impl();
      if (ix.requires_grad) {
        ix.ensure_grad();
        T* dx = ix.grad->as<T>();
        ThreadPool::instance().parallel_for(b, [&](int64_t b0, int64_t b1) {
          for (int64_t bi = b0; bi < b1; ++bi)
            for (int64_t t = 0; t < l; ++t)
              for (int64_t j = 0; j < k; ++j) {
                const int64_t s = t - (k - 1) + j;
                if (s < 0) continue;
                const T* gr = g + (bi * l + t) * d;
                T* dxr = dx + (bi * l + s) * d;
                const T* wj = pw;  // [D,k] stride k
                for (int64_t c = 0; c < d; ++c) dxr[c] += gr[c] * wj[c * k + j];
              }
        });
      }
      if (iw.requires_grad) {
        iw.ensure_grad();
        T* dw = iw.grad->as<T>();
        ThreadPool::instance().parallel_for(d, [&](int64_t c0, int64_t c1) {
          for (int64_t c = c0; c < c1; ++c)
            for (int64_t bi = 0; bi < b; ++bi)
              for (int64_t t = 0; t < l; ++t) {
                const T gv = g[(bi * l + t) * d + c];
                for (int64_t j = 0; j < k; ++j) {
                  const int64_t s = t - (k - 1) + j;
                  if (s >= 0) dw[c * k + j] += gv * px[(bi * l + s) * d + c];
                }
              }
        });
      }
      if (bv.defined() && bv.impl()->requires_grad) {
        TensorImpl& ibb = *bv.impl();
        ibb.ensure_grad();
        T* db = ibb.grad->as<T>();
        for (int64_t bi = 0; bi < b; ++bi)
          for (int64_t t = 0; t < l; ++t)
            for (int64_t c = 0; c < d; ++c) db[c] += g[(bi * l + t) * d + c];
      }
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });

  auto run = [&]<typename T>() {
    const T* px = x.data<T>().data();
    const T* pw = w.data<T>().data();
    const T* pb = bias.defined() ? bias.data<T>().data() : nullptr;
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(b, [&](int64_t b0, int64_t b1) {
      for (int64_t bi = b0; bi < b1; ++bi)
        for (int64_t t = 0; t < l; ++t) {
          T* yr = po + (bi * l + t) * d;
          for (int64_t c = 0; c < d; ++c) yr[c] = pb ? pb[c] : T(0);
          for (int64_t j = 0; j < k; ++j) {
            const int64_t s = t - (k - 1) + j;
            if (s < 0) continue;
            const T* xr = px + (bi * l + s) * d;
            for (int64_t c = 0; c < d; ++c) yr[c] += pw[c * k + j] * xr[c];
          }
        }
    });
  };
  x.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  check_same_dtype(pred, target, "mse");
  if (pred.shape() != target.shape())
    fail(ErrorKind::dimension,
         "mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const int64_t n = pred.numel();
  Tensor pv = pred, tv = target;
  Tensor out = make_op_result({}, pred.dtype(), {pred, target}, [pv, tv, n](TensorImpl& self) {
    auto run = [&]<typename T>() {
      const T g = self.grad->as<T>()[0];
      const T* pp = pv.data<T>().data();
      const T* pt = tv.data<T>().data();
      const T c = g * T(2) / T(n);
      TensorImpl& ip = *pv.impl();
      TensorImpl& it = *tv.impl();
      if (ip.requires_grad) {
        ip.ensure_grad();
        T* dp = ip.grad->as<T>();
        ThreadPool::instance().parallel_for(n, [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) dp[i] += c * (pp[i] - pt[i]);
        });
      }
      if (it.requires_grad) {
        it.ensure_grad();
        T* dt = it.grad->as<T>();
        ThreadPool::instance().parallel_for(n, [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) dt[i] -= c * (pp[i] - pt[i]);
        });
      }
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  auto run = [&]<typename T>() {
    const T* pp = pred.data<T>().data();
    const T* pt = target.data<T>().data();
    // fixed-order accumulation in double for a stable mean
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
      const double dlt = double(pp[i]) - double(pt[i]);
      acc += dlt * dlt;
    }
    out.data<T>()[0] = T(acc / double(n));
  };
  pred.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
  if (logits.rank() != 2) fail(ErrorKind::dimension, "cross_entropy: logits must be [B,C]");
  const int64_t b = logits.dim(0), c = logits.dim(1);
  if (int64_t(labels.size()) != b) fail(ErrorKind::dimension, "cross_entropy: label count mismatch");
  for (int64_t i = 0; i < b; ++i)
    if (labels[size_t(i)] < 0 || labels[size_t(i)] >= c)
      fail(ErrorKind::input, "cross_entropy: label " + std::to_string(labels[size_t(i)]) +
                                 " out of range [0," + std::to_string(c) + ")");
  Tensor lv = logits;
  auto lab = std::make_shared<std::vector<int64_t>>(labels);
  Tensor out = make_op_result({}, logits.dtype(), {logits}, [lv, lab, b, c](TensorImpl& self) {
    TensorImpl& il = *lv.impl();
    if (!il.requires_grad) return;
    auto run = [&]<typename T>() {
      const T g = self.grad->as<T>()[0];
      const T* z = lv.data<T>().data();
      il.ensure_grad();
      T* dz = il.grad->as<T>();
      ThreadPool::instance().parallel_for(b, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
          const T* zr = z + r * c;
          T mx = zr[0];
          for (int64_t j = 1; j < c; ++j) mx = std::max(mx, zr[j]);
          T denom = 0;
          for (int64_t j = 0; j < c; ++j) denom += kernels::fast_exp(zr[j] - mx);
          const T inv = T(1) / denom;
          for (int64_t j = 0; j < c; ++j) {
            T soft = kernels::fast_exp(zr[j] - mx) * inv;
            if (j == (*lab)[size_t(r)]) soft -= T(1);
            dz[r * c + j] += g * soft / T(b);
          }
        }
      });
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  auto run = [&]<typename T>() {
    const T* z = logits.data<T>().data();
    double acc = 0;
    for (int64_t r = 0; r < b; ++r) {
      const T* zr = z + r * c;
      double mx = double(zr[0]);
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, double(zr[j]));
      double denom = 0;
      for (int64_t j = 0; j < c; ++j) denom += std::exp(double(zr[j]) - mx);
      acc += std::log(denom) - (double(zr[labels[size_t(r)]]) - mx);
    }
    out.data<T>()[0] = T(acc / double(b));
  };
  logits.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor sum_all(const Tensor& a) {
  Tensor av = a;
  const int64_t n = a.numel();
  Tensor out = make_op_result({}, a.dtype(), {a}, [av, n](TensorImpl& self) {
    TensorImpl& ia = *av.impl();
    if (!ia.requires_grad) return;
    auto run = [&]<typename T>() {
      const T g = self.grad->as<T>()[0];
      ia.ensure_grad();
      T* da = ia.grad->as<T>();
      for (int64_t i = 0; i < n; ++i) da[i] += g;
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  auto run = [&]<typename T>() {
    const T* p = a.data<T>().data();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += double(p[i]);
    out.data<T>()[0] = T(acc);
  };
  a.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor mean_axis1(const Tensor& x) {
  if (x.rank() != 3) fail(ErrorKind::dimension, "mean_axis1: expect [B,L,D]");
  const int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  Tensor xv = x;
  Tensor out = make_op_result({b, d}, x.dtype(), {x}, [xv, b, l, d](TensorImpl& self) {
    TensorImpl& ix = *xv.impl();
    if (!ix.requires_grad) return;
    auto run = [&]<typename T>() {
      const T* g = self.grad->as<T>();
      ix.ensure_grad();
      T* dx = ix.grad->as<T>();
      const T inv = T(1) / T(l);
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t t = 0; t < l; ++t)
          for (int64_t c = 0; c < d; ++c) dx[(bi * l + t) * d + c] += g[bi * d + c] * inv;
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  auto run = [&]<typename T>() {
    const T* px = x.data<T>().data();
    T* po = out.data<T>().data();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t c = 0; c < d; ++c) {
        double acc = 0;
        for (int64_t t = 0; t < l; ++t) acc += double(px[(bi * l + t) * d + c]);
        po[bi * d + c] = T(acc / double(l));
      }
  };
  x.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor slice_axis1(const Tensor& x, int64_t t0, int64_t t1) {
  if (x.rank() != 3) fail(ErrorKind::dimension, "slice_axis1: expect [B,L,D]");
  const int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (t0 < 0 || t1 > l || t0 > t1) fail(ErrorKind::dimension, "slice_axis1: bad range");
  const int64_t ln = t1 - t0;
  Tensor xv = x;
  Tensor out = make_op_result({b, ln, d}, x.dtype(), {x}, [xv, b, l, d, t0, ln](TensorImpl& self) {
    TensorImpl& ix = *xv.impl();
    if (!ix.requires_grad) return;
    auto run = [&]<typename T>() {
      const T* g = self.grad->as<T>();
      ix.ensure_grad();
      T* dx = ix.grad->as<T>();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t t = 0; t < ln; ++t) {
          const T* gr = g + (bi * ln + t) * d;
          T* dr = dx + (bi * l + t0 + t) * d;
          for (int64_t c = 0; c < d; ++c) dr[c] += gr[c];
        }
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  auto run = [&]<typename T>() {
    const T* px = x.data<T>().data();
    T* po = out.data<T>().data();
    for (int64_t bi = 0; bi < b; ++bi)
      std::memcpy(po + bi * ln * d, px + (bi * l + t0) * d, size_t(ln * d) * sizeof(T));
  };
  x.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor gather_axis1(const Tensor& x, const std::vector<int64_t>& index) {
  if (x.rank() != 3) fail(ErrorKind::dimension, "gather_axis1: expect [B,L,D]");
  const int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  for (int64_t i : index)
    if (i < 0 || i >= l) fail(ErrorKind::dimension, "gather_axis1: index out of range");
  const int64_t ln = int64_t(index.size());
  auto idx = std::make_shared<std::vector<int64_t>>(index);
  Tensor xv = x;
  Tensor out = make_op_result({b, ln, d}, x.dtype(), {x}, [xv, idx, b, l, d, ln](TensorImpl& self) {
    TensorImpl& ix = *xv.impl();
    if (!ix.requires_grad) return;
    auto run = [&]<typename T>() {
      const T* g = self.grad->as<T>();
      ix.ensure_grad();
      T* dx = ix.grad->as<T>();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t t = 0; t < ln; ++t) {
          const T* gr = g + (bi * ln + t) * d;
          T* dr = dx + (bi * l + (*idx)[size_t(t)]) * d;
          for (int64_t c = 0; c < d; ++c) dr[c] += gr[c];
        }
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  auto run = [&]<typename T>() {
    const T* px = x.data<T>().data();
    T* po = out.data<T>().data();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t t = 0; t < ln; ++t)
        std::memcpy(po + (bi * ln + t) * d, px + (bi * l + index[size_t(t)]) * d,
                    size_t(d) * sizeof(T));
  };
  x.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor reverse_axis1(const Tensor& x) {
  const int64_t l = x.dim(1);
  std::vector<int64_t> idx(static_cast<size_t>(l));
  for (int64_t i = 0; i < l; ++i) idx[size_t(i)] = l - 1 - i;
  return gather_axis1(x, idx);
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& index) {
  if (x.rank() != 2) fail(ErrorKind::dimension, "gather_rows: expect [R,D]");
  const int64_t r = x.dim(0), d = x.dim(1);
  for (int64_t i : index)
    if (i < 0 || i >= r) fail(ErrorKind::dimension, "gather_rows: index out of range");
  const int64_t n = int64_t(index.size());
  auto idx = std::make_shared<std::vector<int64_t>>(index);
  Tensor xv = x;
  Tensor out = make_op_result({n, d}, x.dtype(), {x}, [xv, idx, d, n](TensorImpl& self) {
    TensorImpl& ix = *xv.impl();
    if (!ix.requires_grad) return;
    auto run = [&]<typename T>() {
      const T* g = self.grad->as<T>();
      ix.ensure_grad();
      T* dx = ix.grad->as<T>();
      for (int64_t t = 0; t < n; ++t) {
        T* dr = dx + (*idx)[size_t(t)] * d;
        for (int64_t c = 0; c < d; ++c) dr[c] += g[t * d + c];
      }
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  auto run = [&]<typename T>() {
    const T* px = x.data<T>().data();
    T* po = out.data<T>().data();
    for (int64_t t = 0; t < n; ++t)
      std::memcpy(po + t * d, px + index[size_t(t)] * d, size_t(d) * sizeof(T));
  };
  x.dtype() == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    fail(ErrorKind::dimension, "reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                                   shape_str(shape));
  Tensor xv = x;
  Tensor out = make_op_result(shape, x.dtype(), {x}, [xv](TensorImpl& self) {
    TensorImpl& ix = *xv.impl();
    if (!ix.requires_grad) return;
    auto run = [&]<typename T>() {
      const T* g = self.grad->as<T>();
      ix.ensure_grad();
      T* dx = ix.grad->as<T>();
      const int64_t n = ix.numel();
      for (int64_t i = 0; i < n; ++i) dx[i] += g[i];
    };
    self.dtype == DType::f32 ? run.template operator()<float>() : run.template operator()<double>();
  });
  std::memcpy(out.impl()->storage->raw(), x.impl()->storage->raw(),
              x.impl()->storage->size);
  return out;
}

}  // namespace armamba::ops
