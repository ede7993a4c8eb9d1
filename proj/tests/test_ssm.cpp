#include <cmath>

#include "armamba/ops.hpp"
#include "armamba/ssm.hpp"
#include "armamba/threadpool.hpp"
#include "doctest.h"
#include "test_common.hpp"

using namespace armamba;
using armamba::testing::fd_check;
using armamba::testing::max_abs_diff;

TEST_SUITE_BEGIN("ssm");

namespace {

// independent oracle: direct double-loop evaluation of the recurrence
Tensor naive_scan(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& x) {
  const int64_t bsz = a_bar.dim(0), l = a_bar.dim(1), d = a_bar.dim(2), n = a_bar.dim(3);
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  for (int64_t bi = 0; bi < bsz; ++bi)
    for (int64_t di = 0; di < d; ++di)
      for (int64_t j = 0; j < n; ++j) {
        double h = 0;
        for (int64_t t = 0; t < l; ++t) {
          const int64_t base = ((bi * l + t) * d + di) * n + j;
          h = a_bar.at(base) * h + b_bar.at(base) * x.at((bi * l + t) * d + di);
          y.set((bi * l + t) * d + di,
                y.at((bi * l + t) * d + di) + c.at((bi * l + t) * n + j) * h);
        }
      }
  return y;
}

struct ScanCase {
  Tensor a_bar, b_bar, c, x;
};

ScanCase random_case(int64_t bsz, int64_t l, int64_t d, int64_t n, uint64_t seed, DType dt,
                     bool grad = false) {
  Rng rng(seed);
  ScanCase sc;
  sc.a_bar = Tensor::rand_uniform({bsz, l, d, n}, rng, 0.02, 0.98, dt, grad);
  sc.b_bar = Tensor::rand_uniform({bsz, l, d, n}, rng, -0.8, 0.8, dt, grad);
  sc.c = Tensor::rand_uniform({bsz, l, n}, rng, -1.0, 1.0, dt, grad);
  sc.x = Tensor::rand_uniform({bsz, l, d}, rng, -1.0, 1.0, dt, grad);
  return sc;
}

}  // namespace

TEST_CASE("zoh closed form: a=-1, dt=ln 2") {
  Tensor a = Tensor::from_data({1, 1}, {-1.0}, DType::f64);
  Tensor dt = Tensor::from_data({1, 1, 1}, {std::log(2.0)}, DType::f64);
  Tensor b = Tensor::from_data({1, 1, 1}, {1.0}, DType::f64);
  auto [abar, bbar] = ssm::zoh_discretize(a, dt, b);
  CHECK(abar.at(0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(bbar.at(0) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("zoh limits: a -> 0 gives a_bar -> 1, b_bar -> dt*b; dt -> eps gives b_bar -> 0") {
  Tensor a = Tensor::from_data({1, 1}, {-1e-9}, DType::f64);
  Tensor dt = Tensor::from_data({1, 1, 1}, {0.37}, DType::f64);
  Tensor b = Tensor::from_data({1, 1, 1}, {2.0}, DType::f64);
  auto [abar, bbar] = ssm::zoh_discretize(a, dt, b);
  CHECK(abar.at(0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(bbar.at(0) == doctest::Approx(0.37 * 2.0).epsilon(1e-9));

  Tensor a2 = Tensor::from_data({1, 1}, {-2.0}, DType::f64);
  Tensor dt_eps = Tensor::from_data({1, 1, 1}, {1e-9}, DType::f64);
  auto [abar2, bbar2] = ssm::zoh_discretize(a2, dt_eps, b);
  CHECK(abar2.at(0) == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(std::abs(bbar2.at(0)) < 1e-8);
}

TEST_CASE("zoh input validation") {
  Tensor a = Tensor::from_data({1, 1}, {-1.0}, DType::f64);
  Tensor b = Tensor::from_data({1, 1, 1}, {1.0}, DType::f64);
  CHECK_THROWS_AS(ssm::zoh_discretize(a, Tensor::from_data({1, 1, 1}, {0.0}, DType::f64), b), Error);
  CHECK_THROWS_AS(ssm::zoh_discretize(a, Tensor::from_data({1, 1, 1}, {-0.1}, DType::f64), b), Error);
  Tensor bad_a = Tensor::from_data({1, 1}, {NAN}, DType::f64);
  CHECK_THROWS_AS(ssm::zoh_discretize(bad_a, Tensor::from_data({1, 1, 1}, {0.1}, DType::f64), b), Error);
}

TEST_CASE("zoh series branch is continuous at the threshold") {
  const double tau = ssm::zoh_series_threshold();
  for (double side : {1.0 - 1e-6, 1.0 + 1e-6}) {
    const double dtv = 1.3;
    const double av = -tau * side / dtv;
    Tensor a = Tensor::from_data({1, 1}, {av}, DType::f64);
    Tensor dt = Tensor::from_data({1, 1, 1}, {dtv}, DType::f64);
    Tensor b = Tensor::from_data({1, 1, 1}, {1.0}, DType::f64);
    auto [abar, bbar] = ssm::zoh_discretize(a, dt, b);
    const double exact = (std::exp(dtv * av) - 1.0) / av;
    CHECK(std::abs(bbar.at(0) - exact) < 1e-9);
  }
}

TEST_CASE("zoh gradients vs finite differences, both branches") {
  Rng rng(11);
  const int64_t bsz = 1, l = 3, d = 2, n = 2;
  // mix of large and tiny |dt*a| so both evaluation branches are exercised
  Tensor a = Tensor::from_data({d, n}, {-1.5, -2e-5, -0.7, -1e-6}, DType::f64);
  a.set_requires_grad(true);
  Tensor dt = Tensor::rand_uniform({bsz, l, d}, rng, 0.05, 1.2, DType::f64, true);
  Tensor b = Tensor::rand_uniform({bsz, l, n}, rng, -1.0, 1.0, DType::f64, true);
  auto loss = [&] {
    auto [abar, bbar] = ssm::zoh_discretize(a, dt, b);
    return ops::sum_all(ops::mul(bbar, bbar));
  };
  CHECK(fd_check(a, loss) <= 1e-6);
  CHECK(fd_check(dt, loss) <= 1e-6);
  CHECK(fd_check(b, loss) <= 1e-6);
  auto loss_a = [&] {
    auto [abar, bbar] = ssm::zoh_discretize(a, dt, b);
    return ops::sum_all(ops::mul(abar, abar));
  };
  CHECK(fd_check(a, loss_a) <= 1e-6);
  CHECK(fd_check(dt, loss_a) <= 1e-6);
}

TEST_CASE("euler discretization: b_bar = dt * b") {
  Rng rng(12);
  Tensor a = Tensor::from_data({1, 2}, {-1.0, -2.0}, DType::f64);
  Tensor dt = Tensor::rand_uniform({1, 2, 1}, rng, 0.1, 1.0, DType::f64);
  Tensor b = Tensor::rand_uniform({1, 2, 2}, rng, -1.0, 1.0, DType::f64);
  auto [abar, bbar] = ssm::zoh_discretize(a, dt, b, ssm::Discretization::euler);
  for (int64_t t = 0; t < 2; ++t)
    for (int64_t j = 0; j < 2; ++j)
      CHECK(bbar.at(t * 2 + j) == doctest::Approx(dt.at(t) * b.at(t * 2 + j)).epsilon(1e-14));
}

TEST_CASE("scan_recurrent: L=1 expansion and memoryless case") {
  auto sc = random_case(2, 1, 3, 4, 21, DType::f64);
  Tensor y = ssm::scan_recurrent(sc.a_bar, sc.b_bar, sc.c, sc.x);
  for (int64_t bi = 0; bi < 2; ++bi)
    for (int64_t di = 0; di < 3; ++di) {
      double want = 0;
      for (int64_t j = 0; j < 4; ++j)
        want += sc.c.at(bi * 4 + j) * sc.b_bar.at((bi * 3 + di) * 4 + j) * sc.x.at(bi * 3 + di);
      CHECK(y.at(bi * 3 + di) == doctest::Approx(want).epsilon(1e-13));
    }

  auto sc2 = random_case(1, 5, 2, 3, 22, DType::f64);
  std::fill_n(sc2.a_bar.data<double>().data(), sc2.a_bar.numel(), 0.0);
  Tensor y2 = ssm::scan_recurrent(sc2.a_bar, sc2.b_bar, sc2.c, sc2.x);
  for (int64_t t = 0; t < 5; ++t)
    for (int64_t di = 0; di < 2; ++di) {
      double want = 0;
      for (int64_t j = 0; j < 3; ++j)
        want += sc2.c.at(t * 3 + j) * sc2.b_bar.at((t * 2 + di) * 3 + j) * sc2.x.at(t * 2 + di);
      CHECK(y2.at(t * 2 + di) == doctest::Approx(want).epsilon(1e-13));
    }
}

TEST_CASE("scan_recurrent matches the naive double-loop oracle bit-for-bit") {
  auto sc = random_case(2, 16, 3, 4, 31, DType::f64);
  Tensor y = ssm::scan_recurrent(sc.a_bar, sc.b_bar, sc.c, sc.x);
  Tensor want = naive_scan(sc.a_bar, sc.b_bar, sc.c, sc.x);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == want.at(i));
}

TEST_CASE("scan edge cases: L=0 valid, shape mismatch rejected") {
  Tensor a = Tensor::zeros({1, 0, 2, 3}, DType::f64);
  Tensor b = Tensor::zeros({1, 0, 2, 3}, DType::f64);
  Tensor c = Tensor::zeros({1, 0, 3}, DType::f64);
  Tensor x = Tensor::zeros({1, 0, 2}, DType::f64);
  Tensor y = ssm::scan_recurrent(a, b, c, x);
  CHECK(y.shape() == Shape{1, 0, 2});
  auto sc = random_case(1, 4, 2, 3, 41, DType::f64);
  Tensor bad_c = Tensor::zeros({1, 4, 2}, DType::f64);
  CHECK_THROWS_AS(ssm::scan_recurrent(sc.a_bar, sc.b_bar, bad_c, sc.x), Error);
}

TEST_CASE("scan_parallel agrees with scan_recurrent") {
  for (int64_t l : {1, 63, 64, 65, 257, 1024}) {
    auto sc64 = random_case(1, l, 4, 4, uint64_t(l), DType::f64);
    Tensor seq = ssm::scan_recurrent(sc64.a_bar, sc64.b_bar, sc64.c, sc64.x);
    Tensor par = ssm::scan_parallel(sc64.a_bar, sc64.b_bar, sc64.c, sc64.x, 64);
    CHECK(max_abs_diff(seq, par) <= 1e-12);
    auto sc32 = random_case(1, l, 4, 4, uint64_t(l) + 100, DType::f32);
    Tensor seq32 = ssm::scan_recurrent(sc32.a_bar, sc32.b_bar, sc32.c, sc32.x);
    Tensor par32 = ssm::scan_parallel(sc32.a_bar, sc32.b_bar, sc32.c, sc32.x, 64);
    CHECK(max_abs_diff(seq32, par32) <= 1e-5);
  }
}

TEST_CASE("scan_parallel with chunk=1 degenerates to the sequential result exactly") {
  auto sc = random_case(2, 37, 3, 5, 51, DType::f64);
  Tensor seq = ssm::scan_recurrent(sc.a_bar, sc.b_bar, sc.c, sc.x);
  Tensor par = ssm::scan_parallel(sc.a_bar, sc.b_bar, sc.c, sc.x, 1);
  for (int64_t i = 0; i < seq.numel(); ++i) CHECK(seq.at(i) == par.at(i));
}

TEST_CASE("scan_parallel is bit-identical across worker counts") {
  auto sc = random_case(2, 300, 4, 4, 61, DType::f32);
  std::vector<std::vector<float>> results;
  for (int w : {1, 2, 4, 8}) {
    set_num_workers(w);
    Tensor y = ssm::scan_parallel(sc.a_bar, sc.b_bar, sc.c, sc.x, 64);
    std::vector<float> v(y.data<float>().begin(), y.data<float>().end());
    results.push_back(std::move(v));
  }
  set_num_workers(1);
  for (size_t i = 1; i < results.size(); ++i) CHECK(results[i] == results[0]);
}

TEST_CASE("scan gradients vs finite differences (sequential and chunked)") {
  for (int64_t chunk : {int64_t(64), int64_t(3)}) {
    auto sc = random_case(1, 9, 2, 3, 71, DType::f64, true);
    auto loss = [&] {
      Tensor y = ssm::scan_parallel(sc.a_bar, sc.b_bar, sc.c, sc.x, chunk);
      return ops::sum_all(ops::mul(y, y));
    };
    CHECK(fd_check(sc.a_bar, loss, 1e-5, 5) <= 1e-6);
    CHECK(fd_check(sc.b_bar, loss, 1e-5, 5) <= 1e-6);
    CHECK(fd_check(sc.c, loss, 1e-5, 3) <= 1e-6);
    CHECK(fd_check(sc.x, loss, 1e-5, 2) <= 1e-6);
  }
}

TEST_CASE("lti kernel: L=2 closed form and impulse response") {
  Rng rng(81);
  const int64_t d = 2, n = 3;
  Tensor a2 = Tensor::rand_uniform({d, n}, rng, 0.1, 0.9, DType::f64);
  Tensor b2 = Tensor::rand_uniform({d, n}, rng, -1.0, 1.0, DType::f64);
  Tensor c1 = Tensor::rand_uniform({n}, rng, -1.0, 1.0, DType::f64);

  // unit impulse at t=0 -> y_t = kernel_t
  const int64_t l = 6;
  Tensor x = Tensor::zeros({1, l, d}, DType::f64);
  for (int64_t di = 0; di < d; ++di) x.set(di, 1.0);
  Tensor y = ssm::lti_kernel_apply(a2, b2, c1, x);
  for (int64_t di = 0; di < d; ++di) {
    double pw[3] = {b2.at(di * n), b2.at(di * n + 1), b2.at(di * n + 2)};
    for (int64_t t = 0; t < l; ++t) {
      double want = 0;
      for (int64_t j = 0; j < n; ++j) want += c1.at(j) * pw[j];
      CHECK(y.at(t * d + di) == doctest::Approx(want).epsilon(1e-12));
      for (int64_t j = 0; j < n; ++j) pw[j] *= a2.at(di * n + j);
    }
  }

  // L=2: kernel = (C*B, C*A*B)
  Tensor x2 = Tensor::zeros({1, 2, d}, DType::f64);
  for (int64_t di = 0; di < d; ++di) x2.set(di, 1.0);
  Tensor y2 = ssm::lti_kernel_apply(a2, b2, c1, x2);
  for (int64_t di = 0; di < d; ++di) {
    double k0 = 0, k1 = 0;
    for (int64_t j = 0; j < n; ++j) {
      k0 += c1.at(j) * b2.at(di * n + j);
      k1 += c1.at(j) * a2.at(di * n + j) * b2.at(di * n + j);
    }
    CHECK(y2.at(di) == doctest::Approx(k0).epsilon(1e-12));
    CHECK(y2.at(d + di) == doctest::Approx(k1).epsilon(1e-12));
  }
}

TEST_CASE("lti kernel equals the recurrence for constant parameters") {
  for (int64_t l : {1, 16, 64}) {
    Rng rng(uint64_t(90 + l));
    const int64_t d = 3, n = 4;
    Tensor a2 = Tensor::rand_uniform({d, n}, rng, 0.05, 0.95, DType::f64);
    Tensor b2 = Tensor::rand_uniform({d, n}, rng, -1.0, 1.0, DType::f64);
    Tensor c1 = Tensor::rand_uniform({n}, rng, -1.0, 1.0, DType::f64);
    Tensor x = Tensor::rand_uniform({2, l, d}, rng, -1.0, 1.0, DType::f64);
    Tensor a4 = Tensor::empty({2, l, d, n}, DType::f64);
    Tensor b4 = Tensor::empty({2, l, d, n}, DType::f64);
    Tensor c3 = Tensor::empty({2, l, n}, DType::f64);
    for (int64_t r = 0; r < 2 * l; ++r) {
      for (int64_t i = 0; i < d * n; ++i) {
        a4.set(r * d * n + i, a2.at(i));
        b4.set(r * d * n + i, b2.at(i));
      }
      for (int64_t j = 0; j < n; ++j) c3.set(r * n + j, c1.at(j));
    }
    Tensor want = ssm::scan_recurrent(a4, b4, c3, x);
    Tensor got = ssm::lti_kernel_apply(a2, b2, c1, x);
    CHECK(max_abs_diff(want, got) <= 1e-10);
  }
}

TEST_CASE("lti kernel rejects time-varying parameters") {
  auto sc = random_case(1, 4, 2, 3, 99, DType::f64);
  CHECK_THROWS_AS(ssm::lti_kernel_apply(sc.a_bar, sc.b_bar, sc.c, sc.x), Error);
}

TEST_CASE("fused zoh+scan path is bit-identical to the composed ops") {
  Rng rng(111);
  const int64_t bsz = 2, l = 37, d = 3, n = 4;
  for (DType dt_ : {DType::f32, DType::f64}) {
    Tensor a = Tensor::rand_uniform({d, n}, rng, -2.0, -0.01, dt_);
    // a few entries land inside the series branch
    a.set(1, -1e-6);
    a.set(5, -5e-5);
    Tensor dt = Tensor::rand_uniform({bsz, l, d}, rng, 1e-4, 1.5, dt_);
    Tensor b = Tensor::rand_uniform({bsz, l, n}, rng, -1.0, 1.0, dt_);
    Tensor c = Tensor::rand_uniform({bsz, l, n}, rng, -1.0, 1.0, dt_);
    Tensor x = Tensor::rand_uniform({bsz, l, d}, rng, -1.0, 1.0, dt_);
    NoGradGuard ng;
    for (int64_t chunk : {int64_t(64), int64_t(8), int64_t(1)}) {
      Tensor fused = ssm::zoh_scan_fused(a, dt, b, c, x, chunk);
      auto [abar, bbar] = ssm::zoh_discretize(a, dt, b);
      Tensor composed = ssm::scan_parallel(abar, bbar, c, x, chunk);
      for (int64_t i = 0; i < fused.numel(); ++i) CHECK(fused.at(i) == composed.at(i));
    }
  }
}

TEST_CASE("fused zoh+scan gradients match the composed ops and finite differences") {
  Rng rng(112);
  const int64_t bsz = 1, l = 7, d = 2, n = 3;
  Tensor a = Tensor::from_data({d, n}, {-1.2, -3e-5, -0.4, -0.9, -2e-6, -1.7}, DType::f64);
  Tensor dt = Tensor::rand_uniform({bsz, l, d}, rng, 0.05, 1.1, DType::f64);
  Tensor b = Tensor::rand_uniform({bsz, l, n}, rng, -1.0, 1.0, DType::f64);
  Tensor c = Tensor::rand_uniform({bsz, l, n}, rng, -1.0, 1.0, DType::f64);
  Tensor x = Tensor::rand_uniform({bsz, l, d}, rng, -1.0, 1.0, DType::f64);
  for (Tensor* t : {&a, &dt, &b, &c, &x}) t->set_requires_grad(true);

  auto fused_loss = [&] {
    Tensor y = ssm::zoh_scan_fused(a, dt, b, c, x, 3);
    return ops::sum_all(ops::mul(y, y));
  };
  CHECK(fd_check(a, fused_loss) <= 1e-6);
  CHECK(fd_check(dt, fused_loss) <= 1e-6);
  CHECK(fd_check(b, fused_loss) <= 1e-6);
  CHECK(fd_check(c, fused_loss) <= 1e-6);
  CHECK(fd_check(x, fused_loss) <= 1e-6);

  // grads agree with the composed route
  for (Tensor* t : {&a, &dt, &b, &c, &x}) t->zero_grad();
  fused_loss().backward();
  std::vector<std::vector<double>> fused_grads;
  for (Tensor* t : {&a, &dt, &b, &c, &x}) {
    std::vector<double> g;
    for (int64_t i = 0; i < t->numel(); ++i) g.push_back(t->grad_at(i));
    fused_grads.push_back(g);
    t->zero_grad();
  }
  auto [abar, bbar] = ssm::zoh_discretize(a, dt, b);
  Tensor y2 = ssm::scan_parallel(abar, bbar, c, x, 3);
  ops::sum_all(ops::mul(y2, y2)).backward();
  size_t k = 0;
  for (Tensor* t : {&a, &dt, &b, &c, &x}) {
    for (int64_t i = 0; i < t->numel(); ++i)
      CHECK(t->grad_at(i) == doctest::Approx(fused_grads[k][size_t(i)]).epsilon(1e-10));
    ++k;
  }
}

TEST_CASE("mixer: shape contract and forward causality") {
  Rng rng(101);
  const int64_t bsz = 2, l = 10, d = 6, n = 4;
  ssm::SsmScanParams p = ssm::init_ssm_params(d, n, 4, rng, DType::f64);
  Tensor x = Tensor::randn({bsz, l, d}, rng, 1.0, DType::f64);
  ssm::MixerOptions seq{ssm::ScanMode::sequential, 64, ssm::Discretization::zoh_exact};
  NoGradGuard ng;
  Tensor y0 = ssm::mamba_mixer_forward(x, p, ssm::ScanDirection::forward, seq);
  CHECK(y0.shape() == x.shape());
  const int64_t j = 6;
  Tensor xp = x.clone();
  for (int64_t c = 0; c < d; ++c) xp.set((l + j) * d + c, 5.0);  // batch 1, position j
  Tensor y1 = ssm::mamba_mixer_forward(xp, p, ssm::ScanDirection::forward, seq);
  for (int64_t t = 0; t < j; ++t)
    for (int64_t c = 0; c < d; ++c) CHECK(y0.at((l + t) * d + c) == y1.at((l + t) * d + c));
  // batch 0 untouched entirely
  for (int64_t i = 0; i < l * d; ++i) CHECK(y0.at(i) == y1.at(i));

  // changing a position changes outputs at and after it
  bool changed = false;
  for (int64_t t = j; t < l; ++t)
    for (int64_t c = 0; c < d; ++c)
      changed = changed || y0.at((l + t) * d + c) != y1.at((l + t) * d + c);
  CHECK(changed);
}

TEST_CASE("mixer backward direction reverses, scans, reverses back") {
  Rng rng(102);
  const int64_t l = 7, d = 4, n = 2;
  ssm::SsmScanParams p = ssm::init_ssm_params(d, n, 4, rng, DType::f64);
  Tensor x = Tensor::randn({1, l, d}, rng, 1.0, DType::f64);
  NoGradGuard ng;
  ssm::MixerOptions seq{ssm::ScanMode::sequential, 64, ssm::Discretization::zoh_exact};
  Tensor back = ssm::mamba_mixer_forward(x, p, ssm::ScanDirection::backward, seq);
  Tensor manual = ops::reverse_axis1(
      ssm::mamba_mixer_forward(ops::reverse_axis1(x), p, ssm::ScanDirection::forward, seq));
  CHECK(max_abs_diff(back, manual) == 0.0);
}

TEST_CASE("mixer end-to-end gradient vs finite differences (tiny config)") {
  Rng rng(103);
  const int64_t l = 4, d = 4, n = 2;
  ssm::SsmScanParams p = ssm::init_ssm_params(d, n, 4, rng, DType::f64);
  Tensor x = Tensor::randn({1, l, d}, rng, 0.7, DType::f64, true);
  ssm::MixerOptions par{ssm::ScanMode::parallel, 2, ssm::Discretization::zoh_exact};
  auto loss = [&] {
    Tensor y = ssm::mamba_mixer_forward(x, p, ssm::ScanDirection::forward, par);
    return ops::sum_all(ops::mul(y, y));
  };
  CHECK(fd_check(x, loss) <= 1e-4);
  CHECK(fd_check(p.a_log, loss, 1e-5, 3) <= 1e-4);
  CHECK(fd_check(p.w_in, loss, 1e-5, 5) <= 1e-4);
  CHECK(fd_check(p.w_gate, loss, 1e-5, 5) <= 1e-4);
  CHECK(fd_check(p.w_out, loss, 1e-5, 5) <= 1e-4);
  CHECK(fd_check(p.conv_w, loss, 1e-5, 3) <= 1e-4);
  CHECK(fd_check(p.dt_bias, loss) <= 1e-4);
  CHECK(fd_check(p.w_b, loss, 1e-5, 3) <= 1e-4);
  CHECK(fd_check(p.w_c, loss, 1e-5, 3) <= 1e-4);
  CHECK(fd_check(p.w_dt_down, loss, 1e-5, 2) <= 1e-4);
  CHECK(fd_check(p.w_dt_up, loss, 1e-5, 2) <= 1e-4);
}

TEST_CASE("mixer rejects non-finite input") {
  Rng rng(104);
  ssm::SsmScanParams p = ssm::init_ssm_params(2, 2, 4, rng, DType::f64);
  Tensor x = Tensor::zeros({1, 2, 2}, DType::f64);
  x.set(1, INFINITY);
  CHECK_THROWS_AS(ssm::mamba_mixer_forward(x, p), Error);
}

TEST_SUITE_END();
