#include <cmath>

#include "armamba/ops.hpp"
#include "armamba/threadpool.hpp"
#include "doctest.h"
#include "test_common.hpp"

using namespace armamba;
using namespace armamba::ops;
using armamba::testing::fd_check;
using armamba::testing::max_abs_diff;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("elementwise closed forms") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({2}, {3, 4});
  Tensor s = add(a, b);
  CHECK(s.at(0) == 4.0);
  CHECK(s.at(1) == 6.0);
  CHECK(sub(b, a).at(1) == doctest::Approx(2.0));
  CHECK(mul(a, b).at(1) == doctest::Approx(8.0));
  CHECK(neg(a).at(0) == -1.0);
  CHECK(softplus(Tensor::from_data({1}, {0.0})).at(0) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(ops::exp(Tensor::from_data({1}, {1.0}, DType::f64)).at(0) == doctest::Approx(M_E).epsilon(1e-12));
  CHECK(scale(a, 2.5).at(1) == doctest::Approx(5.0));
}

TEST_CASE("silu gradient matches the finite-difference oracle at x=1") {
  Tensor x = Tensor::from_data({1}, {1.0}, DType::f64);
  x.set_requires_grad(true);
  const double rel = fd_check(x, [&] { return sum_all(silu(x)); });
  CHECK(rel <= 1e-6);
}

TEST_CASE("broadcasting: trailing dims and grad reduction") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, DType::f64);
  Tensor b = Tensor::from_data({3}, {10, 20, 30}, DType::f64);
  Tensor y = add(a, b);
  CHECK(y.at(0) == 11.0);
  CHECK(y.at(5) == 36.0);
  // broadcast then op == op on pre-expanded operands
  Tensor b_full = Tensor::from_data({2, 3}, {10, 20, 30, 10, 20, 30}, DType::f64);
  CHECK(max_abs_diff(y, add(a, b_full)) == 0.0);

  b.set_requires_grad(true);
  Tensor loss = sum_all(mul(a, b));
  loss.backward();
  // d/db sums over the broadcast leading dim
  CHECK(b.grad_at(0) == doctest::Approx(1 + 4));
  CHECK(b.grad_at(2) == doctest::Approx(3 + 6));
}

TEST_CASE("shape and dtype errors") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 4});
  CHECK_THROWS_AS(add(a, b), Error);
  Tensor c = Tensor::zeros({2, 3}, DType::f64);
  CHECK_THROWS_AS(add(a, c), Error);
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({5, 2})), Error);
}

TEST_CASE("matmul: identity and triple-loop oracle") {
  Rng rng(1);
  Tensor eye = Tensor::zeros({3, 3}, DType::f64);
  for (int i = 0; i < 3; ++i) eye.set(i * 3 + i, 1.0);
  Tensor x = Tensor::randn({3, 3}, rng, 1.0, DType::f64);
  CHECK(max_abs_diff(matmul(eye, x), x) == 0.0);

  Tensor a = Tensor::randn({3, 4}, rng, 1.0, DType::f64);
  Tensor b = Tensor::randn({4, 2}, rng, 1.0, DType::f64);
  Tensor y = matmul(a, b);
  // independent naive contraction
  Tensor want = Tensor::zeros({3, 2}, DType::f64);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += a.at(i * 4 + k) * b.at(k * 2 + j);
      want.set(i * 2 + j, acc);
    }
  CHECK(max_abs_diff(y, want) <= 1e-12);
}

TEST_CASE("matmul gradients vs finite differences") {
  Rng rng(2);
  Tensor a = Tensor::randn({2, 3}, rng, 1.0, DType::f64, true);
  Tensor b = Tensor::randn({3, 2}, rng, 1.0, DType::f64, true);
  auto loss = [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); };
  CHECK(fd_check(a, loss) <= 1e-6);
  CHECK(fd_check(b, loss) <= 1e-6);
}

TEST_CASE("batched matmul broadcasts the weight") {
  Rng rng(3);
  Tensor x = Tensor::randn({4, 5, 3}, rng, 1.0, DType::f64, true);
  Tensor w = Tensor::randn({3, 2}, rng, 1.0, DType::f64, true);
  Tensor y = matmul(x, w);
  CHECK(y.shape() == Shape{4, 5, 2});
  for (int64_t n = 0; n < 4; ++n)
    for (int64_t i = 0; i < 5; ++i)
      for (int64_t j = 0; j < 2; ++j) {
        double acc = 0;
        for (int64_t k = 0; k < 3; ++k) acc += x.at((n * 5 + i) * 3 + k) * w.at(k * 2 + j);
        CHECK(y.at((n * 5 + i) * 2 + j) == doctest::Approx(acc).epsilon(1e-12));
      }
  CHECK(fd_check(w, [&] { return sum_all(mul(matmul(x, w), matmul(x, w))); }, 1e-5, 2) <= 1e-6);
}

TEST_CASE("layer_norm closed forms and gradient") {
  Tensor g1 = Tensor::full({3}, 1.0, DType::f64);
  Tensor b0 = Tensor::zeros({3}, DType::f64);
  Tensor constant = Tensor::from_data({1, 3}, {5, 5, 5}, DType::f64);
  Tensor y = layer_norm(constant, g1, b0, 1e-6);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(y.at(i)) < 1e-9);

  Tensor g2 = Tensor::full({2}, 1.0, DType::f64);
  Tensor bz = Tensor::zeros({2}, DType::f64);
  Tensor two = Tensor::from_data({1, 2}, {1, 3}, DType::f64);
  Tensor z = layer_norm(two, g2, bz, 1e-12);
  CHECK(z.at(0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(z.at(1) == doctest::Approx(1.0).epsilon(1e-5));

  Rng rng(4);
  Tensor x = Tensor::randn({2, 5}, rng, 1.0, DType::f64, true);
  Tensor gamma = Tensor::randn({5}, rng, 0.3, DType::f64, true);
  Tensor beta = Tensor::randn({5}, rng, 0.3, DType::f64, true);
  auto loss = [&] {
    Tensor o = layer_norm(x, gamma, beta, 1e-6);
    return sum_all(mul(o, o));
  };
  CHECK(fd_check(x, loss) <= 1e-5);
  CHECK(fd_check(gamma, loss) <= 1e-5);
  CHECK(fd_check(beta, loss) <= 1e-5);
  CHECK_THROWS_AS(layer_norm(x, Tensor::zeros({4}, DType::f64), beta, 1e-6), Error);
}

TEST_CASE("depthwise conv: identity, running pair sum, strict causality") {
  Tensor w1 = Tensor::full({1, 1}, 1.0, DType::f64);
  Tensor x = Tensor::from_data({1, 3, 1}, {1, 2, 3}, DType::f64);
  Tensor none;
  CHECK(max_abs_diff(depthwise_conv1d(x, w1, none), x) == 0.0);

  Tensor w2 = Tensor::full({1, 2}, 1.0, DType::f64);
  Tensor y = depthwise_conv1d(x, w2, none);
  CHECK(y.at(0) == 1.0);
  CHECK(y.at(1) == 3.0);
  CHECK(y.at(2) == 5.0);

  // perturbing t=5 leaves t<5 bit-identical
  Rng rng(5);
  Tensor xs = Tensor::randn({1, 8, 2}, rng, 1.0, DType::f64);
  Tensor w = Tensor::randn({2, 3}, rng, 1.0, DType::f64);
  Tensor b = Tensor::randn({2}, rng, 1.0, DType::f64);
  Tensor y0 = depthwise_conv1d(xs, w, b);
  Tensor xp = xs.clone();
  xp.set(5 * 2 + 1, 99.0);
  Tensor y1 = depthwise_conv1d(xp, w, b);
  for (int64_t t = 0; t < 5; ++t)
    for (int64_t c = 0; c < 2; ++c) CHECK(y0.at(t * 2 + c) == y1.at(t * 2 + c));

  // k larger than L is fine (zero padding)
  Tensor wk = Tensor::randn({2, 16}, rng, 1.0, DType::f64);
  CHECK(depthwise_conv1d(xs, wk, b).shape() == xs.shape());
  // channel mismatch
  CHECK_THROWS_AS(depthwise_conv1d(xs, Tensor::zeros({3, 2}, DType::f64), none), Error);

  auto loss = [&] {
    Tensor o = depthwise_conv1d(xs, w, b);
    return sum_all(mul(o, o));
  };
  xs.set_requires_grad(true);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  CHECK(fd_check(xs, loss, 1e-5, 3) <= 1e-6);
  CHECK(fd_check(w, loss) <= 1e-6);
  CHECK(fd_check(b, loss) <= 1e-6);
}

TEST_CASE("losses: mse and cross-entropy closed forms") {
  Rng rng(6);
  Tensor x = Tensor::randn({3, 4}, rng, 1.0, DType::f64);
  CHECK(mse_loss(x, x).item() == 0.0);
  Tensor p = Tensor::from_data({2}, {0, 2}, DType::f64);
  Tensor t = Tensor::from_data({2}, {0, 0}, DType::f64);
  CHECK(mse_loss(p, t).item() == doctest::Approx(2.0));

  Tensor logits = Tensor::zeros({4, 10}, DType::f64);
  CHECK(cross_entropy(logits, {1, 5, 3, 9}).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy(logits, {1, 5, 3, 10}), Error);

  Tensor lg = Tensor::randn({3, 5}, rng, 1.0, DType::f64, true);
  CHECK(fd_check(lg, [&] { return cross_entropy(lg, {0, 4, 2}); }) <= 1e-6);
}

TEST_CASE("backward contracts") {
  Rng rng(7);
  Tensor x = Tensor::randn({2, 3}, rng, 1.0, DType::f64, true);
  Tensor loss = sum_all(x);
  loss.backward();
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad_at(i) == 1.0);

  // two backward calls double the leaf grads exactly
  loss.backward();
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad_at(i) == 2.0);

  CHECK_THROWS_AS(ops::exp(x).backward(), Error);  // non-scalar

  // mse(Wx, y) against finite differences
  Tensor w = Tensor::randn({3, 2}, rng, 1.0, DType::f64, true);
  Tensor target = Tensor::randn({2, 2}, rng, 1.0, DType::f64);
  CHECK(fd_check(w, [&] { return mse_loss(matmul(x, w), target); }) <= 1e-5);
}

TEST_CASE("every differentiable op passes a randomized FD check over 10 seeds") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor a = Tensor::randn({2, 4}, rng, 0.8, DType::f64, true);
    Tensor b = Tensor::randn({2, 4}, rng, 0.8, DType::f64, true);
    auto check = [&](const std::function<Tensor()>& f) {
      CHECK(fd_check(a, [&] { return sum_all(mul(f(), f())); }, 1e-5, 3) <= 1e-4);
    };
    check([&] { return add(a, b); });
    check([&] { return sub(a, b); });
    check([&] { return mul(a, b); });
    check([&] { return neg(a); });
    check([&] { return ops::exp(scale(a, 0.5)); });
    check([&] { return softplus(a); });
    check([&] { return silu(a); });
    check([&] { return add_scalar(a, 0.7); });
    check([&] { return reshape(a, {4, 2}); });
    check([&] { return slice_axis1(reshape(a, {2, 2, 2}), 0, 2); });
    check([&] { return gather_axis1(reshape(a, {2, 2, 2}), {1, 0}); });
    check([&] { return mean_axis1(reshape(a, {2, 2, 2})); });
    check([&] { return gather_rows(a, {1, 0, 1}); });
  }
}

TEST_CASE("deterministic across runs and worker counts") {
  auto compute = [&] {
    Rng rng(42);
    Tensor x = Tensor::randn({4, 33}, rng, 1.0, DType::f32, true);
    Tensor w = Tensor::randn({33, 7}, rng, 1.0, DType::f32, true);
    Tensor loss = mse_loss(silu(matmul(x, w)), Tensor::zeros({4, 7}, DType::f32));
    loss.backward();
    std::vector<float> out;
    for (int64_t i = 0; i < w.numel(); ++i) out.push_back(float(w.grad_at(i)));
    out.push_back(float(loss.item()));
    return out;
  };
  set_num_workers(1);
  auto r1 = compute();
  auto r2 = compute();
  CHECK(r1 == r2);
  set_num_workers(4);
  auto r4 = compute();
  CHECK(r1 == r4);
  set_num_workers(1);
}

TEST_SUITE_END();
