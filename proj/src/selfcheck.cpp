#include "armamba/selfcheck.hpp"

#include <cmath>
#include <cstdint>
#include <sstream>

#include "armamba/blocks.hpp"
#include "armamba/layout.hpp"
#include "armamba/objective.hpp"
#include "armamba/ops.hpp"
#include "armamba/ssm.hpp"

namespace armamba::selfcheck {

namespace {

struct Ctx {
  uint64_t seed = 0;
  std::vector<CheckResult> results;
  void report(const std::string& module, const std::string& name, bool ok,
              const std::string& detail = "") {
    results.push_back({module, name, ok, detail});
  }
};

std::string num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

// random stable LTI parameters lifted to the time-varying scan layout
struct LtiCase {
  Tensor a2, b2, c1;        // [D,N], [D,N], [N]
  Tensor a4, b4, c3, x;     // lifted [B,L,D,N] / [B,L,N] / [B,L,D]
};

LtiCase make_lti(int64_t l, int64_t d, int64_t n, uint64_t seed, DType dt) {
  Rng rng = Rng(seed).fork(0x6c7469ull, uint64_t(l * 1000 + d * 100 + n));
  LtiCase c;
  c.a2 = Tensor::empty({d, n}, dt);
  c.b2 = Tensor::empty({d, n}, dt);
  c.c1 = Tensor::empty({n}, dt);
  for (int64_t i = 0; i < d * n; ++i) c.a2.set(i, rng.uniform(0.05, 0.95));
  for (int64_t i = 0; i < d * n; ++i) c.b2.set(i, rng.uniform(-1.0, 1.0));
  for (int64_t i = 0; i < n; ++i) c.c1.set(i, rng.uniform(-1.0, 1.0));
  c.a4 = Tensor::empty({1, l, d, n}, dt);
  c.b4 = Tensor::empty({1, l, d, n}, dt);
  c.c3 = Tensor::empty({1, l, n}, dt);
  c.x = Tensor::empty({1, l, d}, dt);
  for (int64_t t = 0; t < l; ++t) {
    for (int64_t i = 0; i < d * n; ++i) {
      c.a4.set(t * d * n + i, c.a2.at(i));
      c.b4.set(t * d * n + i, c.b2.at(i));
    }
    for (int64_t i = 0; i < n; ++i) c.c3.set(t * n + i, c.c1.at(i));
  }
  for (int64_t i = 0; i < l * d; ++i) c.x.set(i, rng.uniform(-1.0, 1.0));
  return c;
}

void check_scan_equivalence(Ctx& ctx) {
  const uint64_t base = ctx.seed;
  double worst32 = 0, worst64 = 0;
  for (int64_t n : {1, 4, 16})
    for (int64_t d : {1, 8})
      for (int64_t l : {1, 7, 64}) {
        for (uint64_t seed : {base + 1, base + 2}) {
          LtiCase c64 = make_lti(l, d, n, seed, DType::f64);
          Tensor seq = ssm::scan_recurrent(c64.a4, c64.b4, c64.c3, c64.x);
          Tensor par = ssm::scan_parallel(c64.a4, c64.b4, c64.c3, c64.x, 16);
          Tensor lti = ssm::lti_kernel_apply(c64.a2, c64.b2, c64.c1, c64.x);
          worst64 = std::max({worst64, max_abs_diff(seq, par), max_abs_diff(seq, lti)});
          LtiCase c32 = make_lti(l, d, n, seed, DType::f32);
          Tensor seq32 = ssm::scan_recurrent(c32.a4, c32.b4, c32.c3, c32.x);
          Tensor par32 = ssm::scan_parallel(c32.a4, c32.b4, c32.c3, c32.x, 16);
          Tensor lti32 = ssm::lti_kernel_apply(c32.a2, c32.b2, c32.c1, c32.x);
          worst32 = std::max({worst32, max_abs_diff(seq32, par32), max_abs_diff(seq32, lti32)});
        }
      }
  ctx.report("ssm-scan", "three-path equivalence (f64)", worst64 <= 1e-12,
             "max abs " + num(worst64) + " bound 1e-12");
  ctx.report("ssm-scan", "three-path equivalence (f32)", worst32 <= 1e-5,
             "max abs " + num(worst32) + " bound 1e-5");
}

void check_causality(Ctx& ctx) {
  Rng rng(ctx.seed + 7);
  const int64_t l = 12, d = 8, n = 4;
  ssm::SsmScanParams params = ssm::init_ssm_params(d, n, 4, rng, DType::f64);
  Tensor x = Tensor::randn({1, l, d}, rng, 1.0, DType::f64);
  ssm::MixerOptions seqmode{ssm::ScanMode::sequential, 64, ssm::Discretization::zoh_exact};
  NoGradGuard ng;
  Tensor y0 = ssm::mamba_mixer_forward(x, params, ssm::ScanDirection::forward, seqmode);
  bool ok = true;
  std::string detail;
  for (int64_t j : {int64_t(4), int64_t(9)}) {
    Tensor xp = x.clone();
    for (int64_t c = 0; c < d; ++c) xp.set(j * d + c, xp.at(j * d + c) + 3.0);
    Tensor y1 = ssm::mamba_mixer_forward(xp, params, ssm::ScanDirection::forward, seqmode);
    for (int64_t t = 0; t < j && ok; ++t)
      for (int64_t c = 0; c < d; ++c)
        if (y0.at(t * d + c) != y1.at(t * d + c)) {
          ok = false;
          detail = "output before t=" + std::to_string(j) + " changed";
        }
  }
  ctx.report("ssm-scan", "mixer causality", ok, detail);
}

void check_layout(Ctx& ctx) {
  using namespace layout;
  bool bij_ok = true;
  std::string detail;
  for (OrderKind k : {OrderKind::row_forward, OrderKind::row_backward, OrderKind::col_forward,
                      OrderKind::col_backward, OrderKind::random}) {
    ClusterLayout lay = make_layout(192, 192, 16, 48, k, 11);
    std::vector<char> seen(size_t(lay.num_clusters()), 0);
    for (int64_t v : lay.perm) {
      if (v < 0 || v >= lay.num_clusters() || seen[size_t(v)]) {
        bij_ok = false;
        detail = std::string("perm not bijective for ") + order_name(k);
      } else {
        seen[size_t(v)] = 1;
      }
    }
  }
  ctx.report("sequence-layout", "order permutations bijective", bij_ok, detail);

  Rng rng(3);
  ClusterLayout lay = make_layout(64, 64, 8, 16, OrderKind::random, 5);
  Tensor img = Tensor::rand_uniform({64, 64, 3}, rng, 0.0, 1.0, DType::f32);
  Tensor rt = unpatchify(patchify(img, lay), lay);
  const double diff = max_abs_diff(img, rt);
  ctx.report("sequence-layout", "patchify round-trip identity", diff == 0.0,
             "max abs " + num(diff));
}

void check_zoh_continuity(Ctx& ctx) {
  // values straddling the series threshold must agree to 1e-9 in f64
  const double tau = ssm::zoh_series_threshold();
  double worst = 0;
  for (double dtv : {0.5, 1.0, 2.0}) {
    for (int side = -1; side <= 1; side += 2) {
      const double z = tau * (1.0 + side * 1e-6);
      const double a = -z / dtv;  // negative a, |dt*a| straddles tau
      Tensor at = Tensor::from_data({1, 1}, {a}, DType::f64);
      Tensor dt = Tensor::from_data({1, 1, 1}, {dtv}, DType::f64);
      Tensor b = Tensor::from_data({1, 1, 1}, {1.0}, DType::f64);
      auto [abar, bbar] = ssm::zoh_discretize(at, dt, b);
      const double exact = (std::exp(dtv * a) - 1.0) / a;
      worst = std::max(worst, std::abs(bbar.at(0) - exact));
    }
  }
  ctx.report("ssm-scan", "zoh continuity", worst < 1e-9,
             "max abs deviation " + num(worst) + " at threshold " + num(tau) + " bound 1e-9");
}

void check_zoh_closed_form(Ctx& ctx) {
  // a=-1, dt=ln2, b=1 -> a_bar=0.5, b_bar=0.5
  Tensor a = Tensor::from_data({1, 1}, {-1.0}, DType::f64);
  Tensor dt = Tensor::from_data({1, 1, 1}, {std::log(2.0)}, DType::f64);
  Tensor b = Tensor::from_data({1, 1, 1}, {1.0}, DType::f64);
  auto [abar, bbar] = ssm::zoh_discretize(a, dt, b);
  const double e1 = std::abs(abar.at(0) - 0.5), e2 = std::abs(bbar.at(0) - 0.5);
  ctx.report("ssm-scan", "zoh closed form", e1 < 1e-12 && e2 < 1e-12,
             "a_bar err " + num(e1) + ", b_bar err " + num(e2));
}

void check_cluster_counts(Ctx& ctx) {
  const std::vector<std::pair<int64_t, int64_t>> rows = {
      {96, 4}, {64, 9}, {48, 16}, {32, 36}, {16, 144}};
  bool ok = true;
  std::string detail;
  for (auto [s, expect] : rows) {
    const auto lay = layout::make_layout(192, 192, 16, s, layout::OrderKind::row_forward);
    if (lay.num_clusters() != expect) {
      ok = false;
      detail = "cluster size " + std::to_string(s) + ": got " +
               std::to_string(lay.num_clusters()) + ", want " + std::to_string(expect);
    }
  }
  ctx.report("sequence-layout", "cluster-count arithmetic", ok, detail);
}

void check_gradients(Ctx& ctx) {
  // end-to-end mixer finite differences, f64
  Rng rng(ctx.seed + 17);
  const int64_t l = 4, d = 4, n = 2;
  ssm::SsmScanParams params = ssm::init_ssm_params(d, n, 4, rng, DType::f64);
  Tensor x = Tensor::randn({1, l, d}, rng, 0.5, DType::f64, true);
  ssm::MixerOptions mode{ssm::ScanMode::sequential, 64, ssm::Discretization::zoh_exact};
  auto loss_of = [&]() {
    return ops::sum_all(ops::mul(ssm::mamba_mixer_forward(x, params, ssm::ScanDirection::forward, mode),
                                 ssm::mamba_mixer_forward(x, params, ssm::ScanDirection::forward, mode)));
  };
  Tensor loss = loss_of();
  x.zero_grad();
  loss.backward();
  double worst = 0;
  const double h = 1e-5;
  for (int64_t i = 0; i < x.numel(); i += 3) {
    const double orig = x.at(i);
    x.set(i, orig + h);
    const double up = loss_of().item();
    x.set(i, orig - h);
    const double dn = loss_of().item();
    x.set(i, orig);
    const double fd = (up - dn) / (2 * h);
    const double an = x.grad_at(i);
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
    worst = std::max(worst, rel);
  }
  ctx.report("tensor-autodiff", "mixer gradient vs finite differences", worst <= 1e-4,
             "max rel err " + num(worst) + " bound 1e-4");
}

void check_stability_impl(Ctx& ctx) {
  // bounded inputs, A < 0: no NaN over 1e4 steps and |h| within the
  // geometric-series bound
  Rng rng(ctx.seed + 23);
  const int64_t l = 10000, d = 2, n = 4;
  Tensor a2 = Tensor::empty({d, n}, DType::f64);
  for (int64_t i = 0; i < d * n; ++i) a2.set(i, rng.uniform(0.2, 0.98));
  Tensor a4 = Tensor::empty({1, l, d, n}, DType::f64);
  Tensor b4 = Tensor::empty({1, l, d, n}, DType::f64);
  Tensor c3 = Tensor::empty({1, l, n}, DType::f64);
  Tensor x = Tensor::empty({1, l, d}, DType::f64);
  double max_a = 0, max_bx = 0;
  for (int64_t t = 0; t < l; ++t) {
    for (int64_t i = 0; i < d * n; ++i) {
      a4.set(t * d * n + i, a2.at(i));
      const double bv = rng.uniform(-1.0, 1.0);
      b4.set(t * d * n + i, bv);
    }
    for (int64_t i = 0; i < n; ++i) c3.set(t * n + i, rng.uniform(-1.0, 1.0));
    for (int64_t i = 0; i < d; ++i) x.set(t * d + i, rng.uniform(-1.0, 1.0));
  }
  for (int64_t i = 0; i < d * n; ++i) max_a = std::max(max_a, a2.at(i));
  max_bx = 1.0;  // |b| <= 1, |x| <= 1
  NoGradGuard ng;
  Tensor y = ssm::scan_recurrent(a4, b4, c3, x);
  bool finite = true;
  double max_y = 0;
  for (int64_t i = 0; i < y.numel(); ++i) {
    if (!std::isfinite(y.at(i))) finite = false;
    max_y = std::max(max_y, std::abs(y.at(i)));
  }
  const double h_bound = max_bx / (1.0 - max_a);
  const double y_bound = double(n) * h_bound;  // |c| <= 1 per state
  ctx.report("ssm-scan", "long-sequence stability", finite && max_y <= y_bound,
             "max |y| " + num(max_y) + ", bound " + num(y_bound) + (finite ? "" : ", NaN present"));
}

}  // namespace

std::vector<CheckResult> run(bool full, uint64_t seed) {
  Ctx ctx;
  ctx.seed = seed;
  check_scan_equivalence(ctx);
  check_causality(ctx);
  check_layout(ctx);
  check_zoh_closed_form(ctx);
  check_zoh_continuity(ctx);
  if (full) {
    check_cluster_counts(ctx);
    check_gradients(ctx);
    check_stability_impl(ctx);
  }
  return ctx.results;
}

}  // namespace armamba::selfcheck
