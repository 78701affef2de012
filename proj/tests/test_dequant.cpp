// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "condflow/dequant.hpp"
#include "testutil.hpp"

using namespace condflow;
using testutil::random_tensor;

namespace {

// 1-D conditional density model: actnorm chain + conditional Gaussian prior,
// with parameters perturbed away from the identity so p(v|x) varies by seed.
FlowModel<double> tiny_1d_model(std::uint64_t seed) {
  FlowConfig cfg;
  cfg.levels = 1;
  cfg.subflows = 2;
  cfg.squeeze = false;
  cfg.norm = NormKind::actnorm;
  cfg.with_invconv = false;
  cfg.with_coupling = false;
  cfg.prior_hidden = 4;
  cfg.context_channels = 3;
  cfg.y_channels = 1;
  cfg.y_h = 1;
  cfg.y_w = 1;
  cfg.x_channels = 1;
  cfg.x_h = 1;
  cfg.x_w = 1;
  Rng rng(seed);
  FlowModel<double> model(cfg, rng);
  for (auto* p : model.params())
    if (p->trainable)
      p->set_value(add(p->value, random_tensor<double>(p->value.shape(), rng, 0.2)));
  return model;
}

BinaryDequantizer<double> tiny_1d_dequant(std::uint64_t seed, bool perturb = true) {
  BinaryDequantizer<double>::Config cfg;
  cfg.context_channels = 3;
  cfg.hidden = 4;
  Rng rng(seed);
  BinaryDequantizer<double> dq(cfg, rng);
  if (perturb)
    for (auto* p : dq.params())
      p->set_value(add(p->value, random_tensor<double>(p->value.shape(), rng, 0.3)));
  return dq;
}

template <typename F>
double trapezoid(F f, double lo, double hi, int n) {
  const double h = (hi - lo) / n;
  double acc = 0.5 * (f(lo) + f(hi));
  for (int i = 1; i < n; ++i) acc += f(lo + h * i);
  return acc * h;
}

// Batched density of the model over a grid of scalar v values.
std::vector<double> model_density_grid(const FlowModel<double>& model,
                                       double x_val,
                                       const std::vector<double>& grid) {
  std::vector<double> out(grid.size());
  const std::int64_t chunk = 512;
  for (size_t off = 0; off < grid.size(); off += chunk) {
    const std::int64_t b = std::min<std::int64_t>(chunk, static_cast<std::int64_t>(grid.size() - off));
    std::vector<double> vv(static_cast<size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) vv[static_cast<size_t>(i)] = grid[off + static_cast<size_t>(i)];
    auto v = Tensor64::from({b, 1, 1, 1}, std::move(vv));
    auto x = Tensor64::full({b, 1, 1, 1}, x_val);
    auto lp = model.log_prob(v, x);
    for (std::int64_t i = 0; i < b; ++i)
      out[off + static_cast<size_t>(i)] = std::exp(lp.at(i));
  }
  return out;
}

}  // namespace

TEST_CASE("uniform dequantization") {
  UniformDequantizer<double> dq(5);
  Rng rng(1);
  SUBCASE("support and zero log-density") {
    auto y = Tensor64::full({4, 1, 2, 2}, 5.0);
    auto ds = dq.dequantize(y, rng);
    for (std::int64_t i = 0; i < ds.v.numel(); ++i) {
      CHECK(ds.v.at(i) >= 5.0);
      CHECK(ds.v.at(i) < 6.0);
    }
    for (int n = 0; n < 4; ++n) CHECK(ds.logq.at(n) == 0.0);
    auto rq = dq.requantize(ds.v);
    for (std::int64_t i = 0; i < rq.numel(); ++i) CHECK(rq.at(i) == 5.0);
  }
  SUBCASE("lift of zero averages one half") {
    double acc = 0.0;
    const int n = 100000;
    auto y = Tensor64::zeros({1, 1, 1, 1});
    for (int i = 0; i < n; ++i) acc += dq.dequantize(y, rng).v.at(0);
    CHECK(std::abs(acc / n - 0.5) < 0.01);
  }
  SUBCASE("support consistency at the top level") {
    // 31 + u must still floor to 31
    auto y = Tensor64::full({1, 1, 8, 8}, 31.0);
    for (int i = 0; i < 2000; ++i) {
      auto ds = dq.dequantize(y, rng);
      auto rq = dq.requantize(ds.v);
      for (std::int64_t j = 0; j < rq.numel(); ++j) REQUIRE(rq.at(j) == 31.0);
    }
  }
  SUBCASE("out-of-range and non-integer targets are domain errors") {
    CHECK_THROWS_AS(dq.dequantize(Tensor64::full({1, 1, 1, 1}, 32.0), rng), DomainError);
    CHECK_THROWS_AS(dq.dequantize(Tensor64::full({1, 1, 1, 1}, -1.0), rng), DomainError);
    CHECK_THROWS_AS(dq.dequantize(Tensor64::full({1, 1, 1, 1}, 2.5), rng), DomainError);
  }
}

TEST_CASE("binary lift sign cases") {
  // softplus(u) = 0.3 forced by solving for u
  const double u_for_03 = std::log(std::expm1(0.3));
  auto u = Tensor64::full({1, 1, 1, 1}, u_for_03);
  auto v1 = BinaryDequantizer<double>::lift(Tensor64::full({1, 1, 1, 1}, 1.0), u);
  CHECK(v1.at(0) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(v1.at(0) > 0.5);
  auto v0 = BinaryDequantizer<double>::lift(Tensor64::full({1, 1, 1, 1}, 0.0), u);
  CHECK(v0.at(0) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(v0.at(0) < 0.5);
}

TEST_CASE("binary dequantizer rejects non-binary targets") {
  auto dq = tiny_1d_dequant(7);
  Rng rng(2);
  CHECK_THROWS_AS(dq.dequantize(Tensor64::full({1, 1, 1, 1}, 0.3),
                                Tensor64::zeros({1, 1, 1, 1}), rng),
                  DomainError);
}

TEST_CASE("binary support consistency over many draws") {
  Rng rng(3);
  BinaryDequantizer<double>::Config cfg;
  cfg.y_h = 4;
  cfg.y_w = 4;
  cfg.x_h = 4;
  cfg.x_w = 4;
  cfg.context_channels = 4;
  cfg.hidden = 6;
  Rng init(11);
  BinaryDequantizer<double> dq(cfg, init);
  for (auto* p : dq.params())
    p->set_value(add(p->value, random_tensor<double>(p->value.shape(), init, 0.3)));
  int violations = 0;
  const int batches = 40, bs = 32;  // 40*32*16 = 20480 pixel draws
  for (int b = 0; b < batches; ++b) {
    auto y = Tensor64::zeros({bs, 1, 4, 4});
    double* py = y.mutable_data();
    for (std::int64_t i = 0; i < y.numel(); ++i) py[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    auto x = random_tensor<double>({bs, 1, 4, 4}, rng);
    auto ds = dq.dequantize(y, x, rng);
    auto rq = dq.requantize(ds.v);
    for (std::int64_t i = 0; i < y.numel(); ++i)
      if (rq.at(i) != y.at(i)) ++violations;
    REQUIRE(all_finite(ds.logq));
  }
  CHECK(violations == 0);
}

TEST_CASE("logq matches a histogram of a million samples at D=1") {
  auto dq = tiny_1d_dequant(21);
  Rng rng(4);
  const double x_val = 0.37;
  const int bins = 160;
  const double lo = 0.5, hi = 6.9;
  const double width = (hi - lo) / bins;
  std::vector<std::int64_t> counts(bins, 0);
  const int total = 1000000, bs = 4096;
  std::int64_t kept = 0;
  for (int done = 0; done < total; done += bs) {
    const std::int64_t b = std::min(bs, total - done);
    auto y = Tensor64::full({b, 1, 1, 1}, 1.0);
    auto x = Tensor64::full({b, 1, 1, 1}, x_val);
    auto ds = dq.dequantize(y, x, rng);
    for (std::int64_t i = 0; i < b; ++i) {
      const double v = ds.v.at(i);
      const int bi = static_cast<int>((v - lo) / width);
      if (bi >= 0 && bi < bins) {
        ++counts[static_cast<size_t>(bi)];
        ++kept;
      }
    }
  }
  CHECK(kept > total * 95 / 100);  // nearly all mass inside the window
  double worst = 0.0;
  for (int bi = 0; bi < bins; ++bi) {
    const double center = lo + (bi + 0.5) * width;
    auto lq = dq.logq_at(Tensor64::full({1, 1, 1, 1}, center),
                          Tensor64::full({1, 1, 1, 1}, 1.0),
                          Tensor64::full({1, 1, 1, 1}, x_val));
    const double density = std::exp(lq.at(0));
    const double freq = static_cast<double>(counts[static_cast<size_t>(bi)]) / (total * width);
    worst = std::max(worst, std::abs(density - freq));
  }
  CHECK(worst < 2e-2);
}

TEST_CASE("logq is a normalized density on the correct half-line") {
  // Integrates q over the half-line under the substitution
  // v = 0.5 +- softplus(u), dv = sigmoid(u) du, which resolves densities
  // concentrated arbitrarily close to the boundary.
  for (std::uint64_t seed : {31ULL, 32ULL, 33ULL}) {
    auto dq = tiny_1d_dequant(seed);
    for (double yv : {0.0, 1.0}) {
      auto f = [&](double u) {
        const double sp = u > 25 ? u : std::log1p(std::exp(u));
        const double v = yv > 0.5 ? 0.5 + sp : 0.5 - sp;
        if (v == 0.5) return 0.0;  // underflowed magnitude, negligible mass
        auto lq = dq.logq_at(Tensor64::full({1, 1, 1, 1}, v),
                             Tensor64::full({1, 1, 1, 1}, yv),
                             Tensor64::full({1, 1, 1, 1}, -0.4));
        const double sig = u >= 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
        return std::exp(lq.at(0)) * sig;
      };
      const double integral = trapezoid(f, -60.0, 60.0, 24000);
      CHECK(std::abs(integral - 1.0) < 1e-3);
    }
  }
}

TEST_CASE("variational objective lower-bounds the exact log-likelihood at D=1") {
  int checked = 0;
  for (std::uint64_t seed = 50; seed < 56; ++seed) {
    auto model = tiny_1d_model(seed);
    auto dq = tiny_1d_dequant(seed + 1000);
    Rng rng(seed * 7 + 1);
    const double x_val = rng.normal() * 0.5;
    const double y_val = (seed % 2 == 0) ? 1.0 : 0.0;

    // exact log P(y|x): integral of the model density over the half-line
    std::vector<double> grid;
    const int gn = 24000;
    const double lo = y_val > 0.5 ? 0.5 : 0.5 - 60.0;
    const double hi = y_val > 0.5 ? 0.5 + 60.0 : 0.5;
    for (int i = 0; i <= gn; ++i) grid.push_back(lo + (hi - lo) * i / gn);
    auto dens = model_density_grid(model, x_val, grid);
    double integral = 0.5 * (dens.front() + dens.back());
    for (int i = 1; i < gn; ++i) integral += dens[static_cast<size_t>(i)];
    integral *= (hi - lo) / gn;
    const double exact = std::log(integral);

    // Monte-Carlo mean of the single-sample objective
    const int n = 8000, bs = 1000;
    double acc = 0.0;
    for (int done = 0; done < n; done += bs) {
      auto y = Tensor64::full({bs, 1, 1, 1}, y_val);
      auto x = Tensor64::full({bs, 1, 1, 1}, x_val);
      auto ctx = model.make_context(x, false);
      auto e = elbo_objective(model, ctx, y, x, dq, rng);
      for (int i = 0; i < bs; ++i) acc += e.at(i);
    }
    const double mean_elbo = acc / n;
    CAPTURE(seed);
    CAPTURE(mean_elbo);
    CAPTURE(exact);
    CHECK(mean_elbo <= exact + 1e-3);
    ++checked;
  }
  CHECK(checked == 6);
}

TEST_CASE("averaging objective samples shrinks the estimator variance") {
  auto model = tiny_1d_model(77);
  auto dq = tiny_1d_dequant(78);
  Rng rng(79);
  const int groups = 150, per = 64;
  std::vector<double> singles;
  singles.reserve(groups * per);
  for (int g = 0; g < groups; ++g) {
    auto y = Tensor64::full({per, 1, 1, 1}, 1.0);
    auto x = Tensor64::full({per, 1, 1, 1}, 0.2);
    auto ctx = model.make_context(x, false);
    auto e = elbo_objective(model, ctx, y, x, dq, rng);
    for (int i = 0; i < per; ++i) singles.push_back(e.at(i));
  }
  auto variance = [](const std::vector<double>& v) {
    double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double acc = 0;
    for (double x : v) acc += (x - m) * (x - m);
    return acc / v.size();
  };
  std::vector<double> means;
  for (int g = 0; g < groups; ++g) {
    double m = 0;
    for (int i = 0; i < per; ++i) m += singles[static_cast<size_t>(g * per + i)];
    means.push_back(m / per);
  }
  const double v1 = variance(singles);
  const double v64 = variance(means);
  CHECK(v1 > 0.0);
  CHECK(v64 / v1 < 0.05);
}

TEST_CASE("uniform objective reduces to the model log-density") {
  auto model = tiny_1d_model(91);
  UniformDequantizer<double> dq(1);
  Rng rng(92);
  auto y = Tensor64::zeros({8, 1, 1, 1});
  auto x = Tensor64::full({8, 1, 1, 1}, 0.1);
  auto ctx = model.make_context(x, false);
  auto e = elbo_objective(model, ctx, y, dq, rng);
  CHECK(e.shape() == Shape{8});
  REQUIRE(all_finite(e));
}
