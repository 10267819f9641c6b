#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"
#include "wsvamp/denoisers.hpp"

using namespace wsvamp;
using namespace wsvamp::denoisers;

namespace {
PriorDescriptor bg(double sparsity, double var) {
  PriorDescriptor p;
  p.kind = PriorDescriptor::Kind::bernoulli_gaussian;
  p.sparsity = sparsity;
  p.signal_var = var;
  return p;
}
}  // namespace

TEST_CASE("zero-noise bypass is the identity with unit divergence") {
  auto g = rng::engine(1);
  const Vec r = rng::gaussian(64, g);
  const auto out = denoise(r, 0.0, bg(0.1, 10.0));
  CHECK((out.x_hat - r).norm() == 0.0);
  CHECK(out.alpha == 1.0);
}

TEST_CASE("pure Gaussian prior reduces to the linear shrinker") {
  auto g = rng::engine(2);
  const Vec r = rng::gaussian(128, g);
  const auto out = denoise(r, 1.0, bg(1.0, 1.0));
  CHECK((out.x_hat - 0.5 * r).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(out.alpha == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("analytic divergence matches centered finite differences") {
  const auto prior = bg(0.1, 10.0);
  const double v_h = 0.5;
  auto g = rng::engine(3);
  // r drawn from the actual channel: x ~ prior, h ~ N(0, v_h)
  Vec r(200);
  std::bernoulli_distribution coin(prior.sparsity);
  std::normal_distribution<double> comp(0.0, std::sqrt(prior.signal_var));
  std::normal_distribution<double> noise(0.0, std::sqrt(v_h));
  for (int k = 0; k < 200; ++k) r[k] = (coin(g) ? comp(g) : 0.0) + noise(g);
  const auto out = denoise(r, v_h, prior);
  const double fd = testsup::divergence_fd(
      [&](const Vec& in) { return denoise(in, v_h, prior).x_hat; }, r, 1e-5);
  CHECK(out.alpha == Catch::Approx(fd).margin(1e-4));
  CHECK(out.alpha > 0.0);
  CHECK(out.alpha < 1.0);
}

TEST_CASE("soft threshold divergence counts the active set") {
  PriorDescriptor p;
  p.kind = PriorDescriptor::Kind::soft_threshold;
  p.threshold_rule = 1.0;
  Vec r(4);
  r << 3.0, -0.5, 0.2, -4.0;  // threshold = sqrt(1) = 1
  const auto out = denoise(r, 1.0, p);
  CHECK(out.x_hat[0] == Catch::Approx(2.0));
  CHECK(out.x_hat[1] == 0.0);
  CHECK(out.x_hat[3] == Catch::Approx(-3.0));
  CHECK(out.alpha == Catch::Approx(0.5));
}

TEST_CASE("negative v_h is rejected") {
  CHECK_THROWS_AS(denoise(Vec::Zero(4), -1.0, bg(0.5, 1.0)), std::invalid_argument);
}

TEST_CASE("bb-mc divergence is exact for linear maps") {
  auto g = rng::engine(5);
  const Vec r = rng::gaussian(256, g);
  const auto identity = [](const Vec& in) { return in; };
  CHECK(divergence_bb_mc(identity, r, 1, 1e-4, 0) == Catch::Approx(1.0).margin(1e-10));
  const auto gain = [](const Vec& in) { return Vec(0.37 * in); };
  CHECK(divergence_bb_mc(gain, r, 1, 1e-4, 0) == Catch::Approx(0.37).margin(1e-10));
}

TEST_CASE("bb-mc divergence tracks the analytic value on the real denoiser") {
  const auto prior = bg(0.1, 10.0);
  const double v_h = 0.3;
  auto g = rng::engine(6);
  Vec r(4096);
  std::bernoulli_distribution coin(prior.sparsity);
  std::normal_distribution<double> comp(0.0, std::sqrt(prior.signal_var));
  std::normal_distribution<double> noise(0.0, std::sqrt(v_h));
  for (int k = 0; k < 4096; ++k) r[k] = (coin(g) ? comp(g) : 0.0) + noise(g);
  const double analytic = denoise(r, v_h, prior).alpha;
  const auto den = [&](const Vec& in) { return denoise(in, v_h, prior).x_hat; };
  double acc = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    acc += divergence_bb_mc(den, r, 1, 1e-4 * std::sqrt(v_h), seed);
  CHECK(std::abs(acc / 10.0 - analytic) / analytic < 0.02);
}

TEST_CASE("onsager update algebra") {
  auto g = rng::engine(7);
  const Vec r = rng::gaussian(64, g);
  const Vec xh = rng::gaussian(64, g);
  SECTION("alpha = 0 passes x_hat through") {
    CHECK((onsager_update_s(r, xh, 0.0) - xh).norm() == 0.0);
  }
  SECTION("posterior mean equal to alpha r collapses to zero") {
    CHECK(onsager_update_s(r, 0.5 * r, 0.5).norm() < 1e-12);
  }
  SECTION("inverse identity") {
    const Vec s = onsager_update_s(r, xh, 0.3);
    CHECK((s * (1.0 - 0.3) + 0.3 * r - xh).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("alpha near one is degenerate") {
    CHECK_THROWS_AS(onsager_update_s(r, xh, 1.0 - 1e-10), std::runtime_error);
  }
}

TEST_CASE("denoiser is Lipschitz over random pairs") {
  const auto prior = bg(0.2, 5.0);
  auto g = rng::engine(8);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Vec a = rng::gaussian(128, g, 2.0);
    const Vec b = rng::gaussian(128, g, 2.0);
    const double num = (denoise(a, 0.7, prior).x_hat - denoise(b, 0.7, prior).x_hat).norm();
    worst = std::max(worst, num / (a - b).norm());
  }
  CHECK(worst < 10.0);  // finite, prior-dependent constant
}

TEST_CASE("finite-N orthogonality of the corrected error") {
  // r = x + h with h independent of x; after the corrected step the new
  // error q = s - x should decorrelate from h.
  const auto prior = bg(0.1, 10.0);
  const int n = 8192;
  const double v_h = 0.4;
  double acc = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto g = rng::engine(seed, {9});
    Vec x(n);
    std::bernoulli_distribution coin(prior.sparsity);
    std::normal_distribution<double> comp(0.0, std::sqrt(prior.signal_var));
    for (int k = 0; k < n; ++k) x[k] = coin(g) ? comp(g) : 0.0;
    const Vec h = rng::gaussian(n, g, std::sqrt(v_h));
    const Vec r = x + h;
    const auto out = denoise(r, v_h, prior);
    const Vec s = onsager_update_s(r, out.x_hat, out.alpha);
    const Vec q = s - x;
    const double v_q = q.squaredNorm() / n;
    acc += std::abs(q.dot(h) / n) / std::sqrt(v_q * v_h);
  }
  CHECK(acc / 10.0 < 0.05);
}
