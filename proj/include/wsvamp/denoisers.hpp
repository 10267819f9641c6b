#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>

#include "wsvamp/rng.hpp"

namespace wsvamp::denoisers {

struct PriorDescriptor {
  enum class Kind { bernoulli_gaussian, soft_threshold };
  Kind kind = Kind::bernoulli_gaussian;
  double sparsity = 0.1;        // activation probability
  double signal_var = 10.0;     // variance of active components
  double threshold_rule = 1.0;  // soft threshold = rule * sqrt(v_h)

  // per-coordinate signal power, the quantity SNR bookkeeping is based on
  double second_moment() const { return sparsity * signal_var; }
};

struct DenoiserOutput {
  Vec x_hat;
  double alpha = 0.0;  // (1/N) div g(r)
  enum class Method { analytic, bb_mc } alpha_method = Method::analytic;
};

/// Separable posterior-mean denoiser for r = x + h, h ~ N(0, v_h), with its
/// analytic divergence. v_h = 0 is the exact-zero-noise bypass (identity).
inline DenoiserOutput denoise(const Vec& r, double v_h, const PriorDescriptor& prior) {
  if (v_h < 0.0 || !std::isfinite(v_h)) throw std::invalid_argument("denoise: v_h must be >= 0");
  DenoiserOutput out;
  const auto n = r.size();
  if (v_h == 0.0) {
    out.x_hat = r;
    out.alpha = 1.0;
    return out;
  }
  out.x_hat.resize(n);
  if (prior.kind == PriorDescriptor::Kind::soft_threshold) {
    const double th = prior.threshold_rule * std::sqrt(v_h);
    long active = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
      const double a = std::abs(r[k]);
      if (a > th) {
        out.x_hat[k] = (r[k] > 0 ? a - th : th - a);
        ++active;
      } else {
        out.x_hat[k] = 0.0;
      }
    }
    out.alpha = static_cast<double>(active) / static_cast<double>(n);
    return out;
  }
  // Bernoulli-Gaussian posterior mean: g(r) = phi(r) * gain * r with
  //   gain = s2/(s2+v),  phi = P(active | r),
  //   g'(r) = gain * phi * (1 + (1-phi) r^2 s2 / (v (s2+v))).
  const double pi = prior.sparsity;
  const double s2 = prior.signal_var;
  const double gain = s2 / (s2 + v_h);
  const double curv = s2 / (v_h * (s2 + v_h));
  const double log_pref = std::log((1.0 - pi) / pi) + 0.5 * std::log((s2 + v_h) / v_h);
  double div_sum = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double rk = r[k];
    double phi;
    if (pi >= 1.0) {
      phi = 1.0;
    } else {
      const double t = log_pref - 0.5 * rk * rk * curv;
      phi = 1.0 / (1.0 + std::exp(t));  // exp overflow -> phi = 0, still finite
    }
    out.x_hat[k] = phi * gain * rk;
    div_sum += gain * phi * (1.0 + (1.0 - phi) * rk * rk * curv);
  }
  out.alpha = div_sum / static_cast<double>(n);
  return out;
}

/// Black-box Monte Carlo divergence: forward differences along Rademacher
/// probes, alpha ~= (1/(N eps)) u^T (g(r + eps u) - g(r)).
inline double divergence_bb_mc(const std::function<Vec(const Vec&)>& g, const Vec& r,
                               int probes, double epsilon, std::uint64_t seed) {
  if (probes < 1) throw std::invalid_argument("divergence_bb_mc: probes must be >= 1");
  if (!(epsilon > 0.0)) throw std::invalid_argument("divergence_bb_mc: epsilon must be > 0");
  auto gen = rng::engine(seed, {0xbbc1});
  const Vec base = g(r);
  const auto n = r.size();
  double acc = 0.0;
  for (int k = 0; k < probes; ++k) {
    const Vec u = rng::rademacher(static_cast<int>(n), gen);
    acc += u.dot(g(r + epsilon * u) - base) / (epsilon * static_cast<double>(n));
  }
  return acc / probes;
}

/// Divergence-corrected update s_next = (g(r) - alpha r) / (1 - alpha).
inline Vec onsager_update_s(const Vec& r, const Vec& x_hat, double alpha) {
  if (std::abs(alpha - 1.0) <= 1e-9)
    throw std::runtime_error("onsager_update_s: degenerate divergence (alpha ~= 1)");
  return (x_hat - alpha * r) / (1.0 - alpha);
}

}  // namespace wsvamp::denoisers
