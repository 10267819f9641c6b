#pragma once

// Test-only oracles, kept independent of the library's solver internals.

#include <vector>

#include "wsvamp/lmmse.hpp"
#include "wsvamp/onsager.hpp"
#include "wsvamp/operators.hpp"
#include "wsvamp/rng.hpp"

namespace testsup {

using wsvamp::Mat;
using wsvamp::Vec;
using wsvamp::ops::MeasurementModel;
using wsvamp::onsager::StageScalars;

inline Mat materialize(const MeasurementModel& model) {
  Mat a(model.m(), model.n());
  for (int j = 0; j < model.n(); ++j) {
    Vec e = Vec::Zero(model.n());
    e[j] = 1.0;
    a.col(j) = model.apply(e);
  }
  return a;
}

/// Re-runs the warm-started scheme from scratch with frozen step scalars.
/// Every stage recomputes its residual directly from z and mu, so this is an
/// independent path from the incremental solver; the map z -> mu is linear.
inline Vec replay_trajectory(const MeasurementModel& model, const std::vector<StageScalars>& stages,
                             const std::vector<Vec>& z_hist) {
  Vec mu = Vec::Zero(model.m());
  Vec p = Vec::Zero(model.m());
  Vec p_prev = Vec::Zero(model.m());
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& sc = stages[s];
    Vec res = sc.inject * z_hist[s] - sc.rho * mu - model.apply(model.apply_t(mu));
    p = (s == 0) ? res : Vec(res + sc.b_carry * p_prev);
    for (std::size_t l = 0; l < sc.a.size(); ++l) {
      const Vec wp = sc.rho * p + model.apply(model.apply_t(p));
      mu += sc.a[l] * p;
      res -= sc.a[l] * wp;
      p_prev = p;
      p = res + sc.b[l] * p;
    }
  }
  return mu;
}

/// Monte Carlo estimate of the correction scalar gamma[tau] for the frozen
/// trajectory: the exact linear response of A^T mu to a perturbation of
/// s_tau, probed with Rademacher directions (positive orientation, i.e. the
/// negative of the literal divergence).
inline double gamma_mc_perturbation(const MeasurementModel& model,
                                    const std::vector<StageScalars>& stages,
                                    const std::vector<Vec>& z_hist, std::size_t tau, int probes,
                                    std::uint64_t seed) {
  auto g = wsvamp::rng::engine(seed, {0x6a3, tau});
  const double n = static_cast<double>(model.n());
  std::vector<Vec> unit(z_hist.size(), Vec());
  for (std::size_t k = 0; k < z_hist.size(); ++k) unit[k] = Vec::Zero(model.m());
  double acc = 0.0;
  for (int k = 0; k < probes; ++k) {
    const Vec u = wsvamp::rng::rademacher(model.n(), g);
    unit[tau] = model.apply(u);
    const Vec dmu = replay_trajectory(model, stages, unit);
    acc += u.dot(model.apply_t(dmu)) / n;
  }
  return acc / probes;
}

/// Deterministic version of the perturbation oracle: the same linear
/// response summed over every basis direction (exact trace, no probes).
/// Affordable only at small dimensions.
inline double gamma_exact_response(const MeasurementModel& model,
                                   const std::vector<StageScalars>& stages,
                                   const std::vector<Vec>& z_hist, std::size_t tau) {
  const int n = model.n();
  std::vector<Vec> unit(z_hist.size(), Vec::Zero(model.m()));
  double acc = 0.0;
  for (int j = 0; j < n; ++j) {
    Vec e = Vec::Zero(n);
    e[j] = 1.0;
    unit[tau] = model.apply(e);
    const Vec dmu = replay_trajectory(model, stages, unit);
    acc += model.apply_t(dmu)[j];
  }
  return acc / static_cast<double>(n);
}

struct ScriptResult {
  std::vector<StageScalars> stages;
  std::vector<Vec> z_hist;
  Vec mu;
  wsvamp::lmmse::WsSolverState state;
};

/// Drives the real warm-started solver over an externally supplied z/rho
/// schedule and records the per-stage scalars.
inline ScriptResult run_ws_script(const MeasurementModel& model, wsvamp::lmmse::SolveRule rule,
                                  const std::vector<Vec>& z_hist,
                                  const std::vector<double>& rho_hist, int inner,
                                  double lam_dag) {
  using namespace wsvamp::lmmse;
  ScriptResult out;
  out.z_hist = z_hist;
  WsSolverState st;
  for (std::size_t t = 0; t < z_hist.size(); ++t) {
    StageScalars sc;
    sc.rho = rho_hist[t];
    if (t == 0) {
      st = fresh_start(model, z_hist[0], rho_hist[0], rule, lam_dag);
    } else {
      sc.b_carry = (rule == SolveRule::cg) ? st.b_carry : 0.0;
      warm_start(st, model, z_hist[t], rho_hist[t]);
    }
    for (int k = 0; k < inner; ++k)
      if (!ws_inner_step(st, model)) break;
    sc.a = st.a_hist;
    sc.b = st.b_hist;
    out.stages.push_back(sc);
  }
  out.mu = st.mu;
  out.state = st;
  return out;
}

/// Centered finite-difference divergence of a separable denoiser.
template <typename Fn>
double divergence_fd(const Fn& g, const Vec& r, double eps) {
  const auto n = r.size();
  double acc = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    Vec hi = r, lo = r;
    hi[k] += eps;
    lo[k] -= eps;
    acc += (g(hi)[k] - g(lo)[k]) / (2.0 * eps);
  }
  return acc / static_cast<double>(n);
}

}  // namespace testsup
