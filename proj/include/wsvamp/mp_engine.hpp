#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wsvamp/denoisers.hpp"
#include "wsvamp/lmmse.hpp"
#include "wsvamp/onsager.hpp"
#include "wsvamp/problem.hpp"

namespace wsvamp::mp {

using denoisers::DenoiserOutput;
using denoisers::PriorDescriptor;
using lmmse::SolveRule;
using ops::MeasurementModel;
using ops::Problem;

enum class Variant {
  vamp_exact,
  cg_vamp,
  ws_cg_vamp_a,
  ws_cg_vamp_b,
  ws_gd_vamp_a,
  ws_gd_vamp_b,
  mamp_style,
};

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::vamp_exact: return "vamp_exact";
    case Variant::cg_vamp: return "cg_vamp";
    case Variant::ws_cg_vamp_a: return "ws_cg_vamp_a";
    case Variant::ws_cg_vamp_b: return "ws_cg_vamp_b";
    case Variant::ws_gd_vamp_a: return "ws_gd_vamp_a";
    case Variant::ws_gd_vamp_b: return "ws_gd_vamp_b";
    default: return "mamp_style";
  }
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "vamp_exact") return Variant::vamp_exact;
  if (s == "cg_vamp") return Variant::cg_vamp;
  if (s == "ws_cg_vamp_a") return Variant::ws_cg_vamp_a;
  if (s == "ws_cg_vamp_b") return Variant::ws_cg_vamp_b;
  if (s == "ws_gd_vamp_a") return Variant::ws_gd_vamp_a;
  if (s == "ws_gd_vamp_b") return Variant::ws_gd_vamp_b;
  if (s == "mamp_style") return Variant::mamp_style;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

struct EstimatorFlags {
  bool chi_exact = false;   // spectral moments from the stored spectrum vs MC probes
  bool psi_oracle = false;  // error Gram and v_q from ground truth vs z-based estimates
  bool v_w_true = true;     // noise variance taken from the model (config-supplied oracle)
};

struct AlgorithmConfig {
  std::string name;
  Variant variant = Variant::ws_cg_vamp_b;
  int inner_iters = 1;
  int max_outer = 40;
  int damping_len = 1;  // 1 = off
  double fixed_point_tol = 1e-6;
  EstimatorFlags est;
  double c_t = 1.0;  // mamp target scaling; exposed for the invariance checks
  int mc_trials = 1000;
  int chi_order_cap = 128;
  DenoiserOutput::Method alpha_method = DenoiserOutput::Method::analytic;
  int bb_probes = 1;
  int history_cap = 60;

  void validate() const {
    if (inner_iters < 1) throw std::invalid_argument(name + ": inner_iters must be >= 1");
    if (max_outer < 1) throw std::invalid_argument(name + ": max_outer must be >= 1");
    if (max_outer > history_cap)
      throw std::invalid_argument(name + ": max_outer exceeds history_cap");
    if (damping_len < 1) throw std::invalid_argument(name + ": damping_len must be >= 1");
    if (variant == Variant::mamp_style && inner_iters != 1)
      throw std::invalid_argument(name + ": mamp_style requires inner_iters = 1");
    if (c_t != 1.0 && variant != Variant::mamp_style)
      throw std::invalid_argument(name + ": c_t is only meaningful for mamp_style");
  }

  SolveRule rule() const {
    switch (variant) {
      case Variant::ws_gd_vamp_a:
      case Variant::ws_gd_vamp_b: return SolveRule::gd_fixed;
      case Variant::mamp_style: return SolveRule::mamp_step;
      default: return SolveRule::cg;
    }
  }
  bool warm_started() const {
    return variant == Variant::ws_cg_vamp_a || variant == Variant::ws_cg_vamp_b ||
           variant == Variant::ws_gd_vamp_a || variant == Variant::ws_gd_vamp_b ||
           variant == Variant::mamp_style;
  }
  bool uses_recursion() const {
    return variant == Variant::ws_cg_vamp_b || variant == Variant::ws_gd_vamp_b;
  }
  bool uses_se_variance() const {
    return variant == Variant::ws_cg_vamp_a || variant == Variant::ws_gd_vamp_a;
  }
  bool uses_closed_gamma() const {
    return variant == Variant::cg_vamp || variant == Variant::mamp_style || uses_se_variance();
  }
};

struct TraceRow {
  int t = 0;
  double nmse = std::numeric_limits<double>::quiet_NaN();
  double v_h_hat = std::numeric_limits<double>::quiet_NaN();
  double v_h_oracle = std::numeric_limits<double>::quiet_NaN();
  double v_q_hat = std::numeric_limits<double>::quiet_NaN();
  double alpha = std::numeric_limits<double>::quiet_NaN();
  double c_t_sum = std::numeric_limits<double>::quiet_NaN();
  double gamma_l1 = std::numeric_limits<double>::quiet_NaN();
  double inner_resid = std::numeric_limits<double>::quiet_NaN();
  double s_rel_change = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
  std::uint64_t applies = 0;
  std::string status = "ok";
};

struct RunTrace {
  std::vector<TraceRow> rows;
  std::string final_status = "ok";  // ok | fixed_point | diverged
  std::string reason;
  int alpha_clamp_count = 0;
  int vh_floor_count = 0;
  bool diverged() const { return final_status == "diverged"; }
};

/// Optional per-iteration internals, for diagnostics and the verification
/// suites. Off in normal runs.
struct RunCapture {
  std::vector<onsager::StageScalars> stages;
  std::vector<Vec> r_hist, mu_hist;
  std::vector<Vec> gamma_hist, sigma_hist;
  std::vector<double> nu_hist, eta_hist, rho_hist;
  std::vector<double> psi_cond;
  onsager::SequenceTable table;
  Mat psi_estimated, psi_oracle;
  std::vector<Vec> s_hist, z_hist;
};

/// Variance-minimizing recombination weights: w ~ Psi^{-1} 1, normalized to
/// sum 1 (ridge-regularized). Falls back to the newest candidate (last slot)
/// when the block is singular.
inline Vec damp_weights(const Mat& psi_block, bool* fell_back = nullptr) {
  const int l = static_cast<int>(psi_block.rows());
  if (fell_back) *fell_back = false;
  if (l == 1) return Vec::Ones(1);
  if (!psi_block.allFinite()) {
    if (fell_back) *fell_back = true;
    Vec w = Vec::Zero(l);
    w[l - 1] = 1.0;
    return w;
  }
  Vec scale(l);
  for (int k = 0; k < l; ++k) scale[k] = 1.0 / std::sqrt(std::max(psi_block(k, k), 1e-300));
  Mat g = scale.asDiagonal() * psi_block * scale.asDiagonal();
  g.diagonal().array() += 1e-10 * std::max(std::abs(g.trace()) / l, 1e-30);
  Eigen::LDLT<Mat> ldlt(g);
  Vec w = scale.asDiagonal() * ldlt.solve(Vec(scale));
  const double sum = w.sum();
  if (ldlt.info() != Eigen::Success || !w.allFinite() || std::abs(sum) < 1e-14) {
    if (fell_back) *fell_back = true;
    w = Vec::Zero(l);
    w[l - 1] = 1.0;
    return w;
  }
  return w / sum;
}

/// Convex recombination of the last l candidates (oldest first) with
/// variance-minimizing weights from the given error-Gram block.
inline Vec damp(const std::vector<Vec>& s_candidates, const Mat& psi_block,
                bool* fell_back = nullptr) {
  if (s_candidates.empty()) throw std::invalid_argument("damp: no candidates");
  if (psi_block.rows() != static_cast<Eigen::Index>(s_candidates.size()))
    throw std::invalid_argument("damp: block size mismatch");
  const Vec w = damp_weights(psi_block, fell_back);
  Vec out = w[0] * s_candidates[0];
  for (std::size_t k = 1; k < s_candidates.size(); ++k) out += w[static_cast<int>(k)] * s_candidates[k];
  return out;
}

/// True once the relative change of s_t and of NMSE both stay below tol for
/// three consecutive iterations.
inline bool detect_fixed_point(const std::vector<TraceRow>& rows, double tol) {
  if (rows.size() < 2) throw std::invalid_argument("detect_fixed_point: need at least 2 rows");
  if (rows.size() < 4) return false;  // three NMSE changes need four rows
  for (std::size_t k = rows.size() - 3; k < rows.size(); ++k) {
    const auto& cur = rows[k];
    const auto& prev = rows[k - 1];
    if (!(cur.s_rel_change < tol)) return false;
    const double dn = std::abs(cur.nmse - prev.nmse) / std::max(std::abs(prev.nmse), 1e-300);
    if (!(dn < tol)) return false;
  }
  return true;
}

namespace detail {

inline void grow_gram(Mat& g, const std::vector<Vec>& vecs, double v_w, double delta,
                      bool oracle_inner = false, double inv_n = 0.0) {
  const int d = static_cast<int>(vecs.size());
  Mat next = Mat::Zero(d, d);
  if (g.rows() > 0) next.topLeftCorner(g.rows(), g.cols()) = g;
  for (int tau = 0; tau < d; ++tau) {
    double v = oracle_inner ? vecs[tau].dot(vecs[d - 1]) * inv_n
                            : onsager::psi_estimate(vecs[tau], vecs[d - 1], v_w, delta);
    if (tau == d - 1 && v < 1e-12) v = 1e-12;  // the diagonal is a variance
    next(tau, d - 1) = v;
    next(d - 1, tau) = v;
  }
  g = std::move(next);
}

}  // namespace detail

/// One full run of the outer loop (Eqs. r/s updates with the configured
/// solver, correction, and estimators). Owns all mutable state; concurrent
/// runs must not share Problem mutation (they do not — Problem is const).
inline RunTrace run_mp(const Problem& pb, const AlgorithmConfig& cfg, std::uint64_t run_seed,
                       RunCapture* cap = nullptr) {
  cfg.validate();
  const MeasurementModel& model = pb.model;
  const int n = model.n();
  const double nd = static_cast<double>(n);
  const double delta = model.delta();
  const Vec& x = pb.x_true;
  const double x_norm2 = x.squaredNorm();
  const SolveRule rule = cfg.rule();

  const double v_w_hat = model.noise_var();  // config-supplied oracle value

  const ops::ExtremeEigs ee = ops::extreme_eigs(model, 200, rng::derive(run_seed, {7}));
  const double lam_dag = 0.5 * (ee.lambda_min + ee.lambda_max);

  ops::SpectralInfo chi;
  if (cfg.uses_closed_gamma()) {
    int jmax = cfg.uses_se_variance() ? 2 * cfg.max_outer * cfg.inner_iters + 2
               : cfg.variant == Variant::cg_vamp ? cfg.inner_iters + 1
                                                 : cfg.max_outer * cfg.inner_iters + 1;
    jmax = std::max(2, std::min(jmax, cfg.chi_order_cap));
    chi = (cfg.est.chi_exact && model.has_spectrum())
              ? ops::exact_spectral_info(model, jmax)
              : ops::spectral_moments_mc(model, jmax, cfg.mc_trials, rng::derive(run_seed, {11}));
  }

  RunTrace trace;
  onsager::MemoryLedger led;
  led.v_w_hat = v_w_hat;
  onsager::SequenceBuilder seq;
  lmmse::WsSolverState solver;
  bool solver_live = false;

  Mat psi_est, psi_orc;
  std::vector<Vec> q_hist;  // oracle error vectors, kept only when needed
  const bool want_oracle_psi = cfg.est.psi_oracle || cap != nullptr;

  Vec s = Vec::Zero(n);
  Vec z = pb.y;  // z_0 = y - A*0
  led.s_hist.push_back(s);
  led.z_hist.push_back(z);
  if (want_oracle_psi) q_hist.push_back(s - x);

  double nmse0 = -1.0;

  for (int t = 0; t < cfg.max_outer; ++t) {
    const auto tic = std::chrono::steady_clock::now();
    const std::uint64_t applies0 = model.apply_count() + model.apply_t_count();
    TraceRow row;
    row.t = t;
    bool stop = false;
    try {
      detail::grow_gram(psi_est, led.z_hist, v_w_hat, delta);
      if (want_oracle_psi) detail::grow_gram(psi_orc, q_hist, 0.0, delta, true, 1.0 / nd);
      led.psi = cfg.est.psi_oracle ? psi_orc : psi_est;

      double v_q;
      if (cfg.est.psi_oracle)
        v_q = std::max(q_hist[t].squaredNorm() / nd, 1e-12);
      else
        v_q = (t == 0) ? pb.prior.second_moment() : std::max(psi_est(t, t), 1e-12);
      led.v_q_hat = v_q;
      const double rho = v_w_hat / v_q;

      // ---- inner solve ----
      onsager::StageScalars rec;
      rec.rho = rho;
      rec.inject = (cfg.variant == Variant::mamp_style) ? cfg.c_t : 1.0;
      Vec mu;
      if (cfg.variant == Variant::vamp_exact) {
        mu = lmmse::lmmse_exact(model, rho, z);
        row.inner_resid = 0.0;
      } else {
        if (!solver_live || !cfg.warm_started()) {
          solver = lmmse::fresh_start(model, z, rho, rule, lam_dag, rec.inject);
          solver_live = true;
          rec.b_carry = 0.0;
        } else {
          rec.b_carry = (rule == SolveRule::cg) ? solver.b_carry : 0.0;
          lmmse::warm_start(solver, model, z, rho, rec.inject);
        }
        if (cfg.uses_recursion())
          onsager::gamma_recursive(led, solver.mu, 0.0, rec.b_carry, v_w_hat, v_q, delta, true);
        const double target_norm = rec.inject * z.norm();
        for (int k = 0; k < cfg.inner_iters; ++k) {
          if (solver.residual.norm() <= 1e-12 * target_norm) break;  // already at the fixed point
          if (!lmmse::ws_inner_step(solver, model)) break;
          if (cfg.uses_recursion())
            onsager::gamma_recursive(led, solver.mu, solver.a_hist.back(), solver.b_hist.back(),
                                     v_w_hat, v_q, delta, false);
        }
        rec.a = solver.a_hist;
        rec.b = solver.b_hist;
        mu = solver.mu;
        row.inner_resid = solver.residual.norm();
      }

      // ---- correction scalars ----
      Vec gamma;
      if (cfg.variant == Variant::vamp_exact) {
        gamma = Vec::Zero(t + 1);
        gamma[t] = lmmse::exact_gamma(model, rho);
      } else if (cfg.uses_recursion()) {
        gamma = led.sigma;
      } else if (cfg.variant == Variant::cg_vamp) {
        onsager::SequenceBuilder single;
        single.push_stage(rec);
        gamma = Vec::Zero(t + 1);
        gamma[t] = onsager::gamma_closed_form(single.table(), chi)[0];
      } else {
        seq.push_stage(rec);
        gamma = onsager::gamma_closed_form(seq.table(), chi);
      }
      const double c_sum = gamma.sum();
      if (!gamma.allFinite() || std::abs(c_sum) < 1e-8)
        throw onsager::degenerate_correction_error("degenerate correction (|C_t| < 1e-8)");
      led.gamma = gamma;
      led.c_sum = c_sum;
      row.c_t_sum = c_sum;
      row.gamma_l1 = gamma.lpNorm<1>();

      // ---- corrected extrinsic mean ----
      Vec num = model.apply_t(mu);
      for (int tau = 0; tau <= t; ++tau) num += gamma[tau] * led.s_hist[tau];
      const Vec r = num / c_sum;

      // ---- intrinsic variance ----
      double v_h;
      if (cfg.uses_se_variance()) {
        v_h = onsager::se_variance(seq.table(), chi, led.psi, v_w_hat, gamma);
        if (!std::isfinite(v_h) || v_h <= 0.0)
          throw std::runtime_error("state-evolution variance estimate collapsed");
      } else {
        v_h = onsager::vh_robust(r, s, v_q, &trace.vh_floor_count);
      }
      row.v_h_hat = v_h;
      row.v_q_hat = v_q;
      row.v_h_oracle = (r - x).squaredNorm() / nd;

      // ---- denoise + divergence correction ----
      DenoiserOutput den = denoisers::denoise(r, v_h, pb.prior);
      if (cfg.alpha_method == DenoiserOutput::Method::bb_mc) {
        const auto g = [&](const Vec& in) { return denoisers::denoise(in, v_h, pb.prior).x_hat; };
        den.alpha = denoisers::divergence_bb_mc(g, r, cfg.bb_probes, 1e-4 * std::sqrt(v_h),
                                                rng::derive(run_seed, {0xa1, static_cast<std::uint64_t>(t)}));
        den.alpha_method = DenoiserOutput::Method::bb_mc;
      }
      double alpha = den.alpha;
      if (alpha < 1e-6) { alpha = 1e-6; ++trace.alpha_clamp_count; }
      if (alpha > 1.0 - 1e-6) { alpha = 1.0 - 1e-6; ++trace.alpha_clamp_count; }
      row.alpha = alpha;
      row.nmse = (den.x_hat - x).squaredNorm() / x_norm2;

      const Vec s_cand = denoisers::onsager_update_s(r, den.x_hat, alpha);
      Vec z_cand = pb.y - model.apply(s_cand);

      // ---- damping: recombine the last l iterates; z stays consistent
      // because z of a sum-one combination is the same combination of z's.
      Vec s_next, z_next;
      if (cfg.damping_len > 1) {
        const int l = std::min<int>(cfg.damping_len, t + 2);
        std::vector<Vec> cands, zc;
        for (int k = t + 2 - l; k <= t; ++k) {
          cands.push_back(led.s_hist[k]);
          zc.push_back(led.z_hist[k]);
        }
        cands.push_back(s_cand);
        zc.push_back(z_cand);
        Mat block(l, l);
        for (int a_ = 0; a_ < l; ++a_)
          for (int b_ = a_; b_ < l; ++b_) {
            const double v = onsager::psi_estimate(zc[a_], zc[b_], v_w_hat, delta);
            block(a_, b_) = v;
            block(b_, a_) = v;
          }
        const Vec w = damp_weights(block);
        s_next = w[0] * cands[0];
        z_next = w[0] * zc[0];
        for (int k = 1; k < l; ++k) {
          s_next += w[k] * cands[k];
          z_next += w[k] * zc[k];
        }
      } else {
        s_next = s_cand;
        z_next = std::move(z_cand);
      }

      if (!r.allFinite() || !s_next.allFinite() || !std::isfinite(row.nmse))
        throw std::runtime_error("non-finite iterate");
      row.s_rel_change = (s_next - s).norm() / std::max(s.norm(), 1e-300);

      s = std::move(s_next);
      z = std::move(z_next);
      led.s_hist.push_back(s);
      led.z_hist.push_back(z);
      if (want_oracle_psi) q_hist.push_back(s - x);

      if (cap) {
        cap->stages.push_back(rec);
        cap->r_hist.push_back(r);
        cap->mu_hist.push_back(mu);
        cap->gamma_hist.push_back(gamma);
        cap->sigma_hist.push_back(led.sigma);
        cap->nu_hist.push_back(led.nu);
        cap->eta_hist.push_back(led.eta);
        cap->rho_hist.push_back(rho);
        Eigen::JacobiSVD<Mat> svd(led.psi);
        const double smin = svd.singularValues().minCoeff();
        cap->psi_cond.push_back(smin > 0 ? svd.singularValues().maxCoeff() / smin
                                         : std::numeric_limits<double>::infinity());
      }

      if (t == 0) nmse0 = row.nmse;
      if (t > 0 && row.nmse > 10.0 * nmse0) {
        row.status = "diverged";
        trace.final_status = "diverged";
        trace.reason = "NMSE above 10x initial";
        stop = true;
      }
    } catch (const std::exception& e) {
      row.status = "diverged";
      trace.final_status = "diverged";
      trace.reason = e.what();
      stop = true;
    }
    const auto toc = std::chrono::steady_clock::now();
    row.wall_ms = std::chrono::duration<double, std::milli>(toc - tic).count();
    row.applies = model.apply_count() + model.apply_t_count() - applies0;
    trace.rows.push_back(std::move(row));
    if (stop) break;
    if (trace.rows.size() >= 2 && detect_fixed_point(trace.rows, cfg.fixed_point_tol)) {
      trace.final_status = "fixed_point";
      break;
    }
  }

  if (cap) {
    cap->table = seq.table();
    cap->psi_estimated = psi_est;
    cap->psi_oracle = psi_orc;
    cap->s_hist = led.s_hist;
    cap->z_hist = led.z_hist;
  }
  return trace;
}

}  // namespace wsvamp::mp
