#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Cholesky>

#include "wsvamp/operators.hpp"

namespace wsvamp::lmmse {

using ops::MeasurementModel;

enum class SolveRule { gd_fixed, cg, mamp_step };

/// Exact solve mu = (rho I + A A^T)^{-1} z. Diagonal fast path for operators
/// whose A A^T is diagonal in the standard basis, SPD factorization otherwise.
inline Vec lmmse_exact(const MeasurementModel& model, double rho, const Vec& z) {
  if (!(rho > 0.0)) throw std::invalid_argument("lmmse_exact: rho must be > 0");
  if (z.size() != model.m()) throw std::invalid_argument("lmmse_exact: dimension mismatch");
  if (model.diagonal_gram())
    return z.array() / (model.spectrum().array() + rho);
  if (const Mat* g = model.gram()) {
    Mat w = *g;
    w.diagonal().array() += rho;
    return Eigen::LLT<Mat>(w).solve(z);
  }
  throw std::invalid_argument("lmmse_exact: operator has neither diagonal gram nor dense matrix");
}

/// Correction scalar of the exact solve, (1/N) Tr{(rho I + A A^T)^{-1} A A^T}.
inline double exact_gamma(const MeasurementModel& model, double rho) {
  const Vec& sp = model.spectrum();
  return (sp.array() / (sp.array() + rho)).sum() / model.n();
}

/// State of the warm-started first-order scheme on W_t mu = c * z_t,
/// W_t = rho_t I + A A^T. Single-owner mutable; one instance per run.
///
/// ata_mu carries A A^T mu across steps and outer boundaries so that warm
/// starts recompute the residual without touching the operator.
struct WsSolverState {
  Vec mu;        // current iterate mu_t^i
  Vec p;         // current direction p_t^i
  Vec p_prev;    // direction one step back (the warm-start carry)
  Vec residual;  // c z - W mu, maintained incrementally
  Vec ata_mu;    // A A^T mu, maintained incrementally
  int inner_count = 0;
  double rho = 1.0;
  SolveRule rule = SolveRule::cg;
  double c_t = 1.0;          // target scaling (mamp only; 1 otherwise)
  double b_carry = 0.0;      // last computed b of the current/previous stage
  double lambda_dagger = 0.0;
  std::vector<double> a_hist, b_hist;  // step scalars of the current stage
};

inline WsSolverState fresh_start(const MeasurementModel& model, const Vec& z, double rho,
                                 SolveRule rule, double lambda_dagger, double c = 1.0) {
  if (!(rho > 0.0)) throw std::invalid_argument("fresh_start: rho must be > 0");
  WsSolverState st;
  st.rule = rule;
  st.rho = rho;
  st.c_t = c;
  st.lambda_dagger = lambda_dagger;
  st.mu = Vec::Zero(model.m());
  st.ata_mu = Vec::Zero(model.m());
  st.residual = c * z;
  st.p = st.residual;  // p_0^0 = z_0
  st.p_prev = Vec::Zero(model.m());
  return st;
}

/// Warm start into a new outer iteration: mu carries over, the residual is
/// recomputed against the new z and rho, and the direction restarts as
/// p^0 = (c z - W mu) + b_carry * p_prev.
inline void warm_start(WsSolverState& st, const MeasurementModel& model, const Vec& z_new,
                       double rho_new, double c_new = 1.0) {
  if (!(rho_new > 0.0)) throw std::invalid_argument("warm_start: rho must be > 0");
  if (z_new.size() != model.m()) throw std::invalid_argument("warm_start: dimension mismatch");
  st.rho = rho_new;
  st.c_t = c_new;
  st.residual = c_new * z_new - rho_new * st.mu - st.ata_mu;
  const double b = (st.rule == SolveRule::cg) ? st.b_carry : 0.0;
  if (b != 0.0)
    st.p = st.residual + b * st.p_prev;
  else
    st.p = st.residual;
  st.inner_count = 0;
  st.a_hist.clear();
  st.b_hist.clear();
}

/// One update of (mu, p): exactly one application of W (A^T then A, plus the
/// rho-scaled addition). Returns false without stepping when the residual is
/// exactly zero (converged no-op).
inline bool ws_inner_step(WsSolverState& st, const MeasurementModel& model) {
  const double rr = st.residual.squaredNorm();
  if (rr == 0.0) return false;
  const Vec atp = model.apply_t(st.p);
  const Vec aap = model.apply(atp);
  const Vec wp = st.rho * st.p + aap;
  double a, b;
  if (st.rule == SolveRule::gd_fixed || st.rule == SolveRule::mamp_step) {
    a = 1.0 / (st.rho + st.lambda_dagger);
    b = 0.0;
    st.mu += a * st.p;
    st.ata_mu += a * aap;
    st.residual -= a * wp;
    st.p_prev = st.p;
    st.p = st.residual;  // p^{i+1} = -grad f(mu^{i+1})
  } else {
    const double pwp = st.p.dot(wp);
    if (!(pwp > 0.0)) throw std::runtime_error("ws_inner_step: p^T W p <= 0, SPD system broken");
    a = rr / pwp;
    st.mu += a * st.p;
    st.ata_mu += a * aap;
    st.residual -= a * wp;
    b = st.residual.squaredNorm() / rr;
    st.p_prev = st.p;
    st.p = st.residual + b * st.p;
  }
  st.b_carry = b;
  st.a_hist.push_back(a);
  st.b_hist.push_back(b);
  ++st.inner_count;
  return true;
}

/// The one-step memory update mu^1 = (I - a W) mu_prev + c a z with
/// a = 1/(rho + lambda_dagger): a warm start onto the c-scaled target
/// followed by one fixed-size gradient step.
inline void mamp_step(WsSolverState& st, const MeasurementModel& model, const Vec& z,
                      double rho, double c) {
  st.rule = SolveRule::mamp_step;
  warm_start(st, model, z, rho, c);
  ws_inner_step(st, model);
}

/// Direct evaluation of the same update in its (I - a W) mu_prev + c a z
/// form, for cross-checking against mamp_step.
inline Vec mamp_affine_form(const MeasurementModel& model, const Vec& mu_prev, const Vec& z,
                            double rho, double lambda_dagger, double c) {
  const double a = 1.0 / (rho + lambda_dagger);
  const Vec w_mu = rho * mu_prev + model.apply(model.apply_t(mu_prev));
  return mu_prev - a * w_mu + (c * a) * z;
}

}  // namespace wsvamp::lmmse
