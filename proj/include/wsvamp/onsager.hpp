#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>

#include "wsvamp/operators.hpp"

namespace wsvamp::onsager {

using ops::MeasurementModel;
using ops::SpectralInfo;

struct degenerate_correction_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Step scalars of one outer iteration of the warm-started scheme.
struct StageScalars {
  std::vector<double> a, b;  // one entry per inner step
  double rho = 1.0;
  double inject = 1.0;   // scale of the z_t term entering the direction (c_t)
  double b_carry = 0.0;  // b reused by this stage's warm start (0 at t = 0)
};

namespace detail {

inline std::vector<double> conv(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.empty() || y.empty()) return {};
  std::vector<double> out(x.size() + y.size() - 1, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] == 0.0) continue;
    for (std::size_t j = 0; j < y.size(); ++j) out[i + j] += x[i] * y[j];
  }
  return out;
}

inline void add_into(std::vector<double>& acc, const std::vector<double>& v) {
  if (acc.size() < v.size()) acc.resize(v.size(), 0.0);
  for (std::size_t k = 0; k < v.size(); ++k) acc[k] += v[k];
}

// One f/g pair through all inner levels of a stage. Level l+1 is built from
// level l with scalars (a[l], b[l]):
//   f[j] <- f[j] + a g[j]
//   g[j] <- src*d_{j,0} - rho f[j] - f[j-1] + b g[j]
struct PairHistory {
  std::vector<std::vector<double>> f, g;  // [level][power]
};

inline PairHistory run_pair(std::vector<double> f0, std::vector<double> g0, double src,
                            const StageScalars& sc) {
  PairHistory h;
  h.f.push_back(std::move(f0));
  h.g.push_back(std::move(g0));
  for (std::size_t l = 0; l < sc.a.size(); ++l) {
    const auto& fl = h.f.back();
    const auto& gl = h.g.back();
    std::vector<double> fn(std::max(fl.size(), gl.size()), 0.0);
    for (std::size_t j = 0; j < fn.size(); ++j) {
      double v = j < fl.size() ? fl[j] : 0.0;
      if (j < gl.size()) v += sc.a[l] * gl[j];
      fn[j] = v;
    }
    std::vector<double> gn(std::max(fn.size() + 1, gl.size()), 0.0);
    for (std::size_t j = 0; j < gn.size(); ++j) {
      double v = (j == 0) ? src : 0.0;
      if (j < fn.size()) v -= sc.rho * fn[j];
      if (j >= 1 && j - 1 < fn.size()) v -= fn[j - 1];
      if (j < gl.size()) v += sc.b[l] * gl[j];
      gn[j] = v;
    }
    h.f.push_back(std::move(fn));
    h.g.push_back(std::move(gn));
  }
  return h;
}

}  // namespace detail

/// Expansion coefficients of the warm-started iterate and direction in powers
/// of A A^T applied to the z history:
///   mu_t^i = sum_tau sum_k r[tau][k] (A A^T)^k z_tau,
/// with u[tau] the matching expansion of the carried direction p_t^{i-1}.
/// fz/gz, fmu/gmu, fp/gp keep the last stage's supplementary pairs per level.
struct SequenceTable {
  int t = -1;
  std::vector<std::vector<double>> r, u;
  std::vector<std::vector<double>> fz, gz, fmu, gmu, fp, gp;

  int max_power() const {
    std::size_t d = 0;
    for (const auto& row : r) d = std::max(d, row.size());
    return static_cast<int>(d) - 1;
  }
};

/// Incremental builder: one push per outer iteration, scalars as recorded by
/// the solver. The same machinery serves uniform-i tables and ragged stages
/// (early-exited inner loops).
class SequenceBuilder {
 public:
  void push_stage(const StageScalars& sc) {
    const auto z = detail::run_pair({0.0}, {sc.inject}, sc.inject, sc);
    const auto m = detail::run_pair({1.0}, {-sc.rho, -1.0}, 0.0, sc);
    const auto p = detail::run_pair({0.0}, {sc.b_carry}, 0.0, sc);
    const std::size_t top = sc.a.size();
    const std::size_t dir = top > 0 ? top - 1 : 0;  // direction is one level back
    if (table_.t < 0) {
      table_.r.assign(1, z.f[top]);
      table_.u.assign(1, z.g[dir]);
    } else {
      const std::size_t count = table_.r.size();
      std::vector<std::vector<double>> r_new(count + 1), u_new(count + 1);
      for (std::size_t tau = 0; tau < count; ++tau) {
        r_new[tau] = detail::conv(m.f[top], table_.r[tau]);
        detail::add_into(r_new[tau], detail::conv(p.f[top], table_.u[tau]));
        u_new[tau] = detail::conv(m.g[dir], table_.r[tau]);
        detail::add_into(u_new[tau], detail::conv(p.g[dir], table_.u[tau]));
      }
      r_new[count] = z.f[top];
      u_new[count] = z.g[dir];
      table_.r = std::move(r_new);
      table_.u = std::move(u_new);
    }
    table_.fz = z.f;
    table_.gz = z.g;
    table_.fmu = m.f;
    table_.gmu = m.g;
    table_.fp = p.f;
    table_.gp = p.g;
    ++table_.t;
  }

  const SequenceTable& table() const { return table_; }

 private:
  SequenceTable table_;
};

/// Builds the full table for uniform histories: a_hist[tau]/b_hist[tau] hold
/// the i step scalars of outer iteration tau, rho_hist[tau] its rho.
inline SequenceTable build_sequences(const std::vector<std::vector<double>>& a_hist,
                                     const std::vector<std::vector<double>>& b_hist,
                                     const std::vector<double>& rho_hist, int t, int i) {
  if (static_cast<int>(a_hist.size()) <= t || static_cast<int>(b_hist.size()) <= t ||
      static_cast<int>(rho_hist.size()) <= t)
    throw std::invalid_argument("build_sequences: scalar history does not cover t");
  SequenceBuilder sb;
  for (int s = 0; s <= t; ++s) {
    if (static_cast<int>(a_hist[s].size()) < i || static_cast<int>(b_hist[s].size()) < i)
      throw std::invalid_argument("build_sequences: scalar history does not cover i inner steps");
    StageScalars sc;
    sc.a.assign(a_hist[s].begin(), a_hist[s].begin() + i);
    sc.b.assign(b_hist[s].begin(), b_hist[s].begin() + i);
    sc.rho = rho_hist[s];
    sc.b_carry = (s == 0) ? 0.0 : b_hist[s - 1][i - 1];
    sb.push_stage(sc);
  }
  return sb.table();
}

/// Reconstructs mu from the table by repeated operator application and
/// returns the relative error against the solver's actual iterate.
inline double verify_expansion(const SequenceTable& table, const std::vector<Vec>& z_hist,
                               const MeasurementModel& model, const Vec& mu_actual) {
  if (table.r.size() > z_hist.size())
    throw std::invalid_argument("verify_expansion: z history shorter than table");
  Vec acc = Vec::Zero(model.m());
  for (std::size_t tau = 0; tau < table.r.size(); ++tau) {
    const auto& coef = table.r[tau];
    if (coef.empty()) continue;
    Vec v = z_hist[tau];
    for (std::size_t k = 0; k < coef.size(); ++k) {
      if (k > 0) v = model.apply(model.apply_t(v));
      if (coef[k] != 0.0) acc += coef[k] * v;
    }
  }
  const double denom = mu_actual.norm();
  const double diff = (acc - mu_actual).norm();
  return denom > 0.0 ? diff / denom : diff;
}

/// Closed-form correction scalars: gamma[tau] = sum_k r[tau][k] chi_{k+1}.
inline Vec gamma_closed_form(const SequenceTable& table, const SpectralInfo& chi) {
  if (chi.order() < table.max_power() + 1)
    throw std::invalid_argument("gamma_closed_form: insufficient moment order");
  Vec gamma(static_cast<int>(table.r.size()));
  for (std::size_t tau = 0; tau < table.r.size(); ++tau) {
    double s = 0.0;
    const auto& coef = table.r[tau];
    for (std::size_t k = 0; k < coef.size(); ++k) s += coef[k] * chi.chi[k + 1];
    gamma[static_cast<int>(tau)] = s;
  }
  return gamma;
}

/// Predicted intrinsic variance:
///   v_h = C^{-2} (Omega - gamma^T Psi gamma),  C = sum gamma,
///   Omega = sum_{tau,tau'} sum_{j,k} r_tau[j] r_tau'[k]
///             (psi_{tau,tau'} chi_{j+k+2} + v_w chi_{j+k+1}).
inline double se_variance(const SequenceTable& table, const SpectralInfo& chi, const Mat& psi,
                          double v_w, const Vec& gamma) {
  const int count = static_cast<int>(table.r.size());
  if (psi.rows() < count || psi.cols() < count)
    throw std::invalid_argument("se_variance: psi block too small");
  if (gamma.size() != count) throw std::invalid_argument("se_variance: gamma size mismatch");
  const double c = gamma.sum();
  if (!(std::abs(c) >= 1e-8)) throw degenerate_correction_error("se_variance: |C_t| below 1e-8");
  if (chi.order() < 2 * table.max_power() + 2)
    throw std::invalid_argument("se_variance: insufficient moment order");
  double omega = 0.0;
  for (int tau = 0; tau < count; ++tau) {
    for (int tp = tau; tp < count; ++tp) {
      const auto prod = detail::conv(table.r[tau], table.r[tp]);
      double s = 0.0;
      for (std::size_t q = 0; q < prod.size(); ++q)
        s += prod[q] * (psi(tau, tp) * chi.chi[q + 2] + v_w * chi.chi[q + 1]);
      omega += (tp == tau) ? s : 2.0 * s;
    }
  }
  double quad = gamma.dot(psi.topLeftCorner(count, count) * gamma);
  return (omega - quad) / (c * c);
}

/// Gram estimate psi_{tau,tau'} ~= (1/N) z_tau^T z_tau' - delta v_w.
inline double psi_estimate(const Vec& z_a, const Vec& z_b, double v_w, double delta) {
  if (z_a.size() != z_b.size()) throw std::invalid_argument("psi_estimate: dimension mismatch");
  const double n = static_cast<double>(z_a.size()) / delta;
  return z_a.dot(z_b) / n - delta * v_w;
}

/// Robust variance estimate v_h ~= (1/N)|r - s|^2 - v_q, floored at 1e-12.
inline double vh_robust(const Vec& r, const Vec& s, double v_q_hat, int* floor_count = nullptr) {
  const double v = (r - s).squaredNorm() / static_cast<double>(r.size()) - v_q_hat;
  if (v < 1e-12) {
    if (floor_count) ++*floor_count;
    return 1e-12;
  }
  return v;
}

/// Histories and correction state of one run. Single-owner mutable.
struct MemoryLedger {
  std::vector<Vec> s_hist;  // s_0 .. s_t
  std::vector<Vec> z_hist;  // z_tau = y - A s_tau
  Mat psi;                  // (t+1)x(t+1) error Gram (estimated or oracle)
  Vec gamma;                // last correction vector
  double c_sum = 0.0;       // C_t
  // nu/sigma/eta recursion state
  double nu = 0.0;        // tracks (1/N) w^T mu
  double eta = 0.0;       // tracks (1/N) w^T p
  double eta_prev = 0.0;  // eta one inner level back (the boundary carry)
  Vec sigma;              // latest sigma (gamma estimate)
  double v_q_hat = 0.0;
  double v_w_hat = 0.0;
};

namespace detail {

// Ridge applied to the equilibrated Gram, as a fraction of its unit
// diagonal. Estimated Grams carry O(sqrt(chi_2/N)) entry noise, so the
// default is matched to the desk-scale noise level rather than to rounding.
inline double& psi_ridge() {
  static double v = 1e-3;
  return v;
}

// Jacobi-equilibrated ridged solve. The Gram rows scale like
// sqrt(psi_tt psi_t't'), which spans orders of magnitude as the run
// converges; equilibration makes the ridge meaningful on every row instead
// of only the largest.
inline Vec ridged_solve(const Mat& psi, const Vec& rhs) {
  const int d = static_cast<int>(rhs.size());
  Vec scale(d);
  for (int k = 0; k < d; ++k) scale[k] = 1.0 / std::sqrt(std::max(psi(k, k), 1e-300));
  Mat g = scale.asDiagonal() * psi.topLeftCorner(d, d) * scale.asDiagonal();
  g.diagonal().array() += psi_ridge() * (g.trace() / d);
  Eigen::LDLT<Mat> ldlt(g);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("ridged_solve: singular Psi after regularization");
  Vec out = scale.asDiagonal() * ldlt.solve(Vec(scale.asDiagonal() * rhs));
  if (!out.allFinite()) throw std::runtime_error("ridged_solve: non-finite solve");
  return out;
}

}  // namespace detail

/// One update of the moment-free correction recursion
///   nu^{i+1}    = nu^i + a^i eta^i
///   sigma^{i+1} = Psi^{-1} ((1/N) Z^T mu^{i+1} - nu^{i+1} 1)
///   eta^{i+1}   = v_w (delta - nu^{i+1}/v_q - sum(sigma^{i+1})) + b^i eta^i
/// or, at an outer boundary, the t>0 re-initialization (b_i plays the role of
/// the carried b). At t = 0 the state starts as nu = 0, eta = delta v_w.
/// Returns the refreshed sigma.
///
/// The sigma term enters as the signed sum: eta tracks (1/N) w^T p, and the
/// w-component of A A^T mu contributes v_w * sum(sigma). The components have
/// mixed signs for warm-started CG, so an absolute-value norm here would bias
/// eta and the bias compounds through the b-weighted memory.
inline Vec gamma_recursive(MemoryLedger& led, const Vec& mu, double a_i, double b_i, double v_w,
                           double v_q, double delta, bool is_outer_boundary) {
  if (!(v_q > 0.0)) throw std::invalid_argument("gamma_recursive: v_q must be > 0");
  const int count = static_cast<int>(led.z_hist.size());
  if (led.psi.rows() < count) throw std::invalid_argument("gamma_recursive: psi smaller than history");
  const double n = static_cast<double>(led.z_hist[0].size()) / delta;
  auto rhs_for = [&](const Vec& m, double nu) {
    Vec rhs(count);
    for (int tau = 0; tau < count; ++tau) rhs[tau] = led.z_hist[tau].dot(m) / n - nu;
    return rhs;
  };
  if (is_outer_boundary) {
    if (count == 1 && led.sigma.size() == 0) {
      led.nu = 0.0;
      led.eta = delta * v_w;
    } else {
      led.eta = v_w * (delta - led.nu / v_q - led.sigma.sum()) + b_i * led.eta_prev;
    }
    led.eta_prev = led.eta;
    led.sigma = detail::ridged_solve(led.psi, rhs_for(mu, led.nu));
  } else {
    led.nu += a_i * led.eta;
    led.sigma = detail::ridged_solve(led.psi, rhs_for(mu, led.nu));
    const double eta_old = led.eta;
    led.eta = v_w * (delta - led.nu / v_q - led.sigma.sum()) + b_i * eta_old;
    led.eta_prev = eta_old;
  }
  if (!std::isfinite(led.nu) || !std::isfinite(led.eta))
    throw std::runtime_error("gamma_recursive: non-finite recursion scalars");
  return led.sigma;
}

}  // namespace wsvamp::onsager
