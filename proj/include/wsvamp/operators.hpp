#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <fftw3.h>
#include <json.hpp>

#include "wsvamp/rng.hpp"

namespace wsvamp::ops {

enum class OpKind { dense_roi, fijl, custom };

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::dense_roi: return "dense_roi";
    case OpKind::fijl: return "fijl";
    default: return "custom";
  }
}

/// Matrix-free linear map R^N -> R^M with transpose.
class LinearOp {
 public:
  virtual ~LinearOp() = default;
  virtual int rows() const = 0;  // M
  virtual int cols() const = 0;  // N
  virtual void apply(const Vec& x, Vec& y) const = 0;    // y = A x
  virtual void apply_t(const Vec& y, Vec& x) const = 0;  // x = A^T y
};

class DenseOp final : public LinearOp {
 public:
  explicit DenseOp(Mat a) : a_(std::move(a)) {}
  int rows() const override { return static_cast<int>(a_.rows()); }
  int cols() const override { return static_cast<int>(a_.cols()); }
  void apply(const Vec& x, Vec& y) const override { y.noalias() = a_ * x; }
  void apply_t(const Vec& y, Vec& x) const override { x.noalias() = a_.transpose() * y; }
  const Mat& matrix() const { return a_; }

  // A A^T, built on first use. The op is otherwise immutable.
  const Mat& gram() const {
    std::call_once(gram_once_, [this] { gram_ = a_ * a_.transpose(); });
    return gram_;
  }

 private:
  Mat a_;
  mutable Mat gram_;
  mutable std::once_flag gram_once_;
};

/// Fast operator S P H D: random sign flips, orthonormal DCT-II, random
/// permutation, then a rectangular diagonal of singular values. A A^T is
/// diagonal (= S S^T), so the squared singular values double as the exact
/// spectrum of A A^T.
class FijlOp final : public LinearOp {
 public:
  FijlOp(int n, int m, Vec sign, std::vector<int> perm, Vec sv)
      : n_(n), m_(m), sign_(std::move(sign)), perm_(std::move(perm)), sv_(std::move(sv)) {
    static std::mutex plan_mutex;  // fftw planning is not thread-safe
    std::lock_guard<std::mutex> lock(plan_mutex);
    buf_ = fftw_alloc_real(static_cast<std::size_t>(n_));
    fwd_ = fftw_plan_r2r_1d(n_, buf_, buf_, FFTW_REDFT10, FFTW_ESTIMATE);
    inv_ = fftw_plan_r2r_1d(n_, buf_, buf_, FFTW_REDFT01, FFTW_ESTIMATE);
  }
  FijlOp(const FijlOp&) = delete;
  FijlOp& operator=(const FijlOp&) = delete;
  ~FijlOp() override {
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
    fftw_free(buf_);
  }

  int rows() const override { return m_; }
  int cols() const override { return n_; }

  void apply(const Vec& x, Vec& y) const override {
    double* b = fftw_alloc_real(static_cast<std::size_t>(n_));
    for (int k = 0; k < n_; ++k) b[k] = x[k] * sign_[k];
    fftw_execute_r2r(fwd_, b, b);
    // REDFT10 output -> orthonormal DCT-II coefficients
    const double s0 = 0.5 / std::sqrt(static_cast<double>(n_));
    const double sk = 1.0 / std::sqrt(2.0 * n_);
    y.resize(m_);
    for (int k = 0; k < m_; ++k) {
      const int j = perm_[k];
      y[k] = sv_[k] * b[j] * (j == 0 ? s0 : sk);
    }
    fftw_free(b);
  }

  void apply_t(const Vec& y, Vec& x) const override {
    double* b = fftw_alloc_real(static_cast<std::size_t>(n_));
    std::fill(b, b + n_, 0.0);
    const double s0 = 1.0 / std::sqrt(static_cast<double>(n_));
    const double sk = 1.0 / std::sqrt(2.0 * n_);
    for (int k = 0; k < m_; ++k) {
      const int j = perm_[k];
      b[j] = sv_[k] * y[k] * (j == 0 ? s0 : sk);
    }
    fftw_execute_r2r(inv_, b, b);
    x.resize(n_);
    for (int k = 0; k < n_; ++k) x[k] = b[k] * sign_[k];
    fftw_free(b);
  }

  const Vec& singular_values() const { return sv_; }

 private:
  int n_, m_;
  Vec sign_;
  std::vector<int> perm_;
  Vec sv_;
  double* buf_;
  fftw_plan fwd_, inv_;
};

class CallbackOp final : public LinearOp {
 public:
  using Fn = std::function<void(const Vec&, Vec&)>;
  CallbackOp(int n, int m, Fn fwd, Fn bwd) : n_(n), m_(m), fwd_(std::move(fwd)), bwd_(std::move(bwd)) {}
  int rows() const override { return m_; }
  int cols() const override { return n_; }
  void apply(const Vec& x, Vec& y) const override { fwd_(x, y); }
  void apply_t(const Vec& y, Vec& x) const override { bwd_(y, x); }

 private:
  int n_, m_;
  Fn fwd_, bwd_;
};

/// Measurement operator plus its metadata; immutable after construction and
/// shareable across concurrent runs. Application counters are diagnostics
/// shared between copies.
class MeasurementModel {
 public:
  struct Counters {
    std::atomic<std::uint64_t> apply{0};
    std::atomic<std::uint64_t> apply_t{0};
  };

  MeasurementModel() = default;
  MeasurementModel(OpKind kind, std::shared_ptr<const LinearOp> op, double kappa,
                   std::uint64_t seed, Vec spectrum, double noise_var = 0.0)
      : kind_(kind),
        op_(std::move(op)),
        kappa_(kappa),
        seed_(seed),
        spectrum_(std::move(spectrum)),
        noise_var_(noise_var),
        counters_(std::make_shared<Counters>()) {}

  int n() const { return op_->cols(); }
  int m() const { return op_->rows(); }
  double delta() const { return static_cast<double>(m()) / static_cast<double>(n()); }
  OpKind kind() const { return kind_; }
  double kappa() const { return kappa_; }
  std::uint64_t seed() const { return seed_; }
  double noise_var() const { return noise_var_; }
  void set_noise_var(double v) { noise_var_ = v; }

  Vec apply(const Vec& x) const {
    if (x.size() != n()) throw std::invalid_argument("apply: dimension mismatch");
    counters_->apply.fetch_add(1, std::memory_order_relaxed);
    Vec y;
    op_->apply(x, y);
    return y;
  }
  Vec apply_t(const Vec& y) const {
    if (y.size() != m()) throw std::invalid_argument("apply_t: dimension mismatch");
    counters_->apply_t.fetch_add(1, std::memory_order_relaxed);
    Vec x;
    op_->apply_t(y, x);
    return x;
  }

  bool has_spectrum() const { return spectrum_.size() > 0; }
  /// Squared singular values of A (the eigenvalues of A A^T), size M.
  const Vec& spectrum() const {
    if (!has_spectrum()) throw std::logic_error("model has no stored spectrum");
    return spectrum_;
  }

  /// A A^T for dense operators (used by the exact solve); null otherwise.
  const Mat* gram() const {
    if (auto d = dynamic_cast<const DenseOp*>(op_.get())) return &d->gram();
    return nullptr;
  }
  bool diagonal_gram() const { return kind_ == OpKind::fijl; }

  std::uint64_t apply_count() const { return counters_->apply.load(); }
  std::uint64_t apply_t_count() const { return counters_->apply_t.load(); }

  const LinearOp& op() const { return *op_; }

 private:
  OpKind kind_ = OpKind::custom;
  std::shared_ptr<const LinearOp> op_;
  double kappa_ = 1.0;
  std::uint64_t seed_ = 0;
  Vec spectrum_;
  double noise_var_ = 0.0;
  std::shared_ptr<Counters> counters_ = std::make_shared<Counters>();
};

namespace detail {

// QR of an i.i.d. Gaussian block with the R-diagonal sign correction gives an
// exactly Haar-distributed orthonormal frame.
inline Mat haar_frame(int rows, int cols, std::mt19937_64& g) {
  Mat gmat(rows, cols);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) gmat(i, j) = d(g);
  Eigen::HouseholderQR<Mat> qr(gmat);
  Mat q = qr.householderQ() * Mat::Identity(rows, cols);
  for (int j = 0; j < cols; ++j)
    if (qr.matrixQR()(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

// Geometric singular values s_k = ratio^k with s_0/s_{m-1} = kappa, rescaled
// so that (1/n) sum s_k^2 = 1.
inline Vec geometric_singulars(int n, int m, double kappa) {
  Vec s(m);
  if (m == 1 || kappa == 1.0) {
    s.setOnes();
  } else {
    const double ratio = std::pow(kappa, -1.0 / (m - 1));
    double v = 1.0;
    for (int k = 0; k < m; ++k, v *= ratio) s[k] = v;
  }
  s *= std::sqrt(static_cast<double>(n) / s.squaredNorm());
  return s;
}

}  // namespace detail

/// Dense right-orthogonally-invariant model A = U diag(s) V^T with Haar U, V
/// and geometric singular values of condition number kappa.
inline MeasurementModel make_dense_roi(int n, int m, double kappa, std::uint64_t seed) {
  if (m <= 0 || n <= 0 || m >= n) throw std::invalid_argument("make_dense_roi: need 0 < m < n");
  if (kappa < 1.0) throw std::invalid_argument("make_dense_roi: kappa must be >= 1");
  auto g = rng::engine(seed, {0x0ae1});
  const Vec s = detail::geometric_singulars(n, m, kappa);
  const Mat u = detail::haar_frame(m, m, g);
  const Mat v = detail::haar_frame(n, m, g);
  Mat a = u * s.asDiagonal() * v.transpose();
  Vec spectrum = s.array().square();
  return MeasurementModel(OpKind::dense_roi, std::make_shared<DenseOp>(std::move(a)), kappa,
                          seed, std::move(spectrum));
}

/// Fast ill-conditioned operator S P H D; n must be a power of two.
inline MeasurementModel make_fijl(int n, int m, double kappa, std::uint64_t seed) {
  if (n <= 1 || (n & (n - 1)) != 0) throw std::invalid_argument("make_fijl: n must be a power of two");
  if (m <= 0 || m > n) throw std::invalid_argument("make_fijl: need 0 < m <= n");
  if (kappa < 1.0) throw std::invalid_argument("make_fijl: kappa must be >= 1");
  auto g = rng::engine(seed, {0x0f11});
  Vec sign = rng::rademacher(n, g);
  std::vector<int> perm(n);
  for (int k = 0; k < n; ++k) perm[k] = k;
  std::shuffle(perm.begin(), perm.end(), g);
  perm.resize(m);
  Vec s = detail::geometric_singulars(n, m, kappa);
  Vec spectrum = s.array().square();
  return MeasurementModel(OpKind::fijl,
                          std::make_shared<FijlOp>(n, m, std::move(sign), std::move(perm), std::move(s)),
                          kappa, seed, std::move(spectrum));
}

inline MeasurementModel make_custom(int n, int m, CallbackOp::Fn fwd, CallbackOp::Fn bwd,
                                    double kappa = 1.0, std::uint64_t seed = 0) {
  return MeasurementModel(OpKind::custom, std::make_shared<CallbackOp>(n, m, std::move(fwd), std::move(bwd)),
                          kappa, seed, Vec());
}

enum class Provenance { exact, monte_carlo };

/// Normalized spectral moments chi_j = (1/N) Tr{(A A^T)^j} plus the extreme
/// eigenvalues of A A^T. chi[j] holds chi_j; chi[0] = M/N by definition.
struct SpectralInfo {
  Vec chi;
  double lambda_max = 0.0;
  double lambda_min = 0.0;
  Provenance provenance = Provenance::exact;
  int probes = 0;

  double lambda_dagger() const { return 0.5 * (lambda_max + lambda_min); }
  int order() const { return static_cast<int>(chi.size()) - 1; }
};

struct ExtremeEigs {
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  bool converged = true;
};

/// Extreme eigenvalues of A A^T: exact read-off when the spectrum is stored,
/// otherwise power iteration (on A A^T, then on the shifted complement).
/// Non-convergence is a soft flag, not an error.
inline ExtremeEigs extreme_eigs(const MeasurementModel& model, int iters = 200, std::uint64_t seed = 0) {
  if (iters < 1) throw std::invalid_argument("extreme_eigs: iters must be >= 1");
  if (model.has_spectrum()) {
    const Vec& sp = model.spectrum();
    return {sp.minCoeff(), sp.maxCoeff(), true};
  }
  auto g = rng::engine(seed, {0xe195});
  auto power = [&](const std::function<Vec(const Vec&)>& mv, bool& ok) {
    Vec v = rng::gaussian(model.m(), g);
    v.normalize();
    double lam = 0.0;
    ok = false;
    for (int k = 0; k < iters; ++k) {
      Vec w = mv(v);
      const double next = v.dot(w);
      const double nw = w.norm();
      if (nw == 0.0) { lam = 0.0; ok = true; break; }
      v = w / nw;
      if (k > 0 && std::abs(next - lam) <= 1e-6 * std::abs(next)) { lam = next; ok = true; break; }
      lam = next;
    }
    return lam;
  };
  bool ok_max = false, ok_min = false;
  const double lmax = power([&](const Vec& v) { return Vec(model.apply(model.apply_t(v))); }, ok_max);
  const double shifted = power(
      [&](const Vec& v) { return Vec(lmax * v - model.apply(model.apply_t(v))); }, ok_min);
  return {lmax - shifted, lmax, ok_max && ok_min};
}

/// Exact moments from the stored spectrum.
inline SpectralInfo exact_spectral_info(const MeasurementModel& model, int j_max) {
  if (j_max < 1) throw std::invalid_argument("exact_spectral_info: j_max must be >= 1");
  const Vec& sp = model.spectrum();
  const double n = model.n();
  SpectralInfo info;
  info.chi.resize(j_max + 1);
  info.chi[0] = model.delta();
  Vec pw = Vec::Ones(sp.size());
  for (int j = 1; j <= j_max; ++j) {
    pw = pw.cwiseProduct(sp);
    info.chi[j] = pw.sum() / n;
  }
  info.lambda_max = sp.maxCoeff();
  info.lambda_min = sp.minCoeff();
  info.provenance = Provenance::exact;
  return info;
}

/// Hutchinson estimate of chi_j with Rademacher probes, using only A and A^T:
/// chi_j ~= (1/(N trials)) sum_k u_k^T (A A^T)^j u_k. Partial powers are
/// reused, so each probe costs j_max operator pairs.
inline SpectralInfo spectral_moments_mc(const MeasurementModel& model, int j_max, int trials,
                                        std::uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("spectral_moments_mc: trials must be >= 1");
  if (j_max < 1) throw std::invalid_argument("spectral_moments_mc: j_max must be >= 1");
  auto g = rng::engine(seed, {0x301d});
  SpectralInfo info;
  info.chi = Vec::Zero(j_max + 1);
  for (int k = 0; k < trials; ++k) {
    const Vec u = rng::rademacher(model.m(), g);
    Vec v = u;
    for (int j = 1; j <= j_max; ++j) {
      v = model.apply(model.apply_t(v));
      info.chi[j] += u.dot(v);
      if (!std::isfinite(info.chi[j])) break;  // overflowed high-order power
    }
  }
  info.chi /= static_cast<double>(model.n()) * trials;
  info.chi[0] = model.delta();
  const ExtremeEigs ee = extreme_eigs(model, 200, rng::derive(seed, {0x77}));
  info.lambda_max = ee.lambda_max;
  info.lambda_min = ee.lambda_min;
  info.provenance = Provenance::monte_carlo;
  info.probes = trials;
  return info;
}

/// Max adjoint-test error |u^T(Av) - (A^T u)^T v| / (|u||v|) over random pairs.
inline double adjoint_rel_error(const MeasurementModel& model, int pairs, std::uint64_t seed) {
  auto g = rng::engine(seed, {0xad70});
  double worst = 0.0;
  for (int k = 0; k < pairs; ++k) {
    const Vec u = rng::gaussian(model.m(), g);
    const Vec v = rng::gaussian(model.n(), g);
    const double lhs = u.dot(model.apply(v));
    const double rhs = model.apply_t(u).dot(v);
    worst = std::max(worst, std::abs(lhs - rhs) / (u.norm() * v.norm()));
  }
  return worst;
}

inline nlohmann::json descriptor(const MeasurementModel& model) {
  return {{"kind", to_string(model.kind())}, {"n", model.n()},       {"m", model.m()},
          {"kappa", model.kappa()},          {"seed", model.seed()}, {"noise_var", model.noise_var()}};
}

inline MeasurementModel from_descriptor(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  const int n = j.at("n").get<int>();
  const int m = j.at("m").get<int>();
  const double kappa = j.at("kappa").get<double>();
  const std::uint64_t seed = j.at("seed").get<std::uint64_t>();
  MeasurementModel model;
  if (kind == "dense_roi") model = make_dense_roi(n, m, kappa, seed);
  else if (kind == "fijl") model = make_fijl(n, m, kappa, seed);
  else throw std::invalid_argument("from_descriptor: cannot rebuild kind '" + kind + "'");
  model.set_noise_var(j.value("noise_var", 0.0));
  return model;
}

inline void write_spectrum_csv(const MeasurementModel& model, std::ostream& os) {
  os << "index,squared_singular_value\n";
  const Vec& sp = model.spectrum();
  char buf[64];
  for (int k = 0; k < sp.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", k, sp[k]);
    os << buf;
  }
}

}  // namespace wsvamp::ops
