#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

#include "wsvamp/denoisers.hpp"
#include "wsvamp/operators.hpp"

namespace wsvamp::ops {

/// A measurement instance y = A x + w together with the ground truth kept for
/// oracle metrics in tests and traces.
struct Problem {
  MeasurementModel model;
  Vec x_true;
  Vec w_true;
  Vec y;
  denoisers::PriorDescriptor prior;
  double snr_db = 0.0;
};

/// snr_db -> v_w via E|x|^2 / (M 10^(snr/10)) with E|x|^2 = N * sparsity * signal_var.
inline double noise_var_for_snr(int n, int m, const denoisers::PriorDescriptor& prior, double snr_db) {
  const double ex2 = static_cast<double>(n) * prior.second_moment();
  return ex2 / (static_cast<double>(m) * std::pow(10.0, snr_db / 10.0));
}

inline Problem make_problem(MeasurementModel model, const denoisers::PriorDescriptor& prior,
                            double snr_db, std::uint64_t seed) {
  Problem pb;
  pb.prior = prior;
  pb.snr_db = snr_db;
  const int n = model.n();
  const int m = model.m();
  const double v_w = noise_var_for_snr(n, m, prior, snr_db);
  model.set_noise_var(v_w);

  auto g = rng::engine(seed, {0x5167});
  std::bernoulli_distribution coin(prior.sparsity);
  std::normal_distribution<double> comp(0.0, std::sqrt(prior.signal_var));
  pb.x_true = Vec::Zero(n);
  for (int k = 0; k < n; ++k)
    if (coin(g)) pb.x_true[k] = comp(g);

  auto gw = rng::engine(seed, {0x5168});
  pb.w_true = rng::gaussian(m, gw, std::sqrt(v_w));
  pb.y = model.apply(pb.x_true) + pb.w_true;
  pb.model = std::move(model);
  return pb;
}

}  // namespace wsvamp::ops
