#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "wsvamp/wsvamp.hpp"

namespace {

int cmd_run(const std::string& spec_path, const std::string& out_dir, int seeds_override,
            int jobs, bool diag, bool strict) {
  using namespace wsvamp;
  harness::ExperimentSpec spec;
  try {
    spec = harness::load_spec(spec_path);
    if (!out_dir.empty()) spec.trace_dir = out_dir;
    if (seeds_override > 0) {
      spec.seeds.clear();
      for (int k = 0; k < seeds_override; ++k) spec.seeds.push_back(k);
    }
  } catch (const harness::spec_error& e) {
    std::cerr << "spec error: " << e.what() << "\n";
    return 2;
  }
  const auto summary = harness::run_experiment(spec, jobs, diag);
  harness::emit_plot_data(spec.trace_dir);
  bool any_diverged = false;
  for (const auto& alg : summary.algorithms) {
    std::printf("%-24s", alg.name.c_str());
    for (const auto& [status, count] : alg.status_counts) {
      std::printf("  %s:%d", status.c_str(), count);
      if (status == "diverged" && count > 0) any_diverged = true;
    }
    if (!alg.nmse.empty()) {
      const auto& last = alg.nmse.back();
      std::printf("  final mean NMSE %.3e (%d seeds)", last.mean, last.coverage);
    }
    std::printf("\n");
  }
  std::printf("traces written to %s\n", spec.trace_dir.c_str());
  if (strict && any_diverged) return 3;
  return 0;
}

int cmd_plot(const std::string& trace_dir) {
  try {
    wsvamp::harness::emit_plot_data(trace_dir);
  } catch (const std::exception& e) {
    std::cerr << "plot error: " << e.what() << "\n";
    return 1;
  }
  std::printf("series CSVs and nmse.svg written to %s\n", trace_dir.c_str());
  return 0;
}

int cmd_moments(const std::string& spec_path, int jmax, int trials, std::uint64_t seed,
                const std::string& op_json, const std::string& spectrum_csv) {
  using namespace wsvamp;
  harness::ExperimentSpec spec;
  try {
    spec = harness::load_spec(spec_path);
  } catch (const harness::spec_error& e) {
    std::cerr << "spec error: " << e.what() << "\n";
    return 2;
  }
  const auto& ps = spec.problem;
  ops::MeasurementModel model = ps.op == ops::OpKind::fijl
                                    ? ops::make_fijl(ps.n, ps.m(), ps.kappa, seed)
                                    : ops::make_dense_roi(ps.n, ps.m(), ps.kappa, seed);
  model.set_noise_var(ops::noise_var_for_snr(ps.n, ps.m(), ps.prior, ps.snr_db));
  const auto mc = ops::spectral_moments_mc(model, jmax, trials, rng::derive(seed, {0xc0}));
  const bool exact_avail = model.has_spectrum();
  ops::SpectralInfo ex;
  if (exact_avail) ex = ops::exact_spectral_info(model, jmax);
  std::printf("j,chi_mc%s\n", exact_avail ? ",chi_exact,rel_err" : "");
  for (int j = 1; j <= jmax; ++j) {
    if (exact_avail)
      std::printf("%d,%.10e,%.10e,%.3e\n", j, mc.chi[j], ex.chi[j],
                  std::abs(mc.chi[j] - ex.chi[j]) / std::abs(ex.chi[j]));
    else
      std::printf("%d,%.10e\n", j, mc.chi[j]);
  }
  std::printf("# lambda_min %.10e lambda_max %.10e lambda_dagger %.10e\n", mc.lambda_min,
              mc.lambda_max, mc.lambda_dagger());
  if (!op_json.empty()) {
    std::ofstream out(op_json);
    out << ops::descriptor(model).dump(2) << "\n";
  }
  if (!spectrum_csv.empty() && exact_avail) {
    std::ofstream out(spectrum_csv);
    ops::write_spectrum_csv(model, out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"warm-started long-memory message passing for linear inverse problems"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, trace_dir, op_json, spectrum_csv;
  int seeds = 0, jobs = 1, jmax = 10, trials = 1000;
  std::uint64_t seed = 0;
  bool diag = false, strict = false;

  auto* run = app.add_subcommand("run", "run an experiment spec");
  run->add_option("spec", spec_path, "experiment spec (JSON)")->required();
  run->add_option("--out", out_dir, "trace output directory (overrides spec)");
  run->add_option("--seeds", seeds, "run seeds 0..K-1 (overrides spec)");
  run->add_option("--jobs", jobs, "worker pool size");
  run->add_flag("--diag", diag, "write per-iteration diagnostics CSVs");
  run->add_flag("--strict", strict, "exit 3 if any run diverged");

  auto* plot = app.add_subcommand("plot", "aggregate traces into series CSVs + SVG");
  plot->add_option("trace_dir", trace_dir, "directory of trace CSVs")->required();

  auto* moments = app.add_subcommand("moments", "Monte Carlo spectral moments of the spec's operator");
  moments->add_option("spec", spec_path, "experiment spec (JSON)")->required();
  moments->add_option("--jmax", jmax, "highest moment order");
  moments->add_option("--trials", trials, "probe count");
  moments->add_option("--seed", seed, "operator seed");
  moments->add_option("--op-json", op_json, "write the operator descriptor JSON here");
  moments->add_option("--spectrum-csv", spectrum_csv, "write the exact spectrum CSV here");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return cmd_run(spec_path, out_dir, seeds, jobs, diag, strict);
  if (plot->parsed()) return cmd_plot(trace_dir);
  if (moments->parsed()) return cmd_moments(spec_path, jmax, trials, seed, op_json, spectrum_csv);
  return 0;
}
