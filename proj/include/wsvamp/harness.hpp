#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wsvamp/mp_engine.hpp"

namespace wsvamp::harness {

using nlohmann::json;

struct spec_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ProblemSpec {
  int n = 4096;
  double delta = 0.5;
  double kappa = 100.0;
  ops::OpKind op = ops::OpKind::fijl;
  double snr_db = 40.0;
  denoisers::PriorDescriptor prior;

  int m() const { return static_cast<int>(std::llround(delta * n)); }
};

struct ExperimentSpec {
  ProblemSpec problem;
  std::vector<mp::AlgorithmConfig> algorithms;
  std::vector<std::uint64_t> seeds;  // seed indices
  std::uint64_t master_seed = 0;
  std::string trace_dir = "traces";
  std::string summary_path;  // empty -> trace_dir/summary.json
  int mc_trials = 1000;
};

namespace detail {

template <typename T>
T field(const json& j, const std::string& path, const std::string& key) {
  if (!j.contains(key)) throw spec_error(path + key + ": missing required field");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw spec_error(path + key + ": wrong type");
  }
}

template <typename T>
T field_or(const json& j, const std::string& path, const std::string& key, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw spec_error(path + key + ": wrong type");
  }
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline mp::AlgorithmConfig parse_algorithm(const json& j, const std::string& path) {
  mp::AlgorithmConfig cfg;
  try {
    cfg.variant = mp::variant_from_string(detail::field<std::string>(j, path, "variant"));
  } catch (const std::invalid_argument& e) {
    throw spec_error(path + "variant: " + e.what());
  }
  cfg.name = detail::field_or<std::string>(j, path, "name", mp::to_string(cfg.variant));
  cfg.inner_iters = detail::field_or<int>(j, path, "inner_iters", 1);
  cfg.max_outer = detail::field_or<int>(j, path, "max_outer", 40);
  cfg.damping_len = detail::field_or<int>(j, path, "damping_len", 1);
  cfg.fixed_point_tol = detail::field_or<double>(j, path, "fixed_point_tol", 1e-6);
  cfg.c_t = detail::field_or<double>(j, path, "c_t", 1.0);
  cfg.mc_trials = detail::field_or<int>(j, path, "mc_trials", 1000);
  cfg.chi_order_cap = detail::field_or<int>(j, path, "chi_order_cap", 128);
  cfg.history_cap = detail::field_or<int>(j, path, "history_cap", 60);
  cfg.bb_probes = detail::field_or<int>(j, path, "bb_probes", 1);
  const std::string am = detail::field_or<std::string>(j, path, "alpha_method", "analytic");
  if (am == "analytic") cfg.alpha_method = denoisers::DenoiserOutput::Method::analytic;
  else if (am == "bb_mc") cfg.alpha_method = denoisers::DenoiserOutput::Method::bb_mc;
  else throw spec_error(path + "alpha_method: must be 'analytic' or 'bb_mc'");
  if (j.contains("estimators")) {
    const json& e = j.at("estimators");
    const std::string ep = path + "estimators.";
    const std::string chi = detail::field_or<std::string>(e, ep, "chi", "mc");
    if (chi == "exact") cfg.est.chi_exact = true;
    else if (chi == "mc") cfg.est.chi_exact = false;
    else throw spec_error(ep + "chi: must be 'exact' or 'mc'");
    const std::string psi = detail::field_or<std::string>(e, ep, "psi", "estimated");
    if (psi == "oracle") cfg.est.psi_oracle = true;
    else if (psi == "estimated") cfg.est.psi_oracle = false;
    else throw spec_error(ep + "psi: must be 'oracle' or 'estimated'");
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw spec_error(path + std::string(e.what()));
  }
  return cfg;
}

inline ExperimentSpec parse_spec(const json& j) {
  ExperimentSpec spec;
  if (!j.contains("problem")) throw spec_error("problem: missing required section");
  const json& p = j.at("problem");
  spec.problem.n = detail::field<int>(p, "problem.", "n");
  spec.problem.delta = detail::field<double>(p, "problem.", "delta");
  spec.problem.kappa = detail::field_or<double>(p, "problem.", "kappa", 1.0);
  spec.problem.snr_db = detail::field_or<double>(p, "problem.", "snr_db", 40.0);
  const std::string op = detail::field_or<std::string>(p, "problem.", "operator", "fijl");
  if (op == "fijl") spec.problem.op = ops::OpKind::fijl;
  else if (op == "dense_roi") spec.problem.op = ops::OpKind::dense_roi;
  else throw spec_error("problem.operator: must be 'fijl' or 'dense_roi'");
  if (spec.problem.n <= 0) throw spec_error("problem.n: must be positive");
  if (!(spec.problem.delta > 0.0 && spec.problem.delta < 1.0))
    throw spec_error("problem.delta: must be in (0,1)");
  if (spec.problem.kappa < 1.0) throw spec_error("problem.kappa: must be >= 1");
  if (spec.problem.op == ops::OpKind::fijl && (spec.problem.n & (spec.problem.n - 1)) != 0)
    throw spec_error("problem.n: fijl requires a power of two");
  if (spec.problem.m() < 1) throw spec_error("problem.delta: m = round(delta*n) must be >= 1");
  if (p.contains("prior")) {
    const json& pr = p.at("prior");
    const std::string kind = detail::field_or<std::string>(pr, "problem.prior.", "kind", "bernoulli_gaussian");
    if (kind == "bernoulli_gaussian")
      spec.problem.prior.kind = denoisers::PriorDescriptor::Kind::bernoulli_gaussian;
    else if (kind == "soft_threshold")
      spec.problem.prior.kind = denoisers::PriorDescriptor::Kind::soft_threshold;
    else throw spec_error("problem.prior.kind: unknown kind '" + kind + "'");
    spec.problem.prior.sparsity = detail::field_or<double>(pr, "problem.prior.", "sparsity", 0.1);
    spec.problem.prior.signal_var = detail::field_or<double>(pr, "problem.prior.", "signal_var", 10.0);
    spec.problem.prior.threshold_rule = detail::field_or<double>(pr, "problem.prior.", "threshold_rule", 1.0);
    if (!(spec.problem.prior.sparsity > 0.0 && spec.problem.prior.sparsity <= 1.0))
      throw spec_error("problem.prior.sparsity: must be in (0,1]");
    if (!(spec.problem.prior.signal_var > 0.0))
      throw spec_error("problem.prior.signal_var: must be > 0");
  }

  if (!j.contains("algorithms") || !j.at("algorithms").is_array() || j.at("algorithms").empty())
    throw spec_error("algorithms: must be a non-empty array");
  int idx = 0;
  for (const auto& a : j.at("algorithms")) {
    spec.algorithms.push_back(parse_algorithm(a, "algorithms[" + std::to_string(idx) + "]."));
    ++idx;
  }

  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    if (s.is_number_integer()) {
      const int count = s.get<int>();
      if (count < 1) throw spec_error("seeds: count must be >= 1");
      for (int k = 0; k < count; ++k) spec.seeds.push_back(k);
    } else if (s.is_array()) {
      for (const auto& v : s) spec.seeds.push_back(v.get<std::uint64_t>());
      if (spec.seeds.empty()) throw spec_error("seeds: must not be empty");
    } else {
      throw spec_error("seeds: must be a count or an array");
    }
  } else {
    spec.seeds = {0};
  }
  spec.master_seed = detail::field_or<std::uint64_t>(j, "", "master_seed", 0);
  spec.mc_trials = detail::field_or<int>(j, "", "mc_trials", 1000);
  if (j.contains("outputs")) {
    const json& o = j.at("outputs");
    spec.trace_dir = detail::field_or<std::string>(o, "outputs.", "trace_dir", "traces");
    spec.summary_path = detail::field_or<std::string>(o, "outputs.", "summary", "");
  }
  return spec;
}

inline ExperimentSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw spec_error("cannot open spec file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw spec_error("spec parse error: " + std::string(e.what()));
  }
  return parse_spec(j);
}

// ---------------------------------------------------------------------------
// trace CSV
// ---------------------------------------------------------------------------

inline const char* trace_header() {
  return "t,nmse,v_h_hat,v_h_oracle,v_q_hat,alpha,c_t_sum,inner_resid,wall_ms,status";
}

inline void write_trace_csv(const mp::RunTrace& trace, std::ostream& os) {
  os << trace_header() << "\n";
  for (const auto& r : trace.rows) {
    os << r.t << ',' << detail::fmt(r.nmse) << ',' << detail::fmt(r.v_h_hat) << ','
       << detail::fmt(r.v_h_oracle) << ',' << detail::fmt(r.v_q_hat) << ','
       << detail::fmt(r.alpha) << ',' << detail::fmt(r.c_t_sum) << ','
       << detail::fmt(r.inner_resid) << ',' << detail::fmt(r.wall_ms) << ',' << r.status << "\n";
  }
}

struct TraceFileRow {
  int t;
  double nmse;
  std::string status;
};

inline std::vector<TraceFileRow> read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace '" + path + "'");
  std::string line;
  std::getline(in, line);  // header
  std::vector<TraceFileRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    TraceFileRow row{};
    std::getline(ss, cell, ',');
    row.t = std::stoi(cell);
    std::getline(ss, cell, ',');
    row.nmse = std::strtod(cell.c_str(), nullptr);
    for (int k = 0; k < 7; ++k) std::getline(ss, cell, ',');
    std::getline(ss, row.status, ',');
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// aggregation / summary
// ---------------------------------------------------------------------------

struct SeriesPoint {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double stddev = 0.0;
  int coverage = 0;  // seeds contributing at this t
};

/// Mean/std NMSE per iteration over seeds. Non-finite rows (a diverged seed
/// past its blow-up point) drop out of the mean; coverage records how many
/// seeds remain.
inline std::vector<SeriesPoint> aggregate_nmse(const std::vector<std::vector<TraceFileRow>>& traces) {
  std::size_t tmax = 0;
  for (const auto& tr : traces) tmax = std::max(tmax, tr.size());
  std::vector<SeriesPoint> out(tmax);
  for (std::size_t t = 0; t < tmax; ++t) {
    double sum = 0.0, sum2 = 0.0;
    int cnt = 0;
    for (const auto& tr : traces) {
      if (t < tr.size() && std::isfinite(tr[t].nmse)) {
        sum += tr[t].nmse;
        sum2 += tr[t].nmse * tr[t].nmse;
        ++cnt;
      }
    }
    if (cnt > 0) {
      out[t].mean = sum / cnt;
      const double var = std::max(0.0, sum2 / cnt - out[t].mean * out[t].mean);
      out[t].stddev = std::sqrt(var);
    }
    out[t].coverage = cnt;
  }
  return out;
}

struct AlgorithmSummary {
  std::string name;
  std::map<std::string, int> status_counts;
  std::vector<SeriesPoint> nmse;
};

struct ExperimentSummary {
  std::vector<AlgorithmSummary> algorithms;
  json to_json() const {
    json out;
    out["algorithms"] = json::array();
    for (const auto& a : algorithms) {
      json ja;
      ja["name"] = a.name;
      ja["statuses"] = a.status_counts;
      json mean = json::array(), stddev = json::array(), cov = json::array();
      for (const auto& p : a.nmse) {
        mean.push_back(p.mean);
        stddev.push_back(p.stddev);
        cov.push_back(p.coverage);
      }
      ja["mean_nmse"] = mean;
      ja["std_nmse"] = stddev;
      ja["coverage"] = cov;
      out["algorithms"].push_back(ja);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// plot emission (per-algorithm series CSV + a static SVG)
// ---------------------------------------------------------------------------

inline void write_series_csv(const std::vector<SeriesPoint>& series, std::ostream& os) {
  os << "t,mean_nmse,std_nmse,coverage\n";
  for (std::size_t t = 0; t < series.size(); ++t)
    os << t << ',' << detail::fmt(series[t].mean) << ',' << detail::fmt(series[t].stddev) << ','
       << series[t].coverage << "\n";
}

inline void write_svg_plot(const std::vector<std::pair<std::string, std::vector<SeriesPoint>>>& curves,
                           std::ostream& os) {
  const int w = 720, h = 480, ml = 70, mr = 160, mt = 30, mb = 50;
  double lo = 0.0, hi = -300.0;
  std::size_t tmax = 1;
  for (const auto& [name, series] : curves)
    for (std::size_t t = 0; t < series.size(); ++t)
      if (std::isfinite(series[t].mean) && series[t].mean > 0) {
        const double v = std::log10(series[t].mean);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        tmax = std::max(tmax, series.size());
      }
  if (hi < lo) hi = lo + 1.0;
  lo = std::floor(lo) - 0.2;
  hi = std::ceil(hi) + 0.2;
  const auto xmap = [&](double t) { return ml + t / std::max<double>(1.0, tmax - 1) * (w - ml - mr); };
  const auto ymap = [&](double v) { return mt + (hi - v) / (hi - lo) * (h - mt - mb); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  os << "<rect width='" << w << "' height='" << h << "' fill='white'/>\n";
  for (int g = static_cast<int>(std::ceil(lo)); g <= static_cast<int>(std::floor(hi)); ++g) {
    const double y = ymap(g);
    os << "<line x1='" << ml << "' y1='" << y << "' x2='" << w - mr << "' y2='" << y
       << "' stroke='#dddddd'/>\n";
    os << "<text x='" << ml - 8 << "' y='" << y + 4 << "' text-anchor='end' font-size='12'>1e" << g
       << "</text>\n";
  }
  os << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
     << "' stroke='black'/>\n";
  os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
     << "' stroke='black'/>\n";
  os << "<text x='" << (ml + w - mr) / 2 << "' y='" << h - 14
     << "' text-anchor='middle' font-size='13'>outer iteration t</text>\n";
  os << "<text x='18' y='" << h / 2 << "' font-size='13' transform='rotate(-90 18 " << h / 2
     << ")' text-anchor='middle'>NMSE</text>\n";
  int ci = 0;
  for (const auto& [name, series] : curves) {
    const char* color = palette[ci % 8];
    std::ostringstream pts;
    bool pen_up = true;
    for (std::size_t t = 0; t < series.size(); ++t) {
      if (std::isfinite(series[t].mean) && series[t].mean > 0) {
        pts << (pen_up ? "M" : "L") << xmap(static_cast<double>(t)) << ' '
            << ymap(std::log10(series[t].mean)) << ' ';
        pen_up = false;
      } else {
        pen_up = true;
      }
    }
    os << "<path d='" << pts.str() << "' fill='none' stroke='" << color << "' stroke-width='1.8'/>\n";
    const double ly = mt + 18.0 * ci + 10;
    os << "<line x1='" << w - mr + 10 << "' y1='" << ly << "' x2='" << w - mr + 34 << "' y2='" << ly
       << "' stroke='" << color << "' stroke-width='2'/>\n";
    os << "<text x='" << w - mr + 40 << "' y='" << ly + 4 << "' font-size='12'>" << name
       << "</text>\n";
    ++ci;
  }
  os << "</svg>\n";
}

// ---------------------------------------------------------------------------
// experiment driver
// ---------------------------------------------------------------------------

inline ops::Problem build_problem(const ProblemSpec& ps, std::uint64_t seed) {
  ops::MeasurementModel model =
      ps.op == ops::OpKind::fijl ? ops::make_fijl(ps.n, ps.m(), ps.kappa, seed)
                                 : ops::make_dense_roi(ps.n, ps.m(), ps.kappa, seed);
  return ops::make_problem(std::move(model), ps.prior, ps.snr_db, rng::derive(seed, {0x9b}));
}

struct RunResult {
  std::string algorithm;
  std::uint64_t seed_index = 0;
  mp::RunTrace trace;
  std::string trace_path;
};

inline std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out;
}

inline void write_diag_csv(const mp::RunCapture& cap, std::ostream& os) {
  os << "t,nu,eta,psi_cond,gamma,sigma\n";
  for (std::size_t t = 0; t < cap.gamma_hist.size(); ++t) {
    os << t << ',' << detail::fmt(cap.nu_hist[t]) << ',' << detail::fmt(cap.eta_hist[t]) << ','
       << detail::fmt(cap.psi_cond[t]) << ',';
    const Vec& g = cap.gamma_hist[t];
    for (int k = 0; k < g.size(); ++k) os << (k ? ";" : "") << detail::fmt(g[k]);
    os << ',';
    const Vec& s = cap.sigma_hist[t];
    for (int k = 0; k < s.size(); ++k) os << (k ? ";" : "") << detail::fmt(s[k]);
    os << "\n";
  }
}

/// Runs every (algorithm, seed) job on a bounded worker pool, writes one
/// trace CSV per run plus a summary document, and returns the summary.
inline ExperimentSummary run_experiment(const ExperimentSpec& spec, int jobs = 1, bool diag = false) {
  namespace fs = std::filesystem;
  fs::create_directories(spec.trace_dir);
  struct Job {
    std::size_t alg_idx, seed_idx;
  };
  std::vector<Job> joblist;
  for (std::size_t a = 0; a < spec.algorithms.size(); ++a)
    for (std::size_t s = 0; s < spec.seeds.size(); ++s) joblist.push_back({a, s});
  std::vector<RunResult> results(joblist.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= joblist.size()) return;
      const Job job = joblist[k];
      const auto& cfg = spec.algorithms[job.alg_idx];
      const std::uint64_t seed_val = spec.seeds[job.seed_idx];
      const std::uint64_t prob_seed = rng::derive(spec.master_seed, {0x9201, seed_val});
      const std::uint64_t run_seed =
          rng::derive(spec.master_seed, {0x9202, static_cast<std::uint64_t>(job.alg_idx), seed_val});
      ops::Problem pb = build_problem(spec.problem, prob_seed);
      mp::RunCapture cap;
      RunResult res;
      res.algorithm = cfg.name;
      res.seed_index = seed_val;
      res.trace = mp::run_mp(pb, cfg, run_seed, diag ? &cap : nullptr);
      const std::string base = sanitize(cfg.name) + "_seed" + std::to_string(seed_val);
      res.trace_path = (fs::path(spec.trace_dir) / (base + ".csv")).string();
      std::ofstream out(res.trace_path);
      write_trace_csv(res.trace, out);
      if (diag) {
        std::ofstream d((fs::path(spec.trace_dir) / (base + "_diag.csv")).string());
        write_diag_csv(cap, d);
      }
      results[k] = std::move(res);
    }
  };
  const int nw = std::max(1, std::min<int>(jobs, static_cast<int>(joblist.size())));
  std::vector<std::thread> pool;
  for (int k = 0; k < nw; ++k) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  ExperimentSummary summary;
  for (std::size_t a = 0; a < spec.algorithms.size(); ++a) {
    AlgorithmSummary alg;
    alg.name = spec.algorithms[a].name;
    std::vector<std::vector<TraceFileRow>> traces;
    for (const auto& res : results) {
      if (res.algorithm != alg.name) continue;
      ++alg.status_counts[res.trace.final_status];
      std::vector<TraceFileRow> rows;
      for (const auto& r : res.trace.rows) rows.push_back({r.t, r.nmse, r.status});
      traces.push_back(std::move(rows));
    }
    alg.nmse = aggregate_nmse(traces);
    summary.algorithms.push_back(std::move(alg));
  }

  const std::string spath = spec.summary_path.empty()
                                ? (fs::path(spec.trace_dir) / "summary.json").string()
                                : spec.summary_path;
  json out = summary.to_json();
  out["problem"] = {{"n", spec.problem.n},         {"m", spec.problem.m()},
                    {"delta", spec.problem.delta}, {"kappa", spec.problem.kappa},
                    {"snr_db", spec.problem.snr_db}};
  out["seeds"] = spec.seeds;
  std::ofstream sf(spath);
  sf << out.dump(2) << "\n";
  return summary;
}

/// Re-aggregates the trace CSVs in a directory into per-algorithm series
/// files and one SVG plot. File names follow write order: <name>_seed<k>.csv.
inline void emit_plot_data(const std::string& trace_dir) {
  namespace fs = std::filesystem;
  std::map<std::string, std::vector<std::vector<TraceFileRow>>> groups;
  std::vector<std::string> order;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(trace_dir)) {
    const std::string fname = e.path().filename().string();
    if (e.path().extension() != ".csv") continue;
    if (fname.rfind("series_", 0) == 0 || fname.find("_diag") != std::string::npos) continue;
    const auto pos = fname.rfind("_seed");
    if (pos == std::string::npos) continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("emit_plot_data: no trace files in '" + trace_dir + "'");
  for (const auto& p : files) {
    const std::string fname = p.filename().string();
    const std::string name = fname.substr(0, fname.rfind("_seed"));
    if (!groups.count(name)) order.push_back(name);
    groups[name].push_back(read_trace_csv(p.string()));
  }
  std::vector<std::pair<std::string, std::vector<SeriesPoint>>> curves;
  for (const auto& name : order) {
    auto series = aggregate_nmse(groups[name]);
    std::ofstream out((fs::path(trace_dir) / ("series_" + name + ".csv")).string());
    write_series_csv(series, out);
    curves.emplace_back(name, std::move(series));
  }
  std::ofstream svg((fs::path(trace_dir) / "nmse.svg").string());
  write_svg_plot(curves, svg);
}

}  // namespace wsvamp::harness
