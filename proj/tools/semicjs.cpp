// semicjs: fit, select smoothing parameters, bootstrap and simulate
// semiparametric mark-recapture-recovery models.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "semicjs/fit.hpp"
#include "semicjs/io.hpp"
#include "semicjs/smoothing.hpp"
#include "semicjs/study.hpp"
#include "semicjs/uncertainty.hpp"

namespace fs = std::filesystem;
using namespace semicjs;

namespace {

constexpr int kOk = 0;
constexpr int kInputError = 1;
constexpr int kNotConverged = 2;

struct DataArgs {
  std::vector<std::string> data;
  std::string covariate;
};

void add_data_options(CLI::App* app, DataArgs& d) {
  app->add_option("--data", d.data, "history CSV, or m-array and/or d-array CSV (repeatable)")->required();
  app->add_option("--covariate", d.covariate, "global covariate CSV (occasion,value) for array data");
}

std::string first_line(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  return line;
}

Dataset load_data(const DataArgs& d) {
  std::optional<std::string> m_path, d_path, h_path;
  for (const auto& p : d.data) {
    const std::string head = first_line(p);
    if (head.rfind("id,", 0) == 0) {
      h_path = p;
    } else if (head.rfind("release,", 0) == 0) {
      const std::string h = detail::trim(head);
      const bool never = h.size() >= 6 && h.compare(h.size() - 6, 6, ",never") == 0;
      (never ? m_path : d_path) = p;
    } else {
      throw InvalidArgument(p + " line 1: unrecognized header (expected 'id,...' or 'release,...')");
    }
  }
  if (h_path) {
    if (m_path || d_path) throw InvalidArgument("give either history data or array data, not both");
    return read_histories(*h_path);
  }
  ArrayData a;
  a.arrays = read_arrays(m_path, d_path);
  if (!d.covariate.empty()) {
    std::ifstream in(d.covariate);
    if (!in) throw InvalidArgument("cannot open '" + d.covariate + "'");
    a.covariate = parse_covariate(in, a.arrays.T, d.covariate);
  }
  return a;
}

std::vector<double> parse_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(detail::parse_number(detail::trim(cell), what));
  if (out.empty()) throw InvalidArgument(what + ": empty list");
  return out;
}

/// "a,b,c" or "pow2:lo:hi[:step]" (exponents of 2).
std::vector<double> parse_grid(const std::string& s) {
  if (s.rfind("pow2:", 0) == 0) {
    const std::string bad = "--grid: expected pow2:lo:hi[:step]";
    std::vector<double> e;
    std::stringstream ss(s.substr(5));
    std::string cell;
    while (std::getline(ss, cell, ':')) e.push_back(detail::parse_number(detail::trim(cell), "--grid"));
    if (e.size() < 2 || e.size() > 3) throw InvalidArgument(bad);
    const double step = e.size() == 3 ? e[2] : 1.0;
    if (!(step > 0.0) || e[1] < e[0]) throw InvalidArgument(bad);
    std::vector<double> out;
    for (double x = e[0]; x <= e[1] + 1e-9; x += step) out.push_back(std::ldexp(1.0, static_cast<int>(std::lround(x))));
    return out;
  }
  return parse_list(s, "--grid");
}

std::vector<double> observed_covariates(const Dataset& data) {
  std::vector<double> v;
  if (const auto* a = std::get_if<ArrayData>(&data)) return a->covariate;
  for (const auto& h : std::get<HistoryData>(data).histories) {
    for (const auto& w : h.covariates) {
      if (w) v.push_back(*w);
    }
  }
  return v;
}

Eigen::VectorXd curve_grid(const Dataset& data, const ModelSpec& spec, int j) {
  std::array<double, 2> r;
  const auto obs = observed_covariates(data);
  if (obs.size() >= 2) {
    r = trimmed_range(obs);
  } else {
    r = {spec.smooth_bases[j].domain_lo, spec.smooth_bases[j].domain_hi};
  }
  return Eigen::VectorXd::LinSpaced(200, r[0], r[1]);
}

std::string format_curves(const FitResult& fit, const Dataset& data) {
  std::ostringstream os;
  os << "smooth,w,estimate\n";
  for (int j = 0; j < fit.spec.n_smooths(); ++j) {
    const Eigen::VectorXd w = curve_grid(data, fit.spec, j);
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      os << j + 1 << "," << fmt_double(w[k]) << "," << fmt_double(smooth_curve(fit.spec, fit.packed_hat.theta, j, w[k]))
         << "\n";
    }
  }
  return os.str();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InvalidArgument("cannot create directory '" + dir + "': " + ec.message());
}

// ---- fit ------------------------------------------------------------------------

struct FitArgs {
  std::string spec, h, select_result, out = ".";
  DataArgs data;
  int restarts = 5, max_iter = 1000;
  unsigned long long seed = 1;
};

int cmd_fit(const FitArgs& a) {
  const ModelSpec spec_in = spec_from_json(read_json(a.spec));
  const Dataset data = load_data(a.data);
  Eigen::VectorXd h;
  if (a.h == "from-select") {
    if (a.select_result.empty()) throw InvalidArgument("--h from-select needs --select-result");
    h = best_h_from_json(read_json(a.select_result));
  } else {
    const auto v = parse_list(a.h, "--h");
    h = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  const ModelSpec spec = resolve_spec(spec_in, data);
  if (h.size() == 1 && spec.n_smooths() > 1) h = Eigen::VectorXd::Constant(spec.n_smooths(), h[0]);
  FitOptions fo;
  fo.restarts = a.restarts;
  fo.max_iter = a.max_iter;
  fo.seed = a.seed;
  const FitResult fit = maximize(Objective(spec, data), h, fo);
  ensure_dir(a.out);
  detail::write_file((fs::path(a.out) / "fit.json").string(), to_json(fit).dump(2) + "\n");
  if (spec.n_smooths() > 0) detail::write_file((fs::path(a.out) / "curves.csv").string(), format_curves(fit, data));
  for (const auto& w : fit.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "loglik " << fmt_double(fit.loglik_unpen) << " penalized " << fmt_double(fit.loglik_pen);
  if (fit.aic) std::cout << " edf " << fmt_double(*fit.edf) << " aic_p " << fmt_double(*fit.aic);
  std::cout << " converged " << (fit.converged ? "yes" : "no") << "\n";
  return fit.converged ? kOk : kNotConverged;
}

// ---- select -----------------------------------------------------------------------

struct SelectArgs {
  std::string spec, method, grid = "pow2:-2:10:2", out = ".";
  DataArgs data;
  int k = 10, stages = 2, threads = 0;
  double calib_frac = 0.9;
  unsigned long long seed = 1;
  bool full_grid = false;
};

int cmd_select(const SelectArgs& a) {
  const Dataset data = load_data(a.data);
  const ModelSpec spec = resolve_spec(spec_from_json(read_json(a.spec)), data);
  const std::vector<double> values = parse_grid(a.grid);
  const int M = spec.n_smooths();
  if (M < 1) throw InvalidArgument("select: model has no smooth");
  const bool is_array = std::holds_alternative<ArrayData>(data);
  if (a.method == "loo-array" && !is_array) throw InvalidArgument("select: loo-array needs m/d-array data");
  if ((a.method == "kfold" || a.method == "staged") && is_array) {
    throw InvalidArgument("select: " + a.method + " needs history data");
  }
  SelectOptions so;
  so.threads = a.threads > 0 ? a.threads : default_threads();
  SelectionResult res;
  if (a.method == "staged") {
    res = staged_cv(spec, std::get<HistoryData>(data), values, a.stages, a.seed, a.k, a.calib_frac, so);
  } else if (a.method == "kfold" || a.method == "loo-array" || a.method == "aic") {
    const double n = std::pow(static_cast<double>(values.size()), M);
    if (M >= 3 && !a.full_grid) {
      throw InvalidArgument("select: full grid over " + std::to_string(M) + " smooths has " +
                            std::to_string(static_cast<long long>(n)) +
                            " candidates; use --method staged or pass --full-grid");
    }
    const int folds = a.method == "kfold" ? a.k : (a.method == "loo-array" ? spec.T - 1 : 1);
    std::cerr << "grid: " << static_cast<long long>(n) << " candidates x " << folds << " fits\n";
    const HGrid grid = cartesian_grid(std::vector<std::vector<double>>(M, values));
    if (a.method == "kfold") {
      res = kfold_cv_histories(spec, std::get<HistoryData>(data), grid, a.k, a.calib_frac, a.seed, so);
    } else if (a.method == "loo-array") {
      res = loo_cv_array(spec, std::get<ArrayData>(data), grid, so);
    } else {
      FitOptions fo;
      fo.restarts = 1;
      fo.seed = a.seed;
      res = aic_grid(spec, data, grid, fo);
    }
  } else {
    throw InvalidArgument("select: unknown --method '" + a.method + "' (loo-array, kfold, staged, aic)");
  }
  ensure_dir(a.out);
  detail::write_file((fs::path(a.out) / "scores.csv").string(), format_score_table(res));
  detail::write_file((fs::path(a.out) / "best_h.json").string(), selection_to_json(res, a.method).dump(2) + "\n");
  std::cout << "best h";
  for (Eigen::Index j = 0; j < res.best_h.size(); ++j) std::cout << " " << fmt_double(res.best_h[j]);
  std::cout << "\n";
  return kOk;
}

// ---- bootstrap --------------------------------------------------------------------

struct BootArgs {
  std::string fit, kind = "nonparametric", band = "simultaneous", out = ".";
  DataArgs data;
  int B = 200, threads = 0;
  double level = 0.95;
  unsigned long long seed = 1;
};

int cmd_bootstrap(const BootArgs& a) {
  if (!(a.level > 0.0 && a.level < 1.0)) throw InvalidArgument("--level must lie in (0,1)");
  if (a.B < 1) throw InvalidArgument("--B must be >= 1");
  if (a.band != "pointwise" && a.band != "simultaneous") throw InvalidArgument("--band must be pointwise or simultaneous");
  const FitResult fit = fit_from_json(read_json(a.fit));
  const Dataset data = load_data(a.data);
  BootstrapOptions bo;
  bo.threads = a.threads > 0 ? a.threads : default_threads();
  BootstrapResult br;
  if (a.kind == "parametric") {
    const auto* arr = std::get_if<ArrayData>(&data);
    if (!arr) throw InvalidArgument("bootstrap: parametric resampling needs m/d-array data");
    br = param_bootstrap(*arr, fit, a.B, a.seed, bo);
  } else if (a.kind == "nonparametric") {
    const auto* hd = std::get_if<HistoryData>(&data);
    if (!hd) throw InvalidArgument("bootstrap: nonparametric resampling needs history data");
    br = nonparam_bootstrap(*hd, fit, a.B, a.seed, bo);
  } else {
    throw InvalidArgument("--kind must be parametric or nonparametric");
  }
  ensure_dir(a.out);
  std::ostringstream bands;
  bands << "smooth,w,estimate,lo_pointwise,hi_pointwise,lo_simultaneous,hi_simultaneous\n";
  for (int j = 0; j < fit.spec.n_smooths(); ++j) {
    const Eigen::VectorXd w = curve_grid(data, fit.spec, j);
    const Eigen::MatrixXd curves = replicate_curves(br.fits, j, w);
    Eigen::VectorXd est(w.size());
    for (Eigen::Index k = 0; k < w.size(); ++k) est[k] = smooth_curve(fit.spec, fit.packed_hat.theta, j, w[k]);
    const Band pw = pointwise_band(curves, est, w, a.level);
    std::optional<Band> sim;
    if (a.band == "simultaneous") {
      sim = simultaneous_band(curves, pw, a.level);
      std::cerr << "smooth " << j + 1 << ": factor " << fmt_double(sim->factor) << " coverage "
                << fmt_double(sim->coverage) << "\n";
    }
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      bands << j + 1 << "," << fmt_double(w[k]) << "," << fmt_double(est[k]) << "," << fmt_double(pw.lo[k]) << ","
            << fmt_double(pw.hi[k]) << "," << (sim ? fmt_double(sim->lo[k]) : "NA") << ","
            << (sim ? fmt_double(sim->hi[k]) : "NA") << "\n";
    }
  }
  detail::write_file((fs::path(a.out) / "bands.csv").string(), bands.str());
  std::ostringstream reps;
  reps << "replicate,loglik_unpen,loglik_pen,gradient_norm";
  for (int i = 0; i < fit.spec.dim(); ++i) reps << ",theta_" << i + 1;
  reps << "\n";
  for (std::size_t b = 0; b < br.fits.size(); ++b) {
    const FitResult& f = br.fits[b];
    reps << br.replicate[b] + 1 << "," << fmt_double(f.loglik_unpen) << "," << fmt_double(f.loglik_pen) << ","
         << fmt_double(f.gradient_norm);
    for (Eigen::Index i = 0; i < f.packed_hat.theta.size(); ++i) reps << "," << fmt_double(f.packed_hat.theta[i]);
    reps << "\n";
  }
  detail::write_file((fs::path(a.out) / "replicates.csv").string(), reps.str());
  std::cout << br.fits.size() << " replicates, " << br.failed.size() << " failed\n";
  return kOk;
}

// ---- simulate -----------------------------------------------------------------------

struct SimArgs {
  std::string config, out_dir = ".";
  int replications = 1, threads = 0, K = 15, bins = 50, k = 10;
  bool study = false;
  std::optional<unsigned long long> seed;
};

std::string format_truth(const SimDataset& ds, int T) {
  std::ostringstream os;
  os << "id";
  for (int t = 1; t <= T; ++t) os << ",alive_" << t;
  for (int t = 1; t <= T; ++t) os << ",w_" << t;
  os << "\n";
  for (std::size_t i = 0; i < ds.truth.alive.size(); ++i) {
    os << ds.data.histories[i].id;
    for (int v : ds.truth.alive[i]) os << "," << v;
    for (double v : ds.truth.covariate[i]) os << "," << fmt_double(v);
    os << "\n";
  }
  return os.str();
}

int cmd_simulate(const SimArgs& a) {
  if (a.replications < 1) throw InvalidArgument("--replications must be >= 1");
  SimConfig cfg = a.config.empty() ? SimConfig{} : sim_config_from_json(read_json(a.config));
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  ensure_dir(a.out_dir);
  const fs::path out(a.out_dir);
  detail::write_file((out / "config.json").string(), to_json(cfg).dump(2) + "\n");
  detail::write_file((out / "spec.json").string(), to_json(sim_model_spec(cfg, a.K, a.bins)).dump(2) + "\n");
  for (int z = 0; z < a.replications; ++z) {
    SimConfig c = cfg;
    c.seed = cfg.seed + static_cast<unsigned long long>(z);
    const SimDataset ds = simulate_dataset(c);
    const std::string tag = "rep" + std::to_string(z + 1);
    detail::write_file((out / (tag + "_histories.csv")).string(), format_histories(ds.data));
    detail::write_file((out / (tag + "_truth.csv")).string(), format_truth(ds, c.T));
  }
  if (!a.study) return kOk;
  StudyOptions so;
  so.K = a.K;
  so.bins = a.bins;
  so.k = a.k;
  so.threads = a.threads > 0 ? a.threads : default_threads();
  const StudySummary s = run_study(cfg, a.replications, so, [](const ReplicationResult& r) {
    std::cerr << "replication " << r.replication + 1 << " done\n";
  });
  json j;
  j["schema_version"] = kSchemaVersion;
  j["replications"] = a.replications;
  j["mise_class1"] = s.mise_cv[0];
  j["mise_class2"] = s.mise_cv[1];
  j["mise_aic_class1"] = s.mise_aic[0];
  j["mise_aic_class2"] = s.mise_aic[1];
  json bias = json::array();
  for (const auto& b : s.bias) {
    bias.push_back({{"parameter", b.name}, {"truth", b.truth}, {"mrb_percent", b.mrb}, {"mstd", b.mstd},
                    {"absolute", b.absolute}});
  }
  j["bias"] = bias;
  json reps = json::array();
  for (const auto& r : s.reps) {
    json rj;
    rj["replication"] = r.replication + 1;
    if (r.cv_fit) rj["cv_h"] = std::vector<double>(r.cv_fit->h_vec.data(), r.cv_fit->h_vec.data() + 2);
    if (r.aic_fit) rj["aic_h"] = std::vector<double>(r.aic_fit->h_vec.data(), r.aic_fit->h_vec.data() + 2);
    rj["ise_cv"] = r.ise_cv;
    rj["ise_aic"] = r.ise_aic;
    reps.push_back(rj);
  }
  j["per_replication"] = reps;
  detail::write_file((out / "summary.json").string(), j.dump(2) + "\n");
  std::cout << "MISE class 1 " << fmt_double(s.mise_cv[0]) << ", class 2 " << fmt_double(s.mise_cv[1]) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semiparametric mark-recapture-recovery models"};
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "maximize the penalized likelihood at fixed h");
  fit->set_help_flag("--help", "print this help message and exit");
  fit->add_option("--spec", fa.spec, "model spec JSON")->required();
  add_data_options(fit, fa.data);
  fit->add_option("--h", fa.h, "smoothing parameters, comma separated, or from-select")->required();
  fit->add_option("--select-result", fa.select_result, "best_h.json from select");
  fit->add_option("--restarts", fa.restarts, "optimizer starting points")->check(CLI::PositiveNumber);
  fit->add_option("--seed", fa.seed, "seed for restart jitter");
  fit->add_option("--max-iter", fa.max_iter, "optimizer iteration limit")->check(CLI::PositiveNumber);
  fit->add_option("--out", fa.out, "output directory");

  SelectArgs sa;
  auto* sel = app.add_subcommand("select", "choose smoothing parameters");
  sel->add_option("--spec", sa.spec, "model spec JSON")->required();
  add_data_options(sel, sa.data);
  sel->add_option("--method", sa.method, "loo-array, kfold, staged or aic")->required();
  sel->add_option("--grid", sa.grid, "per-smooth h values: list or pow2:lo:hi[:step]");
  sel->add_option("--k", sa.k, "number of random partitions");
  sel->add_option("--calib-frac", sa.calib_frac, "calibration fraction");
  sel->add_option("--stages", sa.stages, "staged CV passes");
  sel->add_option("--seed", sa.seed, "partition seed");
  sel->add_option("--threads", sa.threads, "worker threads (0 = all cores)");
  sel->add_flag("--full-grid", sa.full_grid, "allow a Cartesian grid over 3 or more smooths");
  sel->add_option("--out", sa.out, "output directory");

  BootArgs ba;
  auto* boot = app.add_subcommand("bootstrap", "bootstrap refits and confidence bands");
  boot->add_option("--fit", ba.fit, "fit.json from fit")->required();
  add_data_options(boot, ba.data);
  boot->add_option("--B", ba.B, "replicates");
  boot->add_option("--seed", ba.seed, "resampling seed");
  boot->add_option("--kind", ba.kind, "parametric or nonparametric");
  boot->add_option("--band", ba.band, "pointwise or simultaneous");
  boot->add_option("--level", ba.level, "confidence level");
  boot->add_option("--threads", ba.threads, "worker threads (0 = all cores)");
  boot->add_option("--out", ba.out, "output directory");

  SimArgs ma;
  auto* sim = app.add_subcommand("simulate", "simulate datasets, optionally run the full study");
  sim->add_option("--config", ma.config, "simulation config JSON (default: built-in parameter set)");
  sim->add_option("--out-dir", ma.out_dir, "output directory");
  sim->add_option("--replications", ma.replications, "number of datasets");
  sim->add_flag("--study", ma.study, "select, fit and score every replication");
  sim->add_option("--seed", ma.seed, "base seed (overrides config)");
  sim->add_option("--K", ma.K, "basis functions per smooth");
  sim->add_option("--bins", ma.bins, "covariate bins");
  sim->add_option("--k", ma.k, "CV partitions");
  sim->add_option("--threads", ma.threads, "worker threads (0 = all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInputError;
  }
  try {
    if (*fit) return cmd_fit(fa);
    if (*sel) return cmd_select(sa);
    if (*boot) return cmd_bootstrap(ba);
    if (*sim) return cmd_simulate(ma);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const SelectionUnavailable& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  }
  return kInputError;
}
