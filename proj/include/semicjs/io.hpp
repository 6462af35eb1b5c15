#pragma once

// CSV datasets and JSON documents.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semicjs/data.hpp"
#include "semicjs/error.hpp"
#include "semicjs/fit.hpp"
#include "semicjs/model.hpp"
#include "semicjs/simgen.hpp"
#include "semicjs/smoothing.hpp"

namespace semicjs {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// ---- text helpers -----------------------------------------------------------

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> line_no;
};

inline CsvTable read_csv_stream(std::istream& in, const std::string& what) {
  CsvTable t;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    auto cells = split_csv(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw InvalidArgument(what + " line " + std::to_string(n) + ": expected " + std::to_string(t.header.size()) +
                            " fields, found " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
    t.line_no.push_back(n);
  }
  if (t.header.empty()) throw InvalidArgument(what + ": empty file");
  return t;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  return read_csv_stream(in, path);
}

inline double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument("x");
    return v;
  } catch (const std::exception&) {
    throw InvalidArgument(where + ": '" + s + "' is not a finite number");
  }
}

inline int parse_int(const std::string& s, const std::string& where) {
  const double v = parse_number(s, where);
  if (v != std::floor(v)) throw InvalidArgument(where + ": '" + s + "' is not an integer");
  return static_cast<int>(v);
}

inline double parse_count(const std::string& s, const std::string& where) {
  const double v = parse_number(s, where);
  if (v < 0.0 || v != std::floor(v)) throw InvalidArgument(where + ": '" + s + "' is not a nonnegative count");
  return v;
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  out << text;
}

}  // namespace detail

// ---- histories ----------------------------------------------------------------

/// Header id,occ_1..occ_T,cov_1..cov_T[,age0]; covariate cells numeric or NA.
inline HistoryData parse_histories(std::istream& in, const std::string& what = "history csv") {
  const detail::CsvTable t = detail::read_csv_stream(in, what);
  const auto& hd = t.header;
  if (hd.empty() || hd[0] != "id") throw InvalidArgument(what + " line 1: first column must be 'id'");
  int T = 0;
  while (1 + T < static_cast<int>(hd.size()) && hd[1 + T] == "occ_" + std::to_string(T + 1)) ++T;
  if (T < 2) throw InvalidArgument(what + " line 1: expected occ_1..occ_T columns with T >= 2");
  for (int t = 1; t <= T; ++t) {
    if (static_cast<int>(hd.size()) <= T + t || hd[T + t] != "cov_" + std::to_string(t)) {
      throw InvalidArgument(what + " line 1: expected column cov_" + std::to_string(t));
    }
  }
  const bool has_age = static_cast<int>(hd.size()) == 2 * T + 2;
  if (has_age && hd.back() != "age0") throw InvalidArgument(what + " line 1: unexpected column '" + hd.back() + "'");
  if (!has_age && static_cast<int>(hd.size()) != 2 * T + 1) {
    throw InvalidArgument(what + " line 1: unexpected extra columns");
  }
  HistoryData data;
  data.T = T;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string where = what + " line " + std::to_string(t.line_no[i]);
    EncounterHistory h;
    h.id = row[0];
    for (int k = 1; k <= T; ++k) {
      const int code = detail::parse_int(row[k], where);
      if (code < 0 || code > 2) throw InvalidArgument(where + ": observation codes must be 0, 1 or 2");
      h.codes.push_back(code);
    }
    for (int k = 1; k <= T; ++k) {
      const std::string& cell = row[T + k];
      if (cell == "NA" || cell.empty()) {
        h.covariates.emplace_back();
      } else {
        h.covariates.emplace_back(detail::parse_number(cell, where));
      }
    }
    if (has_age) h.age_at_first = detail::parse_int(row.back(), where);
    try {
      validate(h, T);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(where + ": " + e.what());
    }
    data.histories.push_back(std::move(h));
  }
  return data;
}

inline HistoryData read_histories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  return parse_histories(in, path);
}

inline std::string format_histories(const HistoryData& data) {
  bool any_age = false;
  for (const auto& h : data.histories) any_age = any_age || h.age_at_first != 0;
  std::ostringstream os;
  os << "id";
  for (int t = 1; t <= data.T; ++t) os << ",occ_" << t;
  for (int t = 1; t <= data.T; ++t) os << ",cov_" << t;
  if (any_age) os << ",age0";
  os << "\n";
  for (const auto& h : data.histories) {
    os << h.id;
    for (int c : h.codes) os << "," << c;
    for (const auto& w : h.covariates) os << "," << (w ? fmt_double(*w) : "NA");
    if (any_age) os << "," << h.age_at_first;
    os << "\n";
  }
  return os.str();
}

// ---- arrays -------------------------------------------------------------------

/// m-array (`release,s_2..s_T,never`) and/or d-array (`release,s_2..s_T`).
/// The release column holds R_r.
inline MDArrays parse_arrays(std::istream* m_in, std::istream* d_in) {
  if (!m_in && !d_in) throw InvalidArgument("arrays: need an m-array or a d-array");
  std::optional<detail::CsvTable> mt, dt;
  int T = 0;
  const auto header_T = [](const detail::CsvTable& t, bool never, const std::string& what) {
    const auto& hd = t.header;
    if (hd.empty() || hd[0] != "release") throw InvalidArgument(what + " line 1: first column must be 'release'");
    const int ncols = static_cast<int>(hd.size()) - 1 - (never ? 1 : 0);
    const int T = ncols + 1;
    if (T < 2) throw InvalidArgument(what + " line 1: too few occasion columns");
    for (int s = 2; s <= T; ++s) {
      if (hd[s - 1] != "s_" + std::to_string(s)) {
        throw InvalidArgument(what + " line 1: expected column s_" + std::to_string(s));
      }
    }
    if (never && hd.back() != "never") throw InvalidArgument(what + " line 1: last column must be 'never'");
    if (static_cast<int>(t.rows.size()) != T - 1) {
      throw InvalidArgument(what + ": expected " + std::to_string(T - 1) + " release rows");
    }
    return T;
  };
  if (m_in) {
    mt = detail::read_csv_stream(*m_in, "m-array csv");
    T = header_T(*mt, true, "m-array csv");
  }
  if (d_in) {
    dt = detail::read_csv_stream(*d_in, "d-array csv");
    const int Td = header_T(*dt, false, "d-array csv");
    if (T && Td != T) throw InvalidArgument("d-array csv: T differs from the m-array");
    T = Td;
  }
  MDArrays a = MDArrays::zeros(T);
  std::vector<double> rel_m(T - 1, -1.0), rel_d(T - 1, -1.0);
  if (mt) {
    for (int r = 1; r < T; ++r) {
      const auto& row = mt->rows[r - 1];
      const std::string where = "m-array csv line " + std::to_string(mt->line_no[r - 1]);
      rel_m[r - 1] = detail::parse_count(row[0], where);
      for (int s = 2; s <= T + 1; ++s) a.m(r, s) = detail::parse_count(row[s - 1], where);
    }
  }
  if (dt) {
    for (int r = 1; r < T; ++r) {
      const auto& row = dt->rows[r - 1];
      const std::string where = "d-array csv line " + std::to_string(dt->line_no[r - 1]);
      rel_d[r - 1] = detail::parse_count(row[0], where);
      for (int s = 2; s <= T; ++s) a.d(r, s) = detail::parse_count(row[s - 1], where);
    }
  }
  for (int r = 1; r < T; ++r) {
    double dsum = 0.0;
    for (int s = 2; s <= T; ++s) dsum += a.d(r, s);
    if (!mt) {
      // recoveries only: everything not recovered is "never seen alive again"
      if (rel_d[r - 1] < dsum) {
        throw InvalidArgument("d-array csv: row " + std::to_string(r) + " recoveries exceed the release count");
      }
      a.m(r, T + 1) = rel_d[r - 1] - dsum;
      a.releases[r - 1] = rel_d[r - 1];
      continue;
    }
    double msum = 0.0;
    for (int s = 2; s <= T + 1; ++s) msum += a.m(r, s);
    a.releases[r - 1] = rel_m[r - 1];
    if (dt && rel_d[r - 1] != rel_m[r - 1]) {
      throw InvalidArgument("arrays: row " + std::to_string(r) + " release counts differ between m- and d-array");
    }
    if (std::abs(msum + dsum - rel_m[r - 1]) > 1e-9) {
      throw InvalidArgument("arrays: row " + std::to_string(r) + " counts sum to " + fmt_double(msum + dsum) +
                            " but release is " + fmt_double(rel_m[r - 1]));
    }
  }
  validate(a);
  return a;
}

inline MDArrays read_arrays(const std::optional<std::string>& m_path, const std::optional<std::string>& d_path) {
  std::ifstream m_in, d_in;
  if (m_path) {
    m_in.open(*m_path);
    if (!m_in) throw InvalidArgument("cannot open '" + *m_path + "'");
  }
  if (d_path) {
    d_in.open(*d_path);
    if (!d_in) throw InvalidArgument("cannot open '" + *d_path + "'");
  }
  return parse_arrays(m_path ? &m_in : nullptr, d_path ? &d_in : nullptr);
}

inline std::string format_m_array(const MDArrays& a) {
  std::ostringstream os;
  os << "release";
  for (int s = 2; s <= a.T; ++s) os << ",s_" << s;
  os << ",never\n";
  for (int r = 1; r < a.T; ++r) {
    os << fmt_double(a.releases[r - 1]);
    for (int s = 2; s <= a.T + 1; ++s) os << "," << fmt_double(a.m(r, s));
    os << "\n";
  }
  return os.str();
}

inline std::string format_d_array(const MDArrays& a) {
  std::ostringstream os;
  os << "release";
  for (int s = 2; s <= a.T; ++s) os << ",s_" << s;
  os << "\n";
  for (int r = 1; r < a.T; ++r) {
    os << fmt_double(a.releases[r - 1]);
    for (int s = 2; s <= a.T; ++s) os << "," << fmt_double(a.d(r, s));
    os << "\n";
  }
  return os.str();
}

/// Global covariate: header occasion,value with rows 1..T.
inline std::vector<double> parse_covariate(std::istream& in, int T, const std::string& what = "covariate csv") {
  const detail::CsvTable t = detail::read_csv_stream(in, what);
  if (t.header.size() != 2 || t.header[0] != "occasion" || t.header[1] != "value") {
    throw InvalidArgument(what + " line 1: header must be 'occasion,value'");
  }
  std::vector<double> w(T, std::nan(""));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const std::string where = what + " line " + std::to_string(t.line_no[i]);
    const int occ = detail::parse_int(t.rows[i][0], where);
    if (occ < 1 || occ > T) throw InvalidArgument(where + ": occasion out of range 1.." + std::to_string(T));
    w[occ - 1] = detail::parse_number(t.rows[i][1], where);
  }
  for (int k = 0; k < T; ++k) {
    if (std::isnan(w[k])) throw InvalidArgument(what + ": missing value for occasion " + std::to_string(k + 1));
  }
  return w;
}

inline std::string format_covariate(const std::vector<double>& w) {
  std::ostringstream os;
  os << "occasion,value\n";
  for (std::size_t k = 0; k < w.size(); ++k) os << k + 1 << "," << fmt_double(w[k]) << "\n";
  return os.str();
}

// ---- enums --------------------------------------------------------------------

inline Role parse_role(const std::string& s) {
  for (int i = 0; i < kNumRoles; ++i) {
    if (to_string(static_cast<Role>(i)) == s) return static_cast<Role>(i);
  }
  throw InvalidArgument("unknown role '" + s + "'");
}

inline Form parse_form(const std::string& s) {
  for (Form f : {Form::fixed, Form::constant, Form::per_occasion, Form::logistic_linear_in_covariate,
                 Form::logistic_linear_in_time, Form::spline_in_covariate}) {
    if (to_string(f) == s) return f;
  }
  throw InvalidArgument("unknown form '" + s + "'");
}

inline Regime parse_regime(const std::string& s) {
  for (Regime r : {Regime::array_global, Regime::history_constant, Regime::hmm_timevarying}) {
    if (to_string(r) == s) return r;
  }
  throw InvalidArgument("unknown regime '" + s + "'");
}

// ---- JSON: ModelSpec ------------------------------------------------------------

namespace detail {

inline void check_schema(const json& j, const std::string& what) {
  if (!j.is_object()) throw InvalidArgument(what + ": expected a JSON object");
  if (!j.contains("schema_version") || j["schema_version"] != kSchemaVersion) {
    throw InvalidArgument(what + ": schema_version must be " + std::to_string(kSchemaVersion));
  }
}

}  // namespace detail

inline json to_json(const ModelSpec& s) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["T"] = s.T;
  j["regime"] = to_string(s.regime);
  j["age_classes"] = {{"boundaries", s.age_map.boundaries}};
  if (s.regime == Regime::hmm_timevarying) {
    json h;
    h["bins"] = s.hmm_bins;
    if (s.hmm_grid) {
      h["grid"] = {(*s.hmm_grid)[0], (*s.hmm_grid)[1]};
    } else {
      h["grid"] = "auto";
    }
    j["hmm"] = h;
  }
  json blocks = json::array();
  for (const auto& b : s.blocks) {
    json bj;
    bj["role"] = to_string(b.role);
    bj["form"] = to_string(b.form);
    if (b.age_class) bj["age_class"] = *b.age_class + 1;
    if (b.form == Form::fixed) bj["value"] = b.fixed_value;
    if (b.form == Form::spline_in_covariate) {
      bj["K"] = b.K;
      bj["diff_order"] = b.diff_order;
      if (b.domain) {
        bj["domain"] = {(*b.domain)[0], (*b.domain)[1]};
      } else {
        bj["domain"] = "auto";
      }
    }
    blocks.push_back(bj);
  }
  j["blocks"] = blocks;
  return j;
}

inline ModelSpec spec_from_json(const json& j) {
  detail::check_schema(j, "model spec");
  try {
    ModelSpec s;
    s.T = j.at("T").get<int>();
    s.regime = parse_regime(j.at("regime").get<std::string>());
    if (j.contains("age_classes")) s.age_map.boundaries = j["age_classes"].at("boundaries").get<std::vector<int>>();
    if (j.contains("hmm")) {
      const json& h = j["hmm"];
      s.hmm_bins = h.value("bins", 50);
      if (h.contains("grid") && h["grid"].is_array()) {
        const auto g = h["grid"].get<std::vector<double>>();
        if (g.size() != 2) throw InvalidArgument("model spec: hmm.grid must be [lo, hi] or \"auto\"");
        s.hmm_grid = std::array<double, 2>{g[0], g[1]};
      }
    } else if (s.regime == Regime::hmm_timevarying) {
      s.hmm_bins = 50;
    }
    for (const json& bj : j.at("blocks")) {
      ParamBlock b;
      b.role = parse_role(bj.at("role").get<std::string>());
      b.form = parse_form(bj.at("form").get<std::string>());
      if (bj.contains("age_class") && !bj["age_class"].is_null()) b.age_class = bj["age_class"].get<int>() - 1;
      if (b.form == Form::fixed) b.fixed_value = bj.at("value").get<double>();
      if (b.form == Form::spline_in_covariate) {
        b.K = bj.at("K").get<int>();
        b.diff_order = bj.value("diff_order", 2);
        if (bj.contains("domain") && bj["domain"].is_array()) {
          const auto d = bj["domain"].get<std::vector<double>>();
          if (d.size() != 2) throw InvalidArgument("model spec: domain must be [lo, hi] or \"auto\"");
          b.domain = std::array<double, 2>{d[0], d[1]};
        }
      }
      s.blocks.push_back(b);
    }
    s.finalize();
    return s;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("model spec: ") + e.what());
  }
}

// ---- JSON: FitResult --------------------------------------------------------------

inline json to_json(const FitResult& f) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["spec"] = to_json(f.spec);
  j["theta"] = std::vector<double>(f.packed_hat.theta.data(), f.packed_hat.theta.data() + f.packed_hat.theta.size());
  json nat = json::array();
  const NaturalParams np = unpack(f.spec, f.packed_hat);
  for (std::size_t i = 0; i < f.spec.blocks.size(); ++i) {
    const auto& b = f.spec.blocks[i];
    json e;
    e["role"] = to_string(b.role);
    e["form"] = to_string(b.form);
    if (b.age_class) e["age_class"] = *b.age_class + 1;
    e["values"] = std::vector<double>(np[i].data(), np[i].data() + np[i].size());
    nat.push_back(e);
  }
  j["natural"] = nat;
  j["h"] = std::vector<double>(f.h_vec.data(), f.h_vec.data() + f.h_vec.size());
  j["loglik_unpen"] = f.loglik_unpen;
  j["loglik_pen"] = f.loglik_pen;
  j["edf"] = f.edf ? json(*f.edf) : json(nullptr);
  j["aic_p"] = f.aic ? json(*f.aic) : json(nullptr);
  j["convergence"] = {{"converged", f.converged},
                      {"n_restarts_used", f.n_restarts_used},
                      {"gradient_norm", f.gradient_norm},
                      {"iterations", f.iterations}};
  j["warnings"] = f.warnings;
  return j;
}

inline FitResult fit_from_json(const json& j) {
  detail::check_schema(j, "fit result");
  try {
    FitResult f;
    f.spec = spec_from_json(j.at("spec"));
    const auto th = j.at("theta").get<std::vector<double>>();
    f.packed_hat = make_packed(f.spec, Eigen::Map<const Eigen::VectorXd>(th.data(), static_cast<Eigen::Index>(th.size())));
    const auto h = j.at("h").get<std::vector<double>>();
    f.h_vec = Eigen::Map<const Eigen::VectorXd>(h.data(), static_cast<Eigen::Index>(h.size()));
    f.loglik_unpen = j.at("loglik_unpen").get<double>();
    f.loglik_pen = j.at("loglik_pen").get<double>();
    if (!j["edf"].is_null()) f.edf = j["edf"].get<double>();
    if (!j["aic_p"].is_null()) f.aic = j["aic_p"].get<double>();
    const json& c = j.at("convergence");
    f.converged = c.at("converged").get<bool>();
    f.n_restarts_used = c.value("n_restarts_used", 1);
    f.gradient_norm = c.value("gradient_norm", 0.0);
    f.iterations = c.value("iterations", 0);
    if (j.contains("warnings")) f.warnings = j["warnings"].get<std::vector<std::string>>();
    return f;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("fit result: ") + e.what());
  }
}

// ---- JSON: SimConfig ----------------------------------------------------------------

inline json to_json(const SimConfig& c) {
  return {{"schema_version", kSchemaVersion}, {"N", c.N}, {"T", c.T}, {"p", c.p}, {"lambda", c.lambda},
          {"mu0", c.mu0}, {"sigma0", c.sigma0}, {"mu", c.mu}, {"sigma", c.sigma}, {"eta", c.eta},
          {"age_boundary", c.age_boundary}, {"phi1", c.phi1}, {"phi2", c.phi2}, {"seed", c.seed}};
}

inline SimConfig sim_config_from_json(const json& j) {
  detail::check_schema(j, "simulation config");
  SimConfig c;
  try {
    c.N = j.value("N", c.N);
    c.T = j.value("T", c.T);
    c.p = j.value("p", c.p);
    c.lambda = j.value("lambda", c.lambda);
    c.mu0 = j.value("mu0", c.mu0);
    c.sigma0 = j.value("sigma0", c.sigma0);
    c.mu = j.value("mu", c.mu);
    c.sigma = j.value("sigma", c.sigma);
    c.eta = j.value("eta", c.eta);
    c.age_boundary = j.value("age_boundary", c.age_boundary);
    c.phi1 = j.value("phi1", c.phi1);
    c.phi2 = j.value("phi2", c.phi2);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("simulation config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- selection --------------------------------------------------------------------

inline std::string format_score_table(const SelectionResult& r) {
  std::ostringstream os;
  const Eigen::Index M = r.table.empty() ? 0 : r.table[0].h.size();
  const bool staged = !r.stage_h.empty();
  for (Eigen::Index j = 0; j < M; ++j) os << "h_" << j + 1 << ",";
  if (staged) os << "stage,smooth,";
  os << "fold,score,converged\n";
  for (const auto& row : r.table) {
    for (Eigen::Index j = 0; j < M; ++j) os << fmt_double(row.h[j]) << ",";
    if (staged) os << row.stage << "," << row.smooth << ",";
    os << row.fold << "," << fmt_double(row.score) << "," << (row.converged ? 1 : 0) << "\n";
  }
  return os.str();
}

inline json selection_to_json(const SelectionResult& r, const std::string& method) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["method"] = method;
  j["best_h"] = std::vector<double>(r.best_h.data(), r.best_h.data() + r.best_h.size());
  if (!r.stage_h.empty()) {
    json st = json::array();
    for (const auto& h : r.stage_h) st.push_back(std::vector<double>(h.data(), h.data() + h.size()));
    j["stage_h"] = st;
  }
  return j;
}

inline Eigen::VectorXd best_h_from_json(const json& j) {
  detail::check_schema(j, "selection result");
  try {
    const auto h = j.at("best_h").get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(h.data(), static_cast<Eigen::Index>(h.size()));
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("selection result: ") + e.what());
  }
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

}  // namespace semicjs
