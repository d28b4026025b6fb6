// File formats: survey CSV ingestion, flat chain storage, JSON report
// builders, the simulation CSV/Markdown outputs and the SVG figures.
#pragma once

#include "swolca/core.hpp"
#include "swolca/fit.hpp"
#include "swolca/simgen.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace swolca {

using nlohmann::json;

// ----- plain file helpers -------------------------------------------------------

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text_file(const std::string& path,
                            const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << content;
  if (!out) throw ValidationError("write failed for " + path);
}

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  const auto flush = [&] {
    if (!cur.empty() && cur.back() == '\r') cur.pop_back();
    lines.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    if (ch == '\n')
      flush();
    else
      cur += ch;
  }
  if (!cur.empty()) flush();
  return lines;
}

inline bool parse_long(const std::string& s, long* out) {
  if (s.empty()) return false;
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size()) return false;
  *out = v;
  return true;
}

inline bool parse_double(const std::string& s, double* out) {
  if (s.empty()) return false;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return false;
  *out = v;
  return true;
}

inline void append_g17(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

// item_<index> reserved column, 1-based index
inline int item_index(const std::string& name) {
  if (name.size() < 6 || name.compare(0, 5, "item_") != 0) return 0;
  long idx = 0;
  if (!parse_long(name.substr(5), &idx) || idx < 1) return 0;
  return static_cast<int>(idx);
}

}  // namespace detail

// ----- survey CSV ingestion -----------------------------------------------------

// reserved columns: item_1..item_J (codes 1..R_j), y, weight, stratum,
// cluster; everything else is a numeric covariate in file order. R_j is the
// largest observed code for item j. Throws ValidationError carrying the full
// validation report when anything is malformed.
inline SurveyDataset read_survey_csv(const std::string& path) {
  const std::vector<std::string> lines =
      detail::split_lines(read_text_file(path));
  ValidationReport rep;
  if (lines.empty()) {
    throw ValidationError("invalid input CSV " + path + ":\nfile is empty\n");
  }
  const std::vector<std::string> header = detail::split_fields(lines[0]);
  const int n_cols = static_cast<int>(header.size());

  // classify columns
  std::map<int, int> item_col;  // item index (1-based) -> column
  int col_y = -1, col_weight = -1, col_stratum = -1, col_cluster = -1;
  std::vector<int> cov_cols;
  std::vector<std::string> cov_names;
  for (int c = 0; c < n_cols; ++c) {
    const std::string& name = header[c];
    if (const int idx = detail::item_index(name)) {
      if (item_col.count(idx))
        rep.issues.push_back({-1, name, "duplicate item column"});
      item_col[idx] = c;
    } else if (name == "y") {
      col_y = c;
    } else if (name == "weight") {
      col_weight = c;
    } else if (name == "stratum") {
      col_stratum = c;
    } else if (name == "cluster") {
      col_cluster = c;
    } else if (name.empty()) {
      rep.issues.push_back({-1, "", "empty column name in header"});
    } else {
      cov_cols.push_back(c);
      cov_names.push_back(name);
    }
  }
  if (col_y < 0) rep.issues.push_back({-1, "y", "required column missing"});
  if (col_weight < 0)
    rep.issues.push_back({-1, "weight", "required column missing"});
  if (col_stratum < 0)
    rep.issues.push_back({-1, "stratum", "required column missing"});
  if (col_cluster < 0)
    rep.issues.push_back({-1, "cluster", "required column missing"});
  if (item_col.empty()) {
    rep.issues.push_back({-1, "", "no item_<j> columns found"});
  } else {
    const int J = item_col.rbegin()->first;
    for (int j = 1; j <= J; ++j)
      if (!item_col.count(j))
        rep.issues.push_back({-1, "item_" + std::to_string(j),
                              "item columns must be a contiguous 1..J set"});
  }
  if (!rep.ok())
    throw ValidationError("invalid input CSV " + path + ":\n" +
                          rep.to_string());

  const int J = static_cast<int>(item_col.size());
  const long n = static_cast<long>(lines.size()) - 1;
  if (n == 0)
    throw ValidationError("invalid input CSV " + path +
                          ":\nno data rows after the header\n");

  SurveyDataset d;
  d.items.resize(n, J);
  d.outcome.resize(n);
  d.weight.resize(n);
  d.stratum.resize(n);
  d.cluster.resize(n);
  d.covariates.resize(n, static_cast<int>(cov_cols.size()));
  d.covariate_names = cov_names;
  d.item_levels.assign(J, 2);

  for (long i = 0; i < n; ++i) {
    const std::vector<std::string> f = detail::split_fields(lines[i + 1]);
    if (static_cast<int>(f.size()) != n_cols) {
      std::ostringstream os;
      os << "expected " << n_cols << " fields, found " << f.size();
      rep.issues.push_back({i, "", os.str()});
      continue;
    }
    long v = 0;
    double x = 0.0;
    for (const auto& [idx, c] : item_col) {
      if (!detail::parse_long(f[c], &v)) {
        rep.issues.push_back({i, header[c], "not an integer: '" + f[c] + "'"});
      } else if (v < 1 || v > 64) {
        rep.issues.push_back(
            {i, header[c], "item code outside the supported range 1..64"});
      } else {
        d.items(i, idx - 1) = static_cast<int>(v);
        d.item_levels[idx - 1] =
            std::max(d.item_levels[idx - 1], static_cast<int>(v));
      }
    }
    if (!detail::parse_long(f[col_y], &v))
      rep.issues.push_back({i, "y", "not an integer: '" + f[col_y] + "'"});
    else
      d.outcome[i] = static_cast<int>(v);
    if (!detail::parse_double(f[col_weight], &x))
      rep.issues.push_back(
          {i, "weight", "not a number: '" + f[col_weight] + "'"});
    else
      d.weight[i] = x;
    if (!detail::parse_long(f[col_stratum], &v))
      rep.issues.push_back(
          {i, "stratum", "not an integer: '" + f[col_stratum] + "'"});
    else
      d.stratum[i] = static_cast<int>(v);
    if (!detail::parse_long(f[col_cluster], &v))
      rep.issues.push_back(
          {i, "cluster", "not an integer: '" + f[col_cluster] + "'"});
    else
      d.cluster[i] = static_cast<int>(v);
    for (std::size_t t = 0; t < cov_cols.size(); ++t) {
      if (!detail::parse_double(f[cov_cols[t]], &x))
        rep.issues.push_back(
            {i, cov_names[t], "not a number: '" + f[cov_cols[t]] + "'"});
      else
        d.covariates(i, static_cast<int>(t)) = x;
    }
  }
  if (rep.ok()) {
    const ValidationReport sem = validate_dataset(d);
    rep.issues.insert(rep.issues.end(), sem.issues.begin(), sem.issues.end());
  }
  if (!rep.ok()) {
    std::string msg = rep.to_string();
    const std::size_t cap = 4000;
    if (msg.size() > cap) msg = msg.substr(0, cap) + "... (truncated)\n";
    throw ValidationError("invalid input CSV " + path + ":\n" + msg);
  }
  return d;
}

// inverse of read_survey_csv; reserved columns first, covariates after
inline void write_survey_csv(const std::string& path,
                             const SurveyDataset& d) {
  std::string out;
  for (int j = 1; j <= d.n_items(); ++j)
    out += "item_" + std::to_string(j) + ",";
  out += "y,weight,stratum,cluster";
  for (int t = 0; t < d.n_covariates(); ++t) {
    out += ',';
    out += t < static_cast<int>(d.covariate_names.size())
               ? d.covariate_names[t]
               : "covariate_" + std::to_string(t + 1);
  }
  out += '\n';
  for (int i = 0; i < d.n(); ++i) {
    for (int j = 0; j < d.n_items(); ++j)
      out += std::to_string(d.items(i, j)) + ",";
    out += std::to_string(d.outcome[i]);
    out += ',';
    detail::append_g17(out, d.weight[i]);
    out += ',' + std::to_string(d.stratum[i]);
    out += ',' + std::to_string(d.cluster[i]);
    for (int t = 0; t < d.n_covariates(); ++t) {
      out += ',';
      detail::append_g17(out, d.covariates(i, t));
    }
    out += '\n';
  }
  write_text_file(path, out);
}

// ----- flat chain storage -------------------------------------------------------

// header names one scalar per column: pi_k, theta_j_k_r, xi_k_q (all indices
// 1-based, theta listed item-major)
inline std::string chain_header(int K, const std::vector<int>& item_levels,
                                int q_block) {
  std::string h;
  for (int k = 1; k <= K; ++k) {
    if (!h.empty()) h += ',';
    h += "pi_" + std::to_string(k);
  }
  const int J = static_cast<int>(item_levels.size());
  for (int j = 1; j <= J; ++j)
    for (int k = 1; k <= K; ++k)
      for (int r = 1; r <= item_levels[j - 1]; ++r)
        h += ",theta_" + std::to_string(j) + "_" + std::to_string(k) + "_" +
             std::to_string(r);
  for (int k = 1; k <= K; ++k)
    for (int q = 1; q <= q_block; ++q)
      h += ",xi_" + std::to_string(k) + "_" + std::to_string(q);
  return h;
}

inline void write_chain_csv(const std::string& path,
                            const ChainOutput& chain) {
  std::string out = chain_header(chain.K, chain.item_levels, chain.q_block);
  out += '\n';
  for (const ModelParams& p : chain.draws) {
    bool first = true;
    auto push = [&](double v) {
      if (!first) out += ',';
      first = false;
      detail::append_g17(out, v);
    };
    for (int k = 0; k < chain.K; ++k) push(p.pi[k]);
    for (int j = 0; j < chain.J; ++j)
      for (int k = 0; k < chain.K; ++k)
        for (int r = 0; r < chain.item_levels[j]; ++r) push(p.theta(j, k, r));
    for (int k = 0; k < chain.K; ++k)
      for (int q = 0; q < chain.q_block; ++q) push(p.xi(k, q));
    out += '\n';
  }
  write_text_file(path, out);
}

// rebuilds a chain from its flat storage; only the kept draws travel through
// this format, so design fields and label traces are absent
inline ChainOutput read_chain_csv(const std::string& path) {
  const std::vector<std::string> lines =
      detail::split_lines(read_text_file(path));
  if (lines.empty())
    throw ValidationError("chain file " + path + " is empty");
  const std::vector<std::string> names = detail::split_fields(lines[0]);

  int K = 0;
  std::map<int, int> levels;
  int q_block = 0;
  for (const std::string& name : names) {
    if (name.rfind("pi_", 0) == 0) {
      ++K;
    } else if (name.rfind("theta_", 0) == 0) {
      long j = 0, k = 0, r = 0;
      std::vector<std::string> parts;
      std::string rest = name.substr(6);
      std::string cur;
      for (char ch : rest) {
        if (ch == '_') {
          parts.push_back(cur);
          cur.clear();
        } else {
          cur += ch;
        }
      }
      parts.push_back(cur);
      if (parts.size() != 3 || !detail::parse_long(parts[0], &j) ||
          !detail::parse_long(parts[1], &k) ||
          !detail::parse_long(parts[2], &r))
        throw ValidationError("chain file " + path +
                              ": unrecognized column '" + name + "'");
      levels[static_cast<int>(j)] =
          std::max(levels[static_cast<int>(j)], static_cast<int>(r));
    } else if (name.rfind("xi_", 0) == 0) {
      const std::size_t us = name.find('_', 3);
      long q = 0;
      if (us == std::string::npos ||
          !detail::parse_long(name.substr(us + 1), &q))
        throw ValidationError("chain file " + path +
                              ": unrecognized column '" + name + "'");
      q_block = std::max(q_block, static_cast<int>(q));
    } else {
      throw ValidationError("chain file " + path + ": unrecognized column '" +
                            name + "'");
    }
  }
  if (K == 0)
    throw ValidationError("chain file " + path + " has no pi columns");

  ChainOutput chain;
  chain.K = K;
  chain.J = levels.empty() ? 0 : levels.rbegin()->first;
  chain.item_levels.assign(chain.J, 0);
  for (const auto& [j, r] : levels) {
    if (j < 1 || j > chain.J)
      throw ValidationError("chain file " + path + ": bad item index");
    chain.item_levels[j - 1] = r;
  }
  chain.R = chain.J > 0 ? *std::max_element(chain.item_levels.begin(),
                                            chain.item_levels.end())
                        : 0;
  chain.q_block = q_block;
  chain.meta.supervised = q_block > 0;
  chain.meta.accepted_k = K;

  // the canonical layout is the only accepted one; anything else means the
  // file was not produced by this toolkit (or was damaged)
  if (lines[0] != chain_header(K, chain.item_levels, q_block))
    throw ValidationError("chain file " + path +
                          ": header does not match the canonical layout");

  const int n_cols = static_cast<int>(names.size());
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::vector<std::string> f = detail::split_fields(lines[li]);
    if (static_cast<int>(f.size()) != n_cols) {
      std::ostringstream os;
      os << "chain file " << path << " is truncated or corrupt at line "
         << (li + 1) << ": expected " << n_cols << " fields, found "
         << f.size();
      throw ValidationError(os.str());
    }
    ModelParams p;
    p.pi.resize(K);
    p.theta = Tensor3(chain.J, K, chain.R);
    p.xi.resize(K, q_block);
    int c = 0;
    auto next = [&](double* out) {
      if (!detail::parse_double(f[c], out)) {
        std::ostringstream os;
        os << "chain file " << path << " is truncated or corrupt at line "
           << (li + 1) << ": bad number '" << f[c] << "'";
        throw ValidationError(os.str());
      }
      ++c;
    };
    for (int k = 0; k < K; ++k) next(&p.pi[k]);
    for (int j = 0; j < chain.J; ++j)
      for (int k = 0; k < K; ++k)
        for (int r = 0; r < chain.item_levels[j]; ++r) next(&p.theta(j, k, r));
    for (int k = 0; k < K; ++k)
      for (int q = 0; q < q_block; ++q) next(&p.xi(k, q));
    chain.draws.push_back(std::move(p));
  }
  if (chain.draws.empty())
    throw ValidationError("chain file " + path + " has no draws");
  return chain;
}

// ----- covariate profiles -------------------------------------------------------

struct ProfileRequest {
  int cls = 0;        // 1-based class
  Vector covariates;  // full covariate vector, zeros where unspecified
  std::string label;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t')) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

// "class=1,stratum_ind=1" -> class 1 evaluated at that covariate setting;
// unspecified covariates sit at zero
inline ProfileRequest parse_profile(const std::string& text,
                                    const std::vector<std::string>& names,
                                    int k_hat) {
  ProfileRequest req;
  req.covariates = Vector::Zero(static_cast<long>(names.size()));
  bool have_class = false;
  for (const std::string& raw : detail::split_fields(text)) {
    const std::string part = detail::trim(raw);
    const std::size_t eq = part.find('=');
    if (eq == std::string::npos)
      throw ValidationError("profile '" + text +
                            "': expected key=value pairs");
    const std::string key = detail::trim(part.substr(0, eq));
    const std::string val = detail::trim(part.substr(eq + 1));
    if (key == "class") {
      long c = 0;
      if (!detail::parse_long(val, &c) || c < 1 || c > k_hat)
        throw ValidationError("profile '" + text + "': class must be 1.." +
                              std::to_string(k_hat));
      req.cls = static_cast<int>(c);
      have_class = true;
    } else {
      const auto it = std::find(names.begin(), names.end(), key);
      if (it == names.end()) {
        std::string known;
        for (const auto& nm : names) known += (known.empty() ? "" : ", ") + nm;
        throw ValidationError("profile '" + text + "': unknown covariate '" +
                              key + "' (have: " + known + ")");
      }
      double x = 0.0;
      if (!detail::parse_double(val, &x))
        throw ValidationError("profile '" + text + "': bad value for '" +
                              key + "'");
      req.covariates[it - names.begin()] = x;
    }
  }
  if (!have_class)
    throw ValidationError("profile '" + text + "': missing class=<k>");
  req.label = text;
  return req;
}

// ----- JSON reports -------------------------------------------------------------

namespace detail {

inline json vector_json(const Vector& v) {
  json a = json::array();
  for (long i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline json theta_json(const Tensor3& t, const std::vector<int>& levels) {
  json out = json::array();
  for (int j = 0; j < t.dim1(); ++j) {
    json per_class = json::array();
    for (int k = 0; k < t.dim2(); ++k) {
      json row = json::array();
      for (int r = 0; r < levels[j]; ++r) row.push_back(t(j, k, r));
      per_class.push_back(std::move(row));
    }
    out.push_back(std::move(per_class));
  }
  return out;
}

inline json matrix_json(const Matrix& m) {
  json out = json::array();
  for (long i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (long j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(std::move(row));
  }
  return out;
}

inline Matrix matrix_from_json(const json& a) {
  const long rows = static_cast<long>(a.size());
  const long cols = rows > 0 ? static_cast<long>(a.at(0).size()) : 0;
  Matrix m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = a.at(i).at(j).get<double>();
  return m;
}

// Wald interval for a linear combination of probit coefficients
inline ScalarSummary probit_lincomb(const ProbitFit& fit, const Vector& a) {
  const double point = a.dot(fit.beta);
  const double se = std::sqrt(std::max(0.0, a.dot(fit.cov * a)));
  return {point, point - fit.t_crit * se, point + fit.t_crit * se};
}

}  // namespace detail

// exact round-trip persistence for the probit stage of a wolca fit
inline json probit_to_json(const ProbitFit& fit) {
  json j;
  j["beta"] = detail::vector_json(fit.beta);
  j["cov"] = detail::matrix_json(fit.cov);
  j["se"] = detail::vector_json(fit.se);
  j["lower"] = detail::vector_json(fit.lower);
  j["upper"] = detail::vector_json(fit.upper);
  j["df"] = fit.df;
  j["t_crit"] = fit.t_crit;
  j["n_iter"] = fit.n_iter;
  j["grad_norm"] = fit.grad_norm;
  j["loglik"] = fit.loglik;
  return j;
}

inline ProbitFit probit_from_json(const json& j) {
  ProbitFit fit;
  const auto vec = [](const json& a) {
    Vector v(static_cast<long>(a.size()));
    for (long i = 0; i < v.size(); ++i) v[i] = a.at(i).get<double>();
    return v;
  };
  fit.beta = vec(j.at("beta"));
  fit.cov = detail::matrix_from_json(j.at("cov"));
  fit.se = vec(j.at("se"));
  fit.lower = vec(j.at("lower"));
  fit.upper = vec(j.at("upper"));
  fit.df = j.at("df").get<double>();
  fit.t_crit = j.at("t_crit").get<double>();
  fit.n_iter = j.at("n_iter").get<int>();
  fit.grad_norm = j.at("grad_norm").get<double>();
  fit.loglik = j.at("loglik").get<double>();
  return fit;
}

// summary.json body: medians and 95% intervals for every parameter block,
// the accepted class count, P(xi > 0) per coefficient, and the outcome
// probability at each requested class/covariate profile
inline json summary_to_json(const FitResult& fit,
                            const std::vector<ProfileRequest>& profiles,
                            const std::vector<std::string>& covariate_names) {
  const ChainSummary s = summarize(fit.chain);
  json out;
  out["model"] = model_name(fit.kind);
  out["k_hat"] = fit.k_hat;
  out["n_draws"] = fit.chain.n_draws();
  out["covariate_names"] = covariate_names;
  out["pi"] = {{"median", detail::vector_json(s.pi_median)},
               {"lower", detail::vector_json(s.pi_lower)},
               {"upper", detail::vector_json(s.pi_upper)}};
  out["theta"] = {
      {"median", detail::theta_json(s.theta_median, fit.chain.item_levels)},
      {"lower", detail::theta_json(s.theta_lower, fit.chain.item_levels)},
      {"upper", detail::theta_json(s.theta_upper, fit.chain.item_levels)}};

  const bool wald = fit.kind == ModelKind::wolca;
  if (wald) {
    const int block = static_cast<int>(fit.step2.beta.size()) / fit.k_hat;
    Matrix med(fit.k_hat, block), lo(fit.k_hat, block), up(fit.k_hat, block);
    for (int k = 0; k < fit.k_hat; ++k)
      for (int q = 0; q < block; ++q) {
        med(k, q) = fit.step2.beta[k * block + q];
        lo(k, q) = fit.step2.lower[k * block + q];
        up(k, q) = fit.step2.upper[k * block + q];
      }
    out["xi"] = {{"median", detail::matrix_json(med)},
                 {"lower", detail::matrix_json(lo)},
                 {"upper", detail::matrix_json(up)},
                 {"prob_positive", nullptr}};
  } else {
    out["xi"] = {{"median", detail::matrix_json(s.xi_median)},
                 {"lower", detail::matrix_json(s.xi_lower)},
                 {"upper", detail::matrix_json(s.xi_upper)},
                 {"prob_positive", detail::matrix_json(s.xi_prob_positive)}};
  }

  json probs = json::array();
  for (const ProfileRequest& req : profiles) {
    ScalarSummary ss;
    if (wald) {
      const int block = static_cast<int>(fit.step2.beta.size()) / fit.k_hat;
      if (1 + req.covariates.size() != block)
        throw ValidationError(
            "profile covariate count does not match the fitted model");
      Vector a = Vector::Zero(fit.step2.beta.size());
      a[(req.cls - 1) * block] = 1.0;
      for (long t = 0; t < req.covariates.size(); ++t)
        a[(req.cls - 1) * block + 1 + t] = req.covariates[t];
      const ScalarSummary lin = detail::probit_lincomb(fit.step2, a);
      ss = {normal_cdf(lin.median), normal_cdf(lin.lower),
            normal_cdf(lin.upper)};
    } else {
      ss = outcome_probability(fit.chain, req.cls, req.covariates);
    }
    json rec;
    rec["profile"] = req.label;
    rec["class"] = req.cls;
    rec["covariates"] = detail::vector_json(req.covariates);
    rec["median"] = ss.median;
    rec["lower"] = ss.lower;
    rec["upper"] = ss.upper;
    probs.push_back(std::move(rec));
  }
  out["outcome_probabilities"] = std::move(probs);
  return out;
}

// diagnostics.json body: run configuration echo plus the variance-adjustment
// report (or the probit convergence report for wolca)
inline json diagnostics_to_json(const FitResult& fit, const McmcConfig& cfg,
                                long n, double kappa,
                                const std::vector<std::string>& covariate_names = {}) {
  json out;
  out["model"] = model_name(fit.kind);
  out["n"] = n;
  out["n_items"] = fit.chain.J;
  out["k_hat"] = fit.k_hat;
  out["kappa"] = kappa;
  out["covariate_names"] = covariate_names;
  out["n_draws"] = fit.chain.n_draws();
  out["config"] = {{"n_iter", cfg.n_iter},
                   {"n_burn", cfg.n_burn},
                   {"thin", cfg.thin},
                   {"seed", cfg.seed},
                   {"k_max", cfg.k_max},
                   {"class_cutoff", cfg.class_cutoff},
                   {"adjust_variance", cfg.adjust_variance},
                   {"n_boot_reps", cfg.n_boot_reps},
                   {"fd_step", cfg.fd_step},
                   {"ridge", cfg.ridge}};
  if (fit.kind == ModelKind::swolca && cfg.adjust_variance) {
    const AdjustReport& a = fit.adjust_report;
    out["adjustment"] = {{"adjusted", a.adjusted},
                         {"skip_reason", a.skip_reason},
                         {"dim", a.dim},
                         {"n_boot", a.n_boot},
                         {"hessian_asymmetry", a.hessian_asymmetry},
                         {"ridge_h", a.ridge_h},
                         {"ridge_v", a.ridge_v},
                         {"ridge_sigma", a.ridge_sigma},
                         {"cond_h", a.cond_h},
                         {"cond_sigma", a.cond_sigma}};
  } else {
    out["adjustment"] = nullptr;
  }
  if (fit.kind == ModelKind::wolca) {
    out["wolca_step2"] = {{"df", fit.step2.df},
                          {"t_crit", fit.step2.t_crit},
                          {"n_iter", fit.step2.n_iter},
                          {"grad_norm", fit.step2.grad_norm},
                          {"loglik", fit.step2.loglik}};
  } else {
    out["wolca_step2"] = nullptr;
  }
  return out;
}

inline json block_metrics_json(const BlockMetrics& b) {
  return {{"bias", b.bias},
          {"width", b.width},
          {"coverage", b.coverage},
          {"cells", b.cells}};
}

inline json metrics_to_json(const MetricsReport& rep) {
  json out;
  out["scenario"] = rep.scenario_id;
  out["k_true"] = rep.k_true;
  json models;
  for (const auto& [name, mm] : rep.models) {
    models[name] = {{"n_replicates", mm.n_replicates},
                    {"n_failed", mm.n_failed},
                    {"k_bias", mm.k_bias},
                    {"pi", block_metrics_json(mm.pi)},
                    {"theta", block_metrics_json(mm.theta)},
                    {"xi", block_metrics_json(mm.xi)}};
  }
  out["models"] = std::move(models);
  return out;
}

// ----- simulation text outputs --------------------------------------------------

namespace detail {

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

}  // namespace detail

inline std::string replicates_csv(const std::vector<ReplicateRecord>& recs) {
  std::string out =
      "replicate,model,failed,error,k_hat,pi_bias,pi_width,pi_coverage,"
      "theta_bias,theta_width,theta_coverage,xi_bias,xi_width,xi_coverage\n";
  for (const ReplicateRecord& r : recs) {
    out += std::to_string(r.replicate);
    out += ',';
    out += r.model;
    out += r.failed ? ",1," : ",0,";
    out += detail::csv_quote(r.error);
    out += ',';
    out += std::to_string(r.k_hat);
    for (const BlockMetrics* b : {&r.pi, &r.theta, &r.xi}) {
      out += ',';
      detail::append_g17(out, b->bias);
      out += ',';
      detail::append_g17(out, b->width);
      out += ',';
      detail::append_g17(out, b->coverage);
    }
    out += '\n';
  }
  return out;
}

// Markdown table with one row per model: absolute bias / interval width /
// coverage for each parameter block plus the class-count bias
inline std::string metrics_markdown(const MetricsReport& rep) {
  std::ostringstream os;
  os << "# Scenario " << rep.scenario_id << " (true K = " << rep.k_true
     << ")\n\n";
  os << "| Model | Reps | K bias | pi bias | pi width | pi cov "
        "| theta bias | theta width | theta cov "
        "| xi bias | xi width | xi cov |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  char buf[32];
  const auto cell = [&](double v) {
    std::snprintf(buf, sizeof buf, " %.3f |", v);
    os << buf;
  };
  for (const auto& [name, mm] : rep.models) {
    os << "| " << name << " | " << mm.n_replicates;
    if (mm.n_failed > 0) os << " (+" << mm.n_failed << " failed)";
    os << " |";
    cell(mm.k_bias);
    for (const BlockMetrics* b : {&mm.pi, &mm.theta, &mm.xi}) {
      cell(b->bias);
      cell(b->width);
      cell(b->coverage);
    }
    os << "\n";
  }
  return os.str();
}

// ----- SVG figures ---------------------------------------------------------------

namespace detail {

// light-to-dark ramp; r is 0-based among R levels
inline std::string level_color(int r, int R) {
  const double t = R > 1 ? static_cast<double>(r) / (R - 1) : 1.0;
  const auto mix = [t](int a, int b) {
    return static_cast<int>(a + t * (b - a) + 0.5);
  };
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", mix(247, 8), mix(251, 69),
                mix(255, 148));
  return buf;
}

inline std::string svg_text(int x, int y, const std::string& anchor,
                            const std::string& s) {
  std::ostringstream os;
  os << "  <text x=\"" << x << "\" y=\"" << y
     << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\""
     << anchor << "\">" << s << "</text>\n";
  return os.str();
}

}  // namespace detail

// one tile per (item, class) colored by the modal level argmax_r of the
// posterior median item-response probabilities
inline std::string patterns_svg(const Vector& pi_median,
                                const Tensor3& theta_median,
                                const std::vector<int>& item_levels) {
  const int J = theta_median.dim1(), K = theta_median.dim2();
  const int R = theta_median.dim3();
  const int cell_w = 72, cell_h = 16, left = 80, top = 46;
  const int legend_h = 40;
  const int width = left + K * cell_w + 20;
  const int height = top + J * cell_h + legend_h;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\">\n";
  os << "  <rect width=\"" << width << "\" height=\"" << height
     << "\" fill=\"white\"/>\n";
  char buf[64];
  for (int k = 0; k < K; ++k) {
    std::snprintf(buf, sizeof buf, "Class %d", k + 1);
    os << detail::svg_text(left + k * cell_w + cell_w / 2, 18, "middle", buf);
    std::snprintf(buf, sizeof buf, "(%.1f%%)", 100.0 * pi_median[k]);
    os << detail::svg_text(left + k * cell_w + cell_w / 2, 34, "middle", buf);
  }
  for (int j = 0; j < J; ++j) {
    std::snprintf(buf, sizeof buf, "item_%d", j + 1);
    os << detail::svg_text(left - 6, top + j * cell_h + cell_h - 4, "end",
                           buf);
    for (int k = 0; k < K; ++k) {
      int modal = 0;
      for (int r = 1; r < std::min(item_levels[j], R); ++r)
        if (theta_median(j, k, r) > theta_median(j, k, modal)) modal = r;
      os << "  <rect x=\"" << left + k * cell_w << "\" y=\""
         << top + j * cell_h << "\" width=\"" << cell_w << "\" height=\""
         << cell_h << "\" fill=\"" << detail::level_color(modal, R)
         << "\" stroke=\"white\"/>\n";
    }
  }
  const int ly = top + J * cell_h + 16;
  for (int r = 0; r < R; ++r) {
    const int lx = left + r * 70;
    os << "  <rect x=\"" << lx << "\" y=\"" << ly
       << "\" width=\"14\" height=\"14\" fill=\"" << detail::level_color(r, R)
       << "\" stroke=\"#444\"/>\n";
    std::snprintf(buf, sizeof buf, "level %d", r + 1);
    os << detail::svg_text(lx + 18, ly + 12, "start", buf);
  }
  os << "</svg>\n";
  return os.str();
}

// stacked horizontal bars of the full item-response probability vectors,
// one panel per class
inline std::string theta_bars_svg(const Vector& pi_median,
                                  const Tensor3& theta_median,
                                  const std::vector<int>& item_levels) {
  const int J = theta_median.dim1(), K = theta_median.dim2();
  const int R = theta_median.dim3();
  const int bar_w = 140, bar_h = 12, gap = 26, left = 80, top = 46;
  const int legend_h = 40;
  const int width = left + K * (bar_w + gap) + 20;
  const int height = top + J * (bar_h + 3) + legend_h;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\">\n";
  os << "  <rect width=\"" << width << "\" height=\"" << height
     << "\" fill=\"white\"/>\n";
  char buf[64];
  for (int k = 0; k < K; ++k) {
    const int x0 = left + k * (bar_w + gap);
    std::snprintf(buf, sizeof buf, "Class %d", k + 1);
    os << detail::svg_text(x0 + bar_w / 2, 18, "middle", buf);
    std::snprintf(buf, sizeof buf, "(%.1f%%)", 100.0 * pi_median[k]);
    os << detail::svg_text(x0 + bar_w / 2, 34, "middle", buf);
  }
  for (int j = 0; j < J; ++j) {
    const int y = top + j * (bar_h + 3);
    std::snprintf(buf, sizeof buf, "item_%d", j + 1);
    os << detail::svg_text(left - 6, y + bar_h - 2, "end", buf);
    for (int k = 0; k < K; ++k) {
      const int x0 = left + k * (bar_w + gap);
      double acc = 0.0;
      for (int r = 0; r < item_levels[j]; ++r) {
        const double w = theta_median(j, k, r) * bar_w;
        std::snprintf(buf, sizeof buf, "%.2f", x0 + acc);
        std::string x_str = buf;
        std::snprintf(buf, sizeof buf, "%.2f", w);
        os << "  <rect x=\"" << x_str << "\" y=\"" << y << "\" width=\""
           << buf << "\" height=\"" << bar_h << "\" fill=\""
           << detail::level_color(r, R) << "\"/>\n";
        acc += w;
      }
    }
  }
  const int ly = top + J * (bar_h + 3) + 16;
  for (int r = 0; r < R; ++r) {
    const int lx = left + r * 70;
    os << "  <rect x=\"" << lx << "\" y=\"" << ly
       << "\" width=\"14\" height=\"14\" fill=\"" << detail::level_color(r, R)
       << "\" stroke=\"#444\"/>\n";
    std::snprintf(buf, sizeof buf, "level %d", r + 1);
    os << detail::svg_text(lx + 18, ly + 12, "start", buf);
  }
  os << "</svg>\n";
  return os.str();
}

// ----- scenario configuration ---------------------------------------------------

inline Design design_from_name(const std::string& s) {
  if (s == "srs") return Design::srs;
  if (s == "stratified") return Design::stratified;
  if (s == "stratified_cluster") return Design::stratified_cluster;
  throw ValidationError("unknown design '" + s +
                        "' (expected srs, stratified, stratified_cluster)");
}

inline Association association_from_name(const std::string& s) {
  if (s == "conditional") return Association::conditional;
  if (s == "marginal") return Association::marginal;
  if (s == "extra_covariates") return Association::extra_covariates;
  throw ValidationError(
      "unknown association '" + s +
      "' (expected conditional, marginal, extra_covariates)");
}

// custom scenario file: starts from preset `id` when given (else scenario 1
// defaults) and overrides any of design/association/n/mode_prob/overlap/
// replicates
inline ScenarioSpec scenario_from_json(const json& j) {
  if (!j.is_object())
    throw ValidationError("scenario file: expected a JSON object");
  ScenarioSpec spec =
      j.contains("id") ? ScenarioSpec::preset(j.at("id").get<int>())
                       : ScenarioSpec::preset(1);
  if (j.contains("design"))
    spec.design = design_from_name(j.at("design").get<std::string>());
  if (j.contains("association"))
    spec.association =
        association_from_name(j.at("association").get<std::string>());
  if (j.contains("n")) spec.n = j.at("n").get<long>();
  if (j.contains("mode_prob")) spec.mode_prob = j.at("mode_prob").get<double>();
  if (j.contains("overlap")) spec.overlap = j.at("overlap").get<bool>();
  if (j.contains("replicates"))
    spec.replicates = j.at("replicates").get<int>();
  for (const auto& [key, val] : j.items()) {
    static const std::vector<std::string> known = {
        "id", "design", "association", "n", "mode_prob", "overlap",
        "replicates"};
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ValidationError("scenario file: unknown key '" + key + "'");
  }
  return spec;
}

}  // namespace swolca
