// Finite-population generator, the three sampling designs, class alignment
// against generating truth, and the bias/width/coverage metric suite used by
// the scenario runner.
#pragma once

#include "swolca/core.hpp"
#include "swolca/detail/cluster_assign.hpp"
#include "swolca/distributions.hpp"
#include "swolca/fit.hpp"
#include "swolca/postprocess.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace swolca {

// ----- population specification ------------------------------------------------

struct PopulationSpec {
  long N = 80000;
  std::vector<long> stratum_sizes = {20000, 60000};
  std::vector<Vector> class_probs_by_stratum;  // simplex per stratum
  int J = 30, R = 4;
  IntMatrix modal_patterns;  // J x K, levels 1..R
  double mode_prob = 0.85;
  Matrix xi_true;  // n_strata x K per-(stratum, class) linear predictors
  int cluster_size = 50;
  std::vector<int> clusters_per_stratum = {400, 1200};
  double latent_corr = 0.5;
  bool cluster_correlated = false;  // share a latent factor within clusters
  bool extra_covariates = false;    // Bernoulli(1/2) and N(0,1) confounders
  double extra_coef_bin = 0.3, extra_coef_cont = -0.2;

  int n_strata() const { return static_cast<int>(stratum_sizes.size()); }
  int n_classes() const { return static_cast<int>(modal_patterns.cols()); }

  // three-class layout with block modal patterns and stratum-specific class
  // mix and outcome risk
  static PopulationSpec defaults() {
    PopulationSpec s;
    s.class_probs_by_stratum.resize(2);
    s.class_probs_by_stratum[0] = Vector(3);
    s.class_probs_by_stratum[0] << 0.2, 0.4, 0.4;
    s.class_probs_by_stratum[1] = Vector(3);
    s.class_probs_by_stratum[1] << 0.7, 0.2, 0.1;
    s.modal_patterns.resize(30, 3);
    for (int j = 0; j < 30; ++j) {
      s.modal_patterns(j, 0) = j < 15 ? 1 : 3;
      s.modal_patterns(j, 1) = j < 6 ? 4 : 2;
      s.modal_patterns(j, 2) = j < 9 ? 3 : (j < 21 ? 4 : 1);
    }
    s.xi_true.resize(2, 3);
    s.xi_true << 1.0, 0.3, -0.5,
                 0.5, -0.7, -1.3;
    return s;
  }

  // overlap variant: the second class shares the first class's modal levels
  // everywhere except the designated differing items (kept at level 4)
  void make_overlapping(int n_diff_items = 5) {
    for (int j = 0; j < modal_patterns.rows(); ++j)
      modal_patterns(j, 1) = j < n_diff_items ? 4 : modal_patterns(j, 0);
  }

  void validate() const {
    if (N <= 0) throw ValidationError("population size must be positive");
    long tot = 0;
    for (long sz : stratum_sizes) tot += sz;
    if (tot != N)
      throw ValidationError("stratum sizes must sum to the population size");
    if (static_cast<int>(class_probs_by_stratum.size()) != n_strata())
      throw ValidationError("class probabilities: one simplex per stratum");
    const int K = n_classes();
    for (const auto& p : class_probs_by_stratum) {
      if (p.size() != K || p.minCoeff() <= 0.0 ||
          std::abs(p.sum() - 1.0) > 1e-9)
        throw ValidationError("class probabilities must be a simplex over K");
    }
    if (modal_patterns.rows() != J)
      throw ValidationError("modal pattern map must have J rows");
    if (modal_patterns.minCoeff() < 1 || modal_patterns.maxCoeff() > R)
      throw ValidationError("modal pattern levels must lie in 1..R");
    if (!(mode_prob > 0.0 && mode_prob < 1.0))
      throw ValidationError("mode_prob must lie in (0, 1)");
    if (xi_true.rows() != n_strata() || xi_true.cols() != K)
      throw ValidationError("xi_true must be n_strata x K");
    if (static_cast<int>(clusters_per_stratum.size()) != n_strata())
      throw ValidationError("clusters_per_stratum: one count per stratum");
    if (cluster_size < 1)
      throw ValidationError("cluster_size must be positive");
    for (int h = 0; h < n_strata(); ++h) {
      if (stratum_sizes[h] !=
          static_cast<long>(clusters_per_stratum[h]) * cluster_size)
        throw ValidationError(
            "stratum sizes must equal clusters_per_stratum * cluster_size");
    }
    if (!(latent_corr >= 0.0 && latent_corr <= 1.0))
      throw ValidationError("latent correlation must lie in [0, 1]");
  }
};

// generating item-response probabilities implied by the pattern map
inline Tensor3 pattern_theta(const PopulationSpec& spec) {
  const int K = spec.n_classes();
  Tensor3 theta(spec.J, K, spec.R, (1.0 - spec.mode_prob) / (spec.R - 1));
  for (int j = 0; j < spec.J; ++j)
    for (int k = 0; k < K; ++k)
      theta(j, k, spec.modal_patterns(j, k) - 1) = spec.mode_prob;
  return theta;
}

struct Population {
  PopulationSpec spec;
  IntVector stratum;     // 1-based
  IntVector cluster;     // globally unique, 1-based
  IntVector true_class;  // 1-based
  IntMatrix items;       // N x J, levels 1..R
  IntVector outcome;
  Matrix covariates;  // stratum_ind (+ extras when configured)
  std::vector<std::string> covariate_names;
  Tensor3 theta_true;
  Vector pi_realized;        // realized class shares
  Vector xi_marginal_truth;  // probit of realized per-class outcome rates

  long n() const { return stratum.size(); }
};

// binary outcomes for one cluster sharing a latent factor: the marginal of
// each member stays exactly p_i while within-cluster latent correlation is rho
inline std::vector<int> correlated_outcomes(const Vector& p, double rho,
                                            RngState& rng) {
  if (!(rho >= 0.0 && rho <= 1.0))
    throw ValidationError("correlated_outcomes: rho must lie in [0, 1]");
  for (int i = 0; i < p.size(); ++i)
    if (!(p[i] > 0.0 && p[i] < 1.0))
      throw ValidationError("correlated_outcomes: probabilities must lie in (0, 1)");
  const double u = rng.normal();
  const double sr = std::sqrt(rho), se = std::sqrt(1.0 - rho);
  std::vector<int> y(p.size());
  for (int i = 0; i < p.size(); ++i)
    y[i] = sr * u + se * rng.normal() <= normal_quantile(p[i]) ? 1 : 0;
  return y;
}

inline Population generate_population(const PopulationSpec& spec,
                                      RngState& rng) {
  spec.validate();
  Population pop;
  pop.spec = spec;
  pop.theta_true = pattern_theta(spec);
  const long N = spec.N;
  const int K = spec.n_classes();
  pop.stratum.resize(N);
  pop.cluster.resize(N);
  pop.true_class.resize(N);
  pop.items.resize(N, spec.J);
  pop.outcome.resize(N);
  const int p_cov = spec.extra_covariates ? 3 : 1;
  pop.covariates.resize(N, p_cov);
  pop.covariate_names = {"stratum_ind"};
  if (spec.extra_covariates) {
    pop.covariate_names.push_back("x_bin");
    pop.covariate_names.push_back("x_cont");
  }

  long row = 0;
  int cluster_base = 0;
  Vector lp(N);
  for (int h = 0; h < spec.n_strata(); ++h) {
    const Vector& probs = spec.class_probs_by_stratum[h];
    for (long t = 0; t < spec.stratum_sizes[h]; ++t, ++row) {
      pop.stratum[row] = h + 1;
      pop.cluster[row] =
          cluster_base + 1 + static_cast<int>(t / spec.cluster_size);
      const int c = draw_categorical(probs, rng);
      pop.true_class[row] = c;
      for (int j = 0; j < spec.J; ++j) {
        const int modal = spec.modal_patterns(j, c - 1);
        int lev;
        if (rng.uniform() < spec.mode_prob) {
          lev = modal;
        } else {
          // uniform over the non-modal levels
          lev = 1 + static_cast<int>(rng.uniform() * (spec.R - 1));
          lev = std::min(lev, spec.R - 1);
          if (lev >= modal) ++lev;
        }
        pop.items(row, j) = lev;
      }
      pop.covariates(row, 0) = h == 1 ? 1.0 : 0.0;
      double x = spec.xi_true(h, c - 1);
      if (spec.extra_covariates) {
        const double xb = rng.uniform() < 0.5 ? 1.0 : 0.0;
        const double xc = rng.normal();
        pop.covariates(row, 1) = xb;
        pop.covariates(row, 2) = xc;
        x += spec.extra_coef_bin * xb + spec.extra_coef_cont * xc;
      }
      lp[row] = x;
    }
    cluster_base += spec.clusters_per_stratum[h];
  }

  // outcomes: thresholded latent normals; cluster members share a factor
  // when configured, which preserves each marginal exactly
  if (spec.cluster_correlated && spec.latent_corr > 0.0) {
    long start = 0;
    while (start < N) {
      long end = start + 1;
      while (end < N && pop.cluster[end] == pop.cluster[start]) ++end;
      const double u = rng.normal();
      const double sr = std::sqrt(spec.latent_corr);
      const double se = std::sqrt(1.0 - spec.latent_corr);
      for (long i = start; i < end; ++i)
        pop.outcome[i] = sr * u + se * rng.normal() <= lp[i] ? 1 : 0;
      start = end;
    }
  } else {
    for (long i = 0; i < N; ++i)
      pop.outcome[i] = rng.normal() <= lp[i] ? 1 : 0;
  }

  pop.pi_realized = Vector::Zero(K);
  Vector hits = Vector::Zero(K), members = Vector::Zero(K);
  for (long i = 0; i < N; ++i) {
    pop.pi_realized[pop.true_class[i] - 1] += 1.0;
    members[pop.true_class[i] - 1] += 1.0;
    hits[pop.true_class[i] - 1] += pop.outcome[i];
  }
  pop.pi_realized /= static_cast<double>(N);
  pop.xi_marginal_truth.resize(K);
  for (int k = 0; k < K; ++k)
    pop.xi_marginal_truth[k] = normal_quantile(hits[k] / members[k]);
  return pop;
}

// ----- sampling designs --------------------------------------------------------

enum class Design { srs, stratified, stratified_cluster };

inline const char* design_name(Design d) {
  switch (d) {
    case Design::srs: return "srs";
    case Design::stratified: return "stratified";
    default: return "stratified_cluster";
  }
}

namespace detail {

// k distinct indices from 0..n-1 by partial Fisher-Yates, in draw order
inline std::vector<long> sample_without_replacement(long n, long k,
                                                    RngState& rng) {
  if (k > n)
    throw ValidationError("cannot sample " + std::to_string(k) +
                          " units from " + std::to_string(n));
  std::vector<long> idx(n);
  std::iota(idx.begin(), idx.end(), 0L);
  for (long t = 0; t < k; ++t) {
    const long pick =
        t + std::min(static_cast<long>(rng.uniform() * (n - t)), n - t - 1);
    std::swap(idx[t], idx[pick]);
  }
  idx.resize(k);
  return idx;
}

inline SurveyDataset gather_rows(const Population& pop,
                                 const std::vector<long>& rows) {
  const long n = static_cast<long>(rows.size());
  SurveyDataset d;
  d.items.resize(n, pop.spec.J);
  d.outcome.resize(n);
  d.covariates.resize(n, pop.covariates.cols());
  d.weight.resize(n);
  d.stratum.resize(n);
  d.cluster.resize(n);
  d.item_levels.assign(pop.spec.J, pop.spec.R);
  d.covariate_names = pop.covariate_names;
  for (long t = 0; t < n; ++t) {
    const long i = rows[t];
    d.items.row(t) = pop.items.row(i);
    d.outcome[t] = pop.outcome[i];
    d.covariates.row(t) = pop.covariates.row(i);
    d.stratum[t] = pop.stratum[i];
    d.cluster[t] = pop.cluster[i];
  }
  return d;
}

}  // namespace detail

// draw one survey sample; weights are exact inverse inclusion probabilities,
// so every design satisfies the Horvitz-Thompson identity sum(w) = N
inline SurveyDataset draw_sample(const Population& pop, Design design, long n,
                                 RngState& rng) {
  const long N = pop.n();
  if (n < 1 || n > N)
    throw ValidationError("sample size must lie in 1..N");
  const int H = pop.spec.n_strata();

  if (design == Design::srs) {
    std::vector<long> rows = detail::sample_without_replacement(N, n, rng);
    SurveyDataset d = detail::gather_rows(pop, rows);
    d.weight.setConstant(static_cast<double>(N) / n);
    // the design has a single stratum of independently drawn units
    std::fill(d.stratum.begin(), d.stratum.end(), 1);
    for (long t = 0; t < n; ++t) d.cluster[t] = static_cast<int>(t + 1);
    return d;
  }

  if (n % H != 0)
    throw ValidationError("stratified designs need n divisible by " +
                          std::to_string(H));
  const long per = n / H;
  std::vector<long> rows;
  rows.reserve(n);
  std::vector<double> weights;
  weights.reserve(n);

  long offset = 0;
  for (int h = 0; h < H; ++h) {
    const long Nh = pop.spec.stratum_sizes[h];
    if (design == Design::stratified) {
      if (per > Nh)
        throw ValidationError("stratum " + std::to_string(h + 1) +
                              " cannot supply " + std::to_string(per) +
                              " units");
      for (long idx : detail::sample_without_replacement(Nh, per, rng)) {
        rows.push_back(offset + idx);
        weights.push_back(static_cast<double>(Nh) / per);
      }
    } else {
      const int Ch = pop.spec.clusters_per_stratum[h];
      if (per % pop.spec.cluster_size != 0)
        throw ValidationError(
            "cluster design needs per-stratum size divisible by the cluster "
            "size");
      const long mh = per / pop.spec.cluster_size;
      if (mh > Ch)
        throw ValidationError("stratum " + std::to_string(h + 1) +
                              " has only " + std::to_string(Ch) + " clusters");
      const double w = static_cast<double>(Ch) / mh;
      for (long c : detail::sample_without_replacement(Ch, mh, rng)) {
        const long start = offset + c * pop.spec.cluster_size;
        for (int t = 0; t < pop.spec.cluster_size; ++t) {
          rows.push_back(start + t);
          weights.push_back(w);
        }
      }
    }
    offset += Nh;
  }
  SurveyDataset d = detail::gather_rows(pop, rows);
  for (long t = 0; t < static_cast<long>(weights.size()); ++t)
    d.weight[t] = weights[t];
  if (design == Design::stratified)
    for (long t = 0; t < d.n(); ++t) d.cluster[t] = static_cast<int>(t + 1);
  return d;
}

// ----- alignment and metrics ---------------------------------------------------

// permutation matching fitted classes to generating classes by total
// absolute difference of the item-response probabilities; entry t gives the
// fitted label for true class t, or -1 when there are fewer fitted classes
inline std::vector<int> align_classes(const Tensor3& theta_hat,
                                      const Tensor3& theta_true) {
  if (theta_hat.dim1() != theta_true.dim1())
    throw ValidationError("align_classes: item count mismatch");
  const int K_hat = theta_hat.dim2(), K_true = theta_true.dim2();
  const int J = theta_true.dim1();
  const int R = std::min(theta_hat.dim3(), theta_true.dim3());
  const int K = std::max(K_hat, K_true);
  // pad to square with zero cost so surplus labels absorb the slack
  Matrix cost = Matrix::Zero(K, K);
  for (int t = 0; t < K_true; ++t)
    for (int f = 0; f < K_hat; ++f) {
      double acc = 0.0;
      for (int j = 0; j < J; ++j)
        for (int r = 0; r < R; ++r)
          acc += std::abs(theta_hat(j, f, r) - theta_true(j, t, r));
      cost(t, f) = acc;
    }
  // a real pairing must always beat pairing with a phantom row/column
  const double penalty = cost.maxCoeff() + 1.0;
  for (int t = 0; t < K; ++t)
    for (int f = 0; f < K; ++f)
      if (t >= K_true || f >= K_hat) cost(t, f) = penalty;
  const std::vector<int> assign = detail::min_cost_assignment(cost);
  std::vector<int> match(K_true);
  for (int t = 0; t < K_true; ++t)
    match[t] = assign[t] < K_hat ? assign[t] : -1;
  return match;
}

// one model on one replicate, aligned to truth: per-cell generating value
// plus the median and interval reported for it
struct AlignedReplicate {
  int k_hat = 0;
  std::vector<std::pair<double, ScalarSummary>> pi_cells, theta_cells,
      xi_cells;
};

struct BlockMetrics {
  double bias = 0.0, width = 0.0, coverage = 0.0;
  long cells = 0;
};

struct ModelMetrics {
  double k_bias = 0.0;
  int n_replicates = 0, n_failed = 0;
  BlockMetrics pi, theta, xi;
};

struct MetricsReport {
  int scenario_id = 0;
  int k_true = 0;
  std::map<std::string, ModelMetrics> models;
};

namespace detail {

inline void accumulate_block(
    const std::vector<std::pair<double, ScalarSummary>>& cells,
    BlockMetrics& m) {
  for (const auto& [truth, s] : cells) {
    m.bias += std::abs(truth - s.median);
    m.width += s.upper - s.lower;
    m.coverage += (s.lower <= truth && truth <= s.upper) ? 1.0 : 0.0;
    m.cells += 1;
  }
}

inline void finalize_block(BlockMetrics& m) {
  if (m.cells == 0) return;
  m.bias /= m.cells;
  m.width /= m.cells;
  m.coverage /= m.cells;
}

}  // namespace detail

// bias = (1/#cells) sum |truth - median|, width and coverage averaged the
// same way across all replicate-cell pairs; K bias = mean |k_hat - K_true|
inline MetricsReport compute_metrics(
    const std::map<std::string, std::vector<AlignedReplicate>>& fits,
    int k_true) {
  MetricsReport rep;
  rep.k_true = k_true;
  for (const auto& [model, reps] : fits) {
    if (reps.empty())
      throw ValidationError("compute_metrics: no replicates for " + model);
    ModelMetrics mm;
    mm.n_replicates = static_cast<int>(reps.size());
    for (const auto& r : reps) {
      mm.k_bias += std::abs(r.k_hat - k_true);
      detail::accumulate_block(r.pi_cells, mm.pi);
      detail::accumulate_block(r.theta_cells, mm.theta);
      detail::accumulate_block(r.xi_cells, mm.xi);
    }
    mm.k_bias /= mm.n_replicates;
    detail::finalize_block(mm.pi);
    detail::finalize_block(mm.theta);
    detail::finalize_block(mm.xi);
    rep.models[model] = mm;
  }
  return rep;
}

// ----- scenario definitions ----------------------------------------------------

enum class Association { conditional, marginal, extra_covariates };

struct ScenarioSpec {
  int id = 0;
  Design design = Design::srs;
  Association association = Association::conditional;
  long n = 4000;
  double mode_prob = 0.85;
  bool overlap = false;
  int replicates = 100;

  static ScenarioSpec preset(int id) {
    ScenarioSpec s;
    s.id = id;
    switch (id) {
      case 1: break;
      case 2: s.design = Design::stratified; break;
      case 3: s.design = Design::stratified_cluster; break;
      case 4:
        s.design = Design::stratified;
        s.association = Association::marginal;
        break;
      case 5:
        s.design = Design::stratified;
        s.association = Association::extra_covariates;
        break;
      case 6:
        s.design = Design::stratified;
        s.n = 8000;
        break;
      case 7:
        s.design = Design::stratified;
        s.n = 800;
        break;
      case 8:
        s.design = Design::stratified;
        s.mode_prob = 0.55;
        break;
      case 9:
        s.design = Design::stratified;
        s.overlap = true;
        break;
      default:
        throw ValidationError("scenario id must lie in 1..9");
    }
    return s;
  }

  PopulationSpec population_spec() const {
    PopulationSpec p = PopulationSpec::defaults();
    p.mode_prob = mode_prob;
    if (overlap) p.make_overlapping();
    p.cluster_correlated = design == Design::stratified_cluster;
    p.extra_covariates = association == Association::extra_covariates;
    return p;
  }
};

// ----- per-replicate cell extraction -------------------------------------------

namespace detail {

// linear-predictor summary for one fitted class at a covariate profile
inline ScalarSummary lp_cell_bayes(const ChainOutput& chain, int fitted,
                                   const Vector& v) {
  std::vector<double> vals(chain.n_draws());
  for (int m = 0; m < chain.n_draws(); ++m) {
    double lp = chain.draws[m].xi(fitted, 0);
    for (int j = 0; j < v.size(); ++j)
      lp += v[j] * chain.draws[m].xi(fitted, 1 + j);
    vals[m] = lp;
  }
  return summarize_scalar(std::move(vals));
}

inline ScalarSummary lp_cell_wald(const ProbitFit& fit, int fitted,
                                  const Vector& v, int block) {
  Vector a = Vector::Zero(fit.beta.size());
  a[fitted * block] = 1.0;
  for (int j = 0; j < v.size(); ++j) a[fitted * block + 1 + j] = v[j];
  const double point = a.dot(fit.beta);
  const double se = std::sqrt(std::max(0.0, a.dot(fit.cov * a)));
  return {point, point - fit.t_crit * se, point + fit.t_crit * se};
}

}  // namespace detail

// evaluation profiles for the outcome block: conditional scenarios evaluate
// each class at both strata (reference covariate values elsewhere), marginal
// scenarios at the single intercept-only cell
inline std::vector<std::pair<Vector, double>> xi_eval_cells(
    const Population& pop, Association assoc, int true_class, int p_cov) {
  std::vector<std::pair<Vector, double>> cells;
  if (assoc == Association::marginal) {
    cells.push_back(
        {Vector::Zero(p_cov), pop.xi_marginal_truth[true_class]});
    return cells;
  }
  for (int h = 0; h < pop.spec.n_strata(); ++h) {
    Vector v = Vector::Zero(p_cov);
    if (p_cov > 0) v[0] = h == 0 ? 0.0 : 1.0;  // stratum indicator
    cells.push_back({v, pop.spec.xi_true(h, true_class)});
  }
  return cells;
}

// align one fit against the generating truth and collect its metric cells
inline AlignedReplicate align_replicate(const FitResult& fit,
                                        const Population& pop,
                                        Association assoc) {
  AlignedReplicate out;
  out.k_hat = fit.k_hat;
  const ChainSummary s = summarize(fit.chain);
  const std::vector<int> match =
      align_classes(s.theta_median, pop.theta_true);
  const int K_true = pop.spec.n_classes();
  const int J = pop.spec.J;
  const int p_cov = fit.chain.q_block > 0 ? fit.chain.q_block - 1 : 0;

  std::vector<double> vals(fit.chain.n_draws());
  for (int t = 0; t < K_true; ++t) {
    const int f = match[t];
    if (f < 0) continue;
    for (int m = 0; m < fit.chain.n_draws(); ++m)
      vals[m] = fit.chain.draws[m].pi[f];
    out.pi_cells.push_back({pop.pi_realized[t], summarize_scalar(vals)});
    for (int j = 0; j < J; ++j)
      for (int r = 0; r < pop.spec.R; ++r)
        out.theta_cells.push_back(
            {pop.theta_true(j, t, r),
             {s.theta_median(j, f, r), s.theta_lower(j, f, r),
              s.theta_upper(j, f, r)}});
    if (fit.kind == ModelKind::wolca) {
      const int block = static_cast<int>(fit.step2.beta.size()) / fit.k_hat;
      for (const auto& [v, truth] : xi_eval_cells(pop, assoc, t, block - 1))
        out.xi_cells.push_back(
            {truth, detail::lp_cell_wald(fit.step2, f, v, block)});
    } else if (fit.chain.q_block > 0) {
      for (const auto& [v, truth] : xi_eval_cells(pop, assoc, t, p_cov))
        out.xi_cells.push_back(
            {truth, detail::lp_cell_bayes(fit.chain, f, v)});
    }
  }
  return out;
}

// ----- scenario runner ----------------------------------------------------------

struct ReplicateRecord {
  int replicate = 0;
  std::string model;
  bool failed = false;
  std::string error;
  int k_hat = 0;
  BlockMetrics pi, theta, xi;
};

struct ScenarioResult {
  ScenarioSpec spec;
  MetricsReport metrics;
  std::vector<ReplicateRecord> records;
  int n_failed = 0;
};

namespace detail {

inline ReplicateRecord record_of(int rep, const std::string& model,
                                 const AlignedReplicate& a) {
  ReplicateRecord r;
  r.replicate = rep;
  r.model = model;
  r.k_hat = a.k_hat;
  accumulate_block(a.pi_cells, r.pi);
  accumulate_block(a.theta_cells, r.theta);
  accumulate_block(a.xi_cells, r.xi);
  finalize_block(r.pi);
  finalize_block(r.theta);
  finalize_block(r.xi);
  return r;
}

}  // namespace detail

// generate the population once, then per replicate: draw a sample, fit the
// requested models, align against truth, and pool the metric cells. The
// swolca fit also reports its pre-rescaling summaries under a separate name
// whenever the adjustment runs. Replicates are independent jobs with their
// own RNG streams, so the worker count never changes the results.
inline ScenarioResult run_scenario(const ScenarioSpec& spec,
                                   const std::vector<ModelKind>& models,
                                   const McmcConfig& cfg, RngState& rng,
                                   int n_threads = 1) {
  if (spec.replicates < 1)
    throw ValidationError("run_scenario: replicates must be >= 1");
  if (models.empty())
    throw ValidationError("run_scenario: no models requested");
  ScenarioResult result;
  result.spec = spec;
  RngState pop_rng = rng.fork(0);
  const Population pop = generate_population(spec.population_spec(), pop_rng);
  const int K_true = pop.spec.n_classes();

  {
    // surface design/size errors before any work; the probe fork is the
    // one replicate 0 will reuse, so no stream is consumed twice
    RngState probe = rng.fork(1).fork(0);
    draw_sample(pop, spec.design, spec.n, probe);
  }

  struct RepOutcome {
    std::vector<ReplicateRecord> records;
    std::vector<std::pair<std::string, AlignedReplicate>> aligned;
  };
  std::vector<RepOutcome> slots(spec.replicates);

  auto run_rep = [&](int rep) noexcept {
    RepOutcome& out = slots[rep];
    const RngState rep_rng = rng.fork(1 + rep);
    try {
      RngState samp_rng = rep_rng.fork(0);
      SurveyDataset data = draw_sample(pop, spec.design, spec.n, samp_rng);
      if (spec.association == Association::marginal) {
        // intercept-only outcome blocks: the class membership alone carries
        // the association, so the stratum covariate is withheld from the fit
        data.covariates.resize(data.n(), 0);
        data.covariate_names.clear();
      }
      int sub = 1;
      for (ModelKind kind : models) {
        const std::string name = model_name(kind);
        RngState fit_rng = rep_rng.fork(sub++);
        try {
          const PriorSpec prior = PriorSpec::defaults(
              cfg.k_max, pop.spec.R,
              1 + static_cast<int>(data.covariates.cols()));
          const FitResult fit = fit_model(data, kind, prior, cfg, fit_rng);
          AlignedReplicate a = align_replicate(fit, pop, spec.association);
          out.records.push_back(detail::record_of(rep, name, a));
          out.aligned.push_back({name, std::move(a)});
          if (kind == ModelKind::swolca && fit.adjusted) {
            FitResult unadj = fit;
            unadj.chain = fit.chain_unadjusted;
            AlignedReplicate u =
                align_replicate(unadj, pop, spec.association);
            out.records.push_back(
                detail::record_of(rep, "swolca_unadjusted", u));
            out.aligned.push_back({"swolca_unadjusted", std::move(u)});
          }
        } catch (const std::exception& e) {
          ReplicateRecord r;
          r.replicate = rep;
          r.model = name;
          r.failed = true;
          r.error = e.what();
          out.records.push_back(std::move(r));
        }
      }
    } catch (const std::exception& e) {
      // sampling failed; every requested model loses this replicate
      out.records.clear();
      out.aligned.clear();
      for (ModelKind kind : models) {
        ReplicateRecord r;
        r.replicate = rep;
        r.model = model_name(kind);
        r.failed = true;
        r.error = e.what();
        out.records.push_back(std::move(r));
      }
    }
  };

  const int workers =
      std::max(1, std::min(n_threads, spec.replicates));
  if (workers == 1) {
    for (int rep = 0; rep < spec.replicates; ++rep) run_rep(rep);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t)
      pool.emplace_back([&] {
        for (int rep = next.fetch_add(1); rep < spec.replicates;
             rep = next.fetch_add(1))
          run_rep(rep);
      });
    for (auto& th : pool) th.join();
  }

  std::map<std::string, std::vector<AlignedReplicate>> aligned;
  for (auto& slot : slots) {
    for (auto& r : slot.records) {
      if (r.failed) result.n_failed += 1;
      result.records.push_back(std::move(r));
    }
    for (auto& [name, a] : slot.aligned) aligned[name].push_back(std::move(a));
  }
  if (aligned.empty())
    throw NumericalError("run_scenario: every replicate fit failed");
  result.metrics = compute_metrics(aligned, K_true);
  result.metrics.scenario_id = spec.id;
  for (auto& [name, mm] : result.metrics.models)
    for (const auto& r : result.records)
      if (r.model == name && r.failed) mm.n_failed += 1;
  return result;
}

}  // namespace swolca
