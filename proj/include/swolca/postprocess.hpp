// Chain post-processing: label-switching resolution via co-assignment
// clustering, posterior summaries, outcome-probability curves, and the
// design-based sandwich rescaling of the posterior draws.
#pragma once

#include "swolca/core.hpp"
#include "swolca/detail/cluster_assign.hpp"
#include "swolca/distributions.hpp"
#include "swolca/gibbs.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace swolca {

// ----- quantiles and scalar summaries ----------------------------------------

// linear-interpolation quantile on a sorted vector (the convention where the
// sample min/max sit at p = 0 and 1)
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw ValidationError("quantile_sorted: empty input");
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("quantile_sorted: bad p");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - lo) * (sorted[lo + 1] - sorted[lo]);
}

struct ScalarSummary {
  double median = 0.0, lower = 0.0, upper = 0.0;
};

inline ScalarSummary summarize_scalar(std::vector<double> vals) {
  if (vals.empty()) throw ValidationError("summarize_scalar: empty input");
  std::sort(vals.begin(), vals.end());
  return {quantile_sorted(vals, 0.5), quantile_sorted(vals, 0.025),
          quantile_sorted(vals, 0.975)};
}

// element-wise medians and equal-tailed 95% intervals; pi medians are
// reported renormalized to the simplex with the raw medians kept alongside
struct ChainSummary {
  Vector pi_median, pi_median_raw, pi_lower, pi_upper;
  Tensor3 theta_median, theta_lower, theta_upper;
  Matrix xi_median, xi_lower, xi_upper, xi_prob_positive;
};

inline ChainSummary summarize(const ChainOutput& chain) {
  const int M = chain.n_draws();
  if (M == 0) throw ValidationError("summarize: chain has no draws");
  const int K = chain.K, J = chain.J, R = chain.R, q = chain.q_block;
  ChainSummary s;
  s.pi_median.resize(K);
  s.pi_median_raw.resize(K);
  s.pi_lower.resize(K);
  s.pi_upper.resize(K);
  std::vector<double> vals(M);
  for (int k = 0; k < K; ++k) {
    for (int m = 0; m < M; ++m) vals[m] = chain.draws[m].pi[k];
    auto ss = summarize_scalar(vals);
    s.pi_median_raw[k] = ss.median;
    s.pi_lower[k] = ss.lower;
    s.pi_upper[k] = ss.upper;
  }
  s.pi_median = s.pi_median_raw / s.pi_median_raw.sum();

  s.theta_median = Tensor3(J, K, R);
  s.theta_lower = Tensor3(J, K, R);
  s.theta_upper = Tensor3(J, K, R);
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < K; ++k)
      for (int r = 0; r < chain.item_levels[j]; ++r) {
        for (int m = 0; m < M; ++m) vals[m] = chain.draws[m].theta(j, k, r);
        auto ss = summarize_scalar(vals);
        s.theta_median(j, k, r) = ss.median;
        s.theta_lower(j, k, r) = ss.lower;
        s.theta_upper(j, k, r) = ss.upper;
      }

  s.xi_median.resize(K, q);
  s.xi_lower.resize(K, q);
  s.xi_upper.resize(K, q);
  s.xi_prob_positive.resize(K, q);
  for (int k = 0; k < K; ++k)
    for (int col = 0; col < q; ++col) {
      int pos = 0;
      for (int m = 0; m < M; ++m) {
        vals[m] = chain.draws[m].xi(k, col);
        pos += vals[m] > 0.0;
      }
      auto ss = summarize_scalar(vals);
      s.xi_median(k, col) = ss.median;
      s.xi_lower(k, col) = ss.lower;
      s.xi_upper(k, col) = ss.upper;
      s.xi_prob_positive(k, col) = static_cast<double>(pos) / M;
    }
  return s;
}

// posterior of the outcome probability for one class at a covariate profile
inline ScalarSummary outcome_probability(const ChainOutput& chain, int cls,
                                         const Vector& covariates) {
  if (chain.q_block == 0)
    throw ValidationError("outcome_probability: chain has no outcome block");
  if (cls < 1 || cls > chain.K)
    throw ValidationError("outcome_probability: class out of range");
  if (covariates.size() != chain.q_block - 1)
    throw ValidationError("outcome_probability: covariate length mismatch");
  const int M = chain.n_draws();
  if (M == 0) throw ValidationError("outcome_probability: empty chain");
  std::vector<double> vals(M);
  for (int m = 0; m < M; ++m) {
    double lp = chain.draws[m].xi(cls - 1, 0);
    for (int j = 0; j < covariates.size(); ++j)
      lp += covariates[j] * chain.draws[m].xi(cls - 1, 1 + j);
    vals[m] = normal_cdf(lp);
  }
  return summarize_scalar(vals);
}

// ----- label-switching resolution ---------------------------------------------

struct RelabeledChain {
  ChainOutput chain;
  // permutation per kept iteration: applying it to the relabeled draw (via
  // apply_label_permutation) recovers the original draw exactly
  std::vector<std::vector<int>> to_original;
  std::vector<int> reference_partition;  // length n; see below
  std::vector<int> subsample;            // indices used for the similarity matrix
};

// co-assignment similarity on a (deterministic, evenly spaced) subsample of
// up to 1000 individuals -> complete-linkage reference partition at k_hat
// groups -> per-iteration optimal label matching. Individuals outside the
// subsample inherit their modal relabeled class in reference_partition.
inline RelabeledChain relabel(const ChainOutput& chain, int k_hat) {
  const int M = chain.n_draws();
  if (M == 0) throw ValidationError("relabel: chain has no draws");
  const int n = chain.n, K = chain.K;
  if (k_hat < 1 || k_hat > K)
    throw ValidationError("relabel: k_hat out of range 1..K");
  std::vector<char> seen(K, 0);
  for (const auto& cm : chain.c_draws)
    for (auto ci : cm) seen[ci] = 1;
  const int distinct = static_cast<int>(std::count(seen.begin(), seen.end(), 1));
  if (k_hat > distinct)
    throw ValidationError("relabel: k_hat exceeds the " +
                          std::to_string(distinct) +
                          " distinct labels observed in the chain");

  const int s = std::min(n, 1000);
  std::vector<int> sub(s);
  for (int t = 0; t < s; ++t)
    sub[t] = static_cast<int>(static_cast<long>(t) * n / s);

  // labels transposed to [individual][iteration] for the pair scan
  std::vector<std::uint8_t> lab(static_cast<std::size_t>(s) * M);
  for (int a = 0; a < s; ++a)
    for (int m = 0; m < M; ++m)
      lab[static_cast<std::size_t>(a) * M + m] =
          static_cast<std::uint8_t>(chain.c_draws[m][sub[a]]);

  Matrix dist = Matrix::Zero(s, s);
  for (int a = 0; a < s; ++a) {
    const std::uint8_t* la = lab.data() + static_cast<std::size_t>(a) * M;
    for (int b = a + 1; b < s; ++b) {
      const std::uint8_t* lb = lab.data() + static_cast<std::size_t>(b) * M;
      int agree = 0;
      for (int m = 0; m < M; ++m) agree += la[m] == lb[m];
      const double d = 1.0 - static_cast<double>(agree) / M;
      dist(a, b) = d;
      dist(b, a) = d;
    }
  }
  const std::vector<int> ref_sub = detail::complete_linkage_cut(dist, k_hat);

  RelabeledChain out;
  out.chain = chain;
  out.subsample = sub;
  out.to_original.resize(M);

  for (int m = 0; m < M; ++m) {
    // contingency of reference groups vs this iteration's labels
    Matrix agree = Matrix::Zero(K, K);  // rows: groups (padded), cols: labels
    for (int a = 0; a < s; ++a)
      agree(ref_sub[a], chain.c_draws[m][sub[a]]) += 1.0;
    const std::vector<int> src = detail::min_cost_assignment(-agree);
    std::vector<int> c(out.chain.c_draws[m].begin(),
                       out.chain.c_draws[m].end());
    apply_label_permutation(out.chain.draws[m], &c, src);
    std::copy(c.begin(), c.end(), out.chain.c_draws[m].begin());
    std::vector<int> inv(K);
    for (int k = 0; k < K; ++k) inv[src[k]] = k;
    out.to_original[m] = inv;
  }

  out.reference_partition.assign(n, -1);
  for (int a = 0; a < s; ++a) out.reference_partition[sub[a]] = ref_sub[a];
  std::vector<int> freq(K);
  for (int i = 0; i < n; ++i) {
    if (out.reference_partition[i] >= 0) continue;
    std::fill(freq.begin(), freq.end(), 0);
    for (int m = 0; m < M; ++m) freq[out.chain.c_draws[m][i]]++;
    out.reference_partition[i] = static_cast<int>(
        std::max_element(freq.begin(), freq.end()) - freq.begin());
  }
  return out;
}

// per-individual most frequent class over kept draws; ties -> smallest index
inline std::vector<int> modal_classes(const ChainOutput& chain) {
  const int M = chain.n_draws();
  if (M == 0) throw ValidationError("modal_classes: chain has no draws");
  std::vector<int> modal(chain.n);
  std::vector<int> freq(chain.K);
  for (int i = 0; i < chain.n; ++i) {
    std::fill(freq.begin(), freq.end(), 0);
    for (int m = 0; m < M; ++m) freq[chain.c_draws[m][i]]++;
    modal[i] = static_cast<int>(
        std::max_element(freq.begin(), freq.end()) - freq.begin());
  }
  return modal;
}

// ----- unconstrained reparameterization ---------------------------------------

// flat coordinates: additive-log-ratio of pi (K-1), then of each theta row in
// (item-major, class-minor) order (R_j - 1 each), then xi row-major
struct UnconstrainedLayout {
  int K = 0, J = 0, q_block = 0;
  std::vector<int> item_levels;
  std::vector<int> theta_prefix;  // per item: coords before item j's block
  int n_theta = 0;

  UnconstrainedLayout() = default;
  UnconstrainedLayout(int k, std::vector<int> levels, int q)
      : K(k), J(static_cast<int>(levels.size())), q_block(q),
        item_levels(std::move(levels)) {
    if (K < 1 || K > 64)
      throw ValidationError("unconstrained layout supports 1..64 classes");
    for (int v : item_levels)
      if (v < 2 || v > 64)
        throw ValidationError("unconstrained layout supports 2..64 levels");
    theta_prefix.resize(J + 1, 0);
    for (int j = 0; j < J; ++j)
      theta_prefix[j + 1] = theta_prefix[j] + K * (item_levels[j] - 1);
    n_theta = theta_prefix[J];
  }
  static UnconstrainedLayout of_chain(const ChainOutput& chain) {
    return UnconstrainedLayout(chain.K, chain.item_levels, chain.q_block);
  }

  int dim() const { return (K - 1) + n_theta + K * q_block; }
  int pi_offset() const { return 0; }
  int theta_offset(int j, int k) const {
    return (K - 1) + theta_prefix[j] + k * (item_levels[j] - 1);
  }
  int xi_offset(int k, int col) const {
    return (K - 1) + n_theta + k * q_block + col;
  }
  int max_levels() const {
    int r = 0;
    for (int v : item_levels) r = std::max(r, v);
    return r;
  }
};

namespace detail {

// log-ratio transform with the last element as reference; the simplex is
// floored and renormalized first so boundary draws stay finite
inline void alr_forward(const double* p, int R, double* out) {
  double floored[64];
  double total = 0.0;
  for (int r = 0; r < R; ++r) total += (floored[r] = std::max(p[r], 1e-8));
  const double ref = floored[R - 1] / total;
  for (int r = 0; r < R - 1; ++r)
    out[r] = std::log(floored[r] / total) - std::log(ref);
}

inline void alr_inverse(const double* u, int R, double* p) {
  double m = 0.0;
  for (int r = 0; r < R - 1; ++r) m = std::max(m, u[r]);
  double denom = std::exp(-m);
  for (int r = 0; r < R - 1; ++r) denom += (p[r] = std::exp(u[r] - m));
  for (int r = 0; r < R - 1; ++r) p[r] /= denom;
  p[R - 1] = std::exp(-m) / denom;
}

}  // namespace detail

inline Vector to_unconstrained(const ModelParams& params,
                               const UnconstrainedLayout& lay) {
  Vector u(lay.dim());
  detail::alr_forward(params.pi.data(), lay.K, u.data() + lay.pi_offset());
  std::array<double, 64> row;
  for (int j = 0; j < lay.J; ++j) {
    const int rj = lay.item_levels[j];
    for (int k = 0; k < lay.K; ++k) {
      for (int r = 0; r < rj; ++r) row[r] = params.theta(j, k, r);
      detail::alr_forward(row.data(), rj, u.data() + lay.theta_offset(j, k));
    }
  }
  for (int k = 0; k < lay.K; ++k)
    for (int col = 0; col < lay.q_block; ++col)
      u[lay.xi_offset(k, col)] = params.xi(k, col);
  return u;
}

inline ModelParams from_unconstrained(const Vector& u,
                                      const UnconstrainedLayout& lay) {
  if (u.size() != lay.dim())
    throw ValidationError("from_unconstrained: dimension mismatch");
  ModelParams p;
  p.pi.resize(lay.K);
  detail::alr_inverse(u.data() + lay.pi_offset(), lay.K, p.pi.data());
  p.theta = Tensor3(lay.J, lay.K, lay.max_levels(), 0.0);
  std::array<double, 64> row;
  for (int j = 0; j < lay.J; ++j) {
    const int rj = lay.item_levels[j];
    for (int k = 0; k < lay.K; ++k) {
      detail::alr_inverse(u.data() + lay.theta_offset(j, k), rj, row.data());
      for (int r = 0; r < rj; ++r) p.theta(j, k, r) = row[r];
    }
  }
  p.xi.resize(lay.K, lay.q_block);
  for (int k = 0; k < lay.K; ++k)
    for (int col = 0; col < lay.q_block; ++col)
      p.xi(k, col) = u[lay.xi_offset(k, col)];
  return p;
}

// ----- marginalized pseudo-posterior (latent class and utility integrated out)

// log p~(theta | D) = sum_i wtilde_i log sum_k pi_k prod_j theta_{jk x_ij}
//                     * Phi(u_i' xi_k)^{y_i} (1-Phi)^{1-y_i}   + log prior,
// evaluated in unconstrained coordinates (prior includes the log-ratio
// Jacobian, which merges into the Dirichlet kernels' exponents).
//
// The evaluator caches per-unit class contributions at a base point so that
// one- and two-coordinate perturbations (for finite differences) cost O(n)
// or O(nK) instead of a full O(nKJ) rebuild.
class MarginalModel {
 public:
  MarginalModel(const SurveyDataset& data, Vector wtilde, PriorSpec prior,
                UnconstrainedLayout lay)
      : lay_(std::move(lay)), wtilde_(std::move(wtilde)), prior_(std::move(prior)),
        n_(data.n()), J_(data.n_items()), R_(lay_.max_levels()),
        xs_(gibbs_flatten(data)), u_block_(covblock(data)),
        y_(data.outcome) {}

  const UnconstrainedLayout& layout() const { return lay_; }

  // rebuild all caches at a new base point
  void rebase(const Vector& u) {
    base_ = u;
    params_ = from_unconstrained(u, lay_);
    const int K = lay_.K;
    logpi_.resize(K);
    for (int k = 0; k < K; ++k) logpi_[k] = std::log(params_.pi[k]);
    logtheta_.assign(static_cast<std::size_t>(K) * J_ * R_, 0.0);
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < J_; ++j)
        for (int r = 0; r < lay_.item_levels[j]; ++r)
          logtheta_[(static_cast<std::size_t>(k) * J_ + j) * R_ + r] =
              std::log(params_.theta(j, k, r));
    if (lay_.q_block > 0) {
      lp_ = u_block_ * params_.xi.transpose();  // n x K
      lo_.resize(n_, K);
      for (int i = 0; i < n_; ++i)
        for (int k = 0; k < K; ++k)
          lo_(i, k) = y_[i] == 1 ? log_normal_cdf(lp_(i, k))
                                 : log_normal_cdf(-lp_(i, k));
    }
    // per-unit class terms, shifted by the row maximum for stable sums
    atil_.resize(n_, K);
    rowmax_.resize(n_);
    ltil_.resize(n_);
    for (int i = 0; i < n_; ++i) {
      const int* xrow = xs_.data() + static_cast<std::size_t>(i) * J_;
      double best = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        const double* ltk =
            logtheta_.data() + static_cast<std::size_t>(k) * J_ * R_;
        double acc = logpi_[k];
        for (int j = 0; j < J_; ++j) acc += ltk[j * R_ + xrow[j]];
        if (lay_.q_block > 0) acc += lo_(i, k);
        atil_(i, k) = acc;
        best = std::max(best, acc);
      }
      rowmax_[i] = best;
      double tot = 0.0;
      for (int k = 0; k < K; ++k)
        tot += (atil_(i, k) = std::exp(atil_(i, k) - best));
      ltil_[i] = tot;
    }
    base_logprior_ = logprior_full();
    base_unit_ll_ = rowmax_.array() + ltil_.array().log();
    base_value_ = (wtilde_.array() * base_unit_ll_.array()).sum() + base_logprior_;
  }

  double value() const { return base_value_; }
  const Vector& base() const { return base_; }

  // evaluate the log pseudo-posterior at base + sum of coordinate deltas
  // (at most two); optionally returns per-unit log marginal likelihoods
  double eval(const std::vector<std::pair<int, double>>& deltas,
              Vector* unit_ll = nullptr) const {
    const int K = lay_.K;
    double dprior = 0.0;
    bool pi_changed = false;
    Vector newlogpi;
    // per-class multiplicative per-unit adjustments
    std::map<int, Vector> class_extra;

    // group theta deltas hitting the same row, and xi deltas the same class
    std::map<std::pair<int, int>, std::vector<std::pair<int, double>>> theta_rows;
    std::map<int, std::vector<std::pair<int, double>>> xi_rows;
    std::vector<double> pi_deltas(K - 1, 0.0);

    for (const auto& [t, d] : deltas) {
      if (t < K - 1) {
        pi_deltas[t] += d;
        pi_changed = true;
      } else if (t < K - 1 + lay_.n_theta) {
        int rel = t - (K - 1);
        int j = 0;
        while (rel >= lay_.theta_prefix[j + 1]) ++j;
        rel -= lay_.theta_prefix[j];
        const int rj = lay_.item_levels[j];
        const int k = rel / (rj - 1);
        const int local = rel % (rj - 1);
        theta_rows[{j, k}].push_back({local, d});
      } else {
        const int rel = t - (K - 1) - lay_.n_theta;
        const int k = rel / lay_.q_block;
        const int col = rel % lay_.q_block;
        xi_rows[k].push_back({col, d});
      }
    }

    if (pi_changed) {
      std::array<double, 64> coords, p;
      for (int r = 0; r < K - 1; ++r) coords[r] = base_[r] + pi_deltas[r];
      detail::alr_inverse(coords.data(), K, p.data());
      newlogpi.resize(K);
      for (int k = 0; k < K; ++k) {
        newlogpi[k] = std::log(p[k]);
        dprior += prior_.alpha[k] * (newlogpi[k] - logpi_[k]);
      }
    }
    for (const auto& [jk, ds] : theta_rows) {
      const auto [j, k] = jk;
      const int rj = lay_.item_levels[j];
      std::array<double, 64> coords, p, dlev, emult;
      const int off = lay_.theta_offset(j, k);
      for (int r = 0; r < rj - 1; ++r) coords[r] = base_[off + r];
      for (const auto& [local, d] : ds) coords[local] += d;
      detail::alr_inverse(coords.data(), rj, p.data());
      const double* lt =
          logtheta_.data() + (static_cast<std::size_t>(k) * J_ + j) * R_;
      for (int r = 0; r < rj; ++r) {
        dlev[r] = std::log(p[r]) - lt[r];
        emult[r] = std::exp(dlev[r]);
        dprior += prior_.eta[r] * dlev[r];
      }
      Vector& extra = class_extra.try_emplace(k).first->second;
      if (extra.size() == 0) extra = Vector::Ones(n_);
      for (int i = 0; i < n_; ++i)
        extra[i] *= emult[xs_[static_cast<std::size_t>(i) * J_ + j]];
    }
    for (const auto& [k, ds] : xi_rows) {
      Vector dlp = Vector::Zero(n_);
      for (const auto& [col, d] : ds) {
        dlp += d * u_block_.col(col);
        const int t = lay_.xi_offset(k, col);
        const double x0 = base_[t] - prior_.mu0[col];
        const double x1 = x0 + d;
        dprior -= 0.5 * (x1 * x1 - x0 * x0) / prior_.sigma0_diag[col];
      }
      Vector& extra = class_extra.try_emplace(k).first->second;
      if (extra.size() == 0) extra = Vector::Ones(n_);
      for (int i = 0; i < n_; ++i) {
        const double lpn = lp_(i, k) + dlp[i];
        const double lon =
            y_[i] == 1 ? log_normal_cdf(lpn) : log_normal_cdf(-lpn);
        extra[i] *= std::exp(lon - lo_(i, k));
      }
    }

    Eigen::ArrayXd newl;
    if (pi_changed) {
      Vector scale(K);
      for (int k = 0; k < K; ++k) scale[k] = std::exp(newlogpi[k] - logpi_[k]);
      newl = (atil_ * scale).array();
      for (const auto& [k, extra] : class_extra)
        newl += atil_.col(k).array() * scale[k] * (extra.array() - 1.0);
    } else {
      newl = ltil_.array();
      for (const auto& [k, extra] : class_extra)
        newl += atil_.col(k).array() * (extra.array() - 1.0);
    }
    Eigen::ArrayXd ull = rowmax_.array() + newl.log();
    if (unit_ll) *unit_ll = ull.matrix();
    return (wtilde_.array() * ull).sum() + base_logprior_ + dprior;
  }

  // central-difference gradient; optionally the n x d per-unit score matrix
  // (scores of the unit log marginal likelihoods, prior excluded)
  Vector gradient(const Vector& at, double h, Matrix* unit_scores = nullptr) {
    rebase(at);
    const int d = lay_.dim();
    Vector g(d);
    if (unit_scores) unit_scores->resize(n_, d);
    Vector up, um;
    for (int t = 0; t < d; ++t) {
      const double fp = eval({{t, h}}, unit_scores ? &up : nullptr);
      const double fm = eval({{t, -h}}, unit_scores ? &um : nullptr);
      g[t] = (fp - fm) / (2.0 * h);
      if (unit_scores) unit_scores->col(t) = (up - um) / (2.0 * h);
    }
    return g;
  }

  // Hessian as the Jacobian of the finite-difference gradient: caches are
  // rebuilt independently at each outer perturbation, so the symmetry of the
  // result genuinely cross-checks the incremental algebra
  Matrix hessian(const Vector& at, double h) {
    const int d = lay_.dim();
    Matrix hess(d, d);
    Vector shifted = at;
    for (int b = 0; b < d; ++b) {
      shifted[b] = at[b] + h;
      const Vector gp = gradient(shifted, h);
      shifted[b] = at[b] - h;
      const Vector gm = gradient(shifted, h);
      shifted[b] = at[b];
      hess.col(b) = (gp - gm) / (2.0 * h);
    }
    return hess;
  }

 private:
  static std::vector<int> gibbs_flatten(const SurveyDataset& d) {
    return detail::flatten_items(d);
  }
  static Matrix covblock(const SurveyDataset& d) { return detail::u_block_of(d); }

  double logprior_full() const {
    // Dirichlet kernels plus the log-ratio Jacobian: exponents alpha_k, eta_r
    double lp = 0.0;
    for (int k = 0; k < lay_.K; ++k) lp += prior_.alpha[k] * logpi_[k];
    for (int j = 0; j < J_; ++j)
      for (int k = 0; k < lay_.K; ++k)
        for (int r = 0; r < lay_.item_levels[j]; ++r)
          lp += prior_.eta[r] *
                logtheta_[(static_cast<std::size_t>(k) * J_ + j) * R_ + r];
    for (int k = 0; k < lay_.K; ++k)
      for (int col = 0; col < lay_.q_block; ++col) {
        const double x = params_.xi(k, col) - prior_.mu0[col];
        lp -= 0.5 * x * x / prior_.sigma0_diag[col];
      }
    return lp;
  }

  UnconstrainedLayout lay_;
  Vector wtilde_;
  PriorSpec prior_;
  int n_, J_, R_;
  std::vector<int> xs_;
  Matrix u_block_;
  IntVector y_;

  // caches at the base point
  Vector base_;
  ModelParams params_;
  std::vector<double> logpi_, logtheta_;
  Matrix lp_, lo_, atil_;
  Vector rowmax_, ltil_, base_unit_ll_;
  double base_logprior_ = 0.0, base_value_ = 0.0;
};

// ----- sandwich rescaling of the posterior draws ------------------------------

struct AdjustReport {
  bool adjusted = false;
  std::string skip_reason;
  double ridge_h = 0.0, ridge_v = 0.0, ridge_sigma = 0.0;
  double cond_h = 0.0, cond_sigma = 0.0;
  double hessian_asymmetry = 0.0;
  int n_boot = 0;
  int dim = 0;
};

struct AdjustedChain {
  ChainOutput chain;
  Matrix r1, r2;  // upper factors: R1'R1 = sandwich V, R2'R2 = posterior cov
  AdjustReport report;
};

namespace detail {

// upper Cholesky factor of sym(a) + ridge, escalating 1e-8 -> 1e-4
inline Matrix chol_upper_ridged(const Matrix& a, double ridge0,
                                double* ridge_used, const std::string& what) {
  const int d = static_cast<int>(a.rows());
  Matrix sym = 0.5 * (a + a.transpose());
  for (double r = 0.0;; r = r == 0.0 ? ridge0 : r * 10.0) {
    if (r > 1e-4)
      throw NumericalError(what + " is not positive definite after ridge escalation");
    Eigen::LLT<Matrix> llt(sym + r * Matrix::Identity(d, d));
    if (llt.info() == Eigen::Success) {
      *ridge_used = r;
      return llt.matrixU();
    }
  }
}

inline double condition_number(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()),
                                           Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  return ev[ev.size() - 1] / ev[0];
}

}  // namespace detail

// the rescaling map itself: rows of `draws` are unconstrained draws; each is
// centered, multiplied by R2^{-1} R1 and recentered. Equal factors short-
// circuit so the identity case is bitwise exact.
inline Matrix apply_rescaling(const Matrix& draws,
                              const Eigen::RowVectorXd& center,
                              const Matrix& r1, const Matrix& r2) {
  const auto d = draws.cols();
  if (center.size() != d || r1.rows() != d || r1.cols() != d ||
      r2.rows() != d || r2.cols() != d)
    throw ValidationError("apply_rescaling: dimension mismatch");
  if (r1.rows() == r2.rows() && (r1.array() == r2.array()).all()) return draws;
  const Matrix map = r2.triangularView<Eigen::Upper>().solve(r1);
  return ((draws.rowwise() - center) * map).rowwise() + center;
}

// design-based rescaling of the chain: V = H^-1 J H^-1 with H the negative
// Hessian of the marginalized log pseudo-posterior at the draw mean and J the
// covariance of rescaled-bootstrap weighted scores; draws are mapped so their
// covariance matches V while the mean is preserved
inline AdjustedChain sandwich_adjust(const ChainOutput& chain,
                                     const SurveyDataset& data,
                                     const PriorSpec& prior,
                                     const McmcConfig& cfg, RngState& rng) {
  AdjustedChain out;
  out.chain = chain;
  const int M = chain.n_draws();
  if (M < 2) throw ValidationError("sandwich_adjust: need at least 2 draws");
  const UnconstrainedLayout lay = UnconstrainedLayout::of_chain(chain);
  const int d = lay.dim();
  out.report.dim = d;
  out.report.n_boot = cfg.n_boot_reps;

  Matrix draws(M, d);
  for (int m = 0; m < M; ++m)
    draws.row(m) = to_unconstrained(chain.draws[m], lay).transpose();
  const Eigen::RowVectorXd center = draws.colwise().mean();

  try {
    // strata -> clusters -> units, for the within-stratum resampling
    std::map<int, std::map<int, std::vector<int>>> strata;
    for (int i = 0; i < data.n(); ++i)
      strata[data.stratum[i]][data.cluster[i]].push_back(i);
    for (const auto& [h, clusters] : strata)
      if (clusters.size() < 2)
        throw NumericalError(
            "score bootstrap needs at least 2 clusters per stratum (stratum " +
            std::to_string(h) + " has " + std::to_string(clusters.size()) + ")");

    const NormalizedWeights nw = normalize_weights(data.weight);
    MarginalModel model(data, nw.wtilde, prior, lay);

    const Vector theta_bar = center.transpose();
    Matrix unit_scores;
    model.gradient(theta_bar, cfg.fd_step, &unit_scores);
    Matrix hess = model.hessian(theta_bar, cfg.fd_step);
    Matrix h_neg = -hess;
    out.report.hessian_asymmetry =
        (h_neg - h_neg.transpose()).cwiseAbs().maxCoeff() /
        h_neg.cwiseAbs().maxCoeff();
    h_neg = 0.5 * (h_neg + h_neg.transpose());

    // J: covariance of bootstrap-weighted score totals
    const int B = cfg.n_boot_reps;
    Matrix boot_scores(B, d);
    std::vector<double> wstar(data.n());
    for (int b = 0; b < B; ++b) {
      std::fill(wstar.begin(), wstar.end(), 0.0);
      for (const auto& [h, clusters] : strata) {
        const int nh = static_cast<int>(clusters.size());
        std::vector<const std::vector<int>*> members;
        members.reserve(nh);
        for (const auto& [cid, idx] : clusters) members.push_back(&idx);
        const double factor = static_cast<double>(nh) / (nh - 1);
        for (int t = 0; t < nh - 1; ++t) {
          const int pick = std::min(
              static_cast<int>(rng.uniform() * nh), nh - 1);
          for (int i : *members[pick]) wstar[i] += data.weight[i] * factor;
        }
      }
      Eigen::RowVectorXd sb = Eigen::RowVectorXd::Zero(d);
      for (int i = 0; i < data.n(); ++i)
        if (wstar[i] != 0.0)
          sb += (wstar[i] / nw.kappa) * unit_scores.row(i);
      boot_scores.row(b) = sb;
    }
    const Eigen::RowVectorXd smean = boot_scores.colwise().mean();
    const Matrix centered = boot_scores.rowwise() - smean;
    Matrix j_mat = (centered.transpose() * centered) / (B - 1);

    // factors
    detail::chol_upper_ridged(h_neg, cfg.ridge, &out.report.ridge_h,
                              "sandwich H");
    out.report.cond_h = detail::condition_number(h_neg);
    Eigen::LLT<Matrix> hllt(h_neg +
                            out.report.ridge_h * Matrix::Identity(d, d));
    const Matrix h_inv = hllt.solve(Matrix::Identity(d, d));
    const Matrix v = h_inv * j_mat * h_inv;
    out.r1 = detail::chol_upper_ridged(v, cfg.ridge, &out.report.ridge_v,
                                       "sandwich V");
    const Matrix centered_draws = draws.rowwise() - center;
    Matrix sigma_post =
        (centered_draws.transpose() * centered_draws) / (M - 1);
    out.r2 = detail::chol_upper_ridged(sigma_post, cfg.ridge,
                                       &out.report.ridge_sigma,
                                       "posterior covariance");
    out.report.cond_sigma = detail::condition_number(sigma_post);

    const Matrix adjusted = apply_rescaling(draws, center, out.r1, out.r2);
    for (int m = 0; m < M; ++m) {
      ModelParams p = from_unconstrained(adjusted.row(m).transpose(), lay);
      if (chain.q_block == 0) p.xi = Matrix(chain.K, 0);
      out.chain.draws[m] = std::move(p);
    }
    out.report.adjusted = true;
  } catch (const NumericalError& e) {
    out.chain = chain;  // flagged, unadjusted
    out.report.adjusted = false;
    out.report.skip_reason = e.what();
  }
  return out;
}

}  // namespace swolca
