// Gibbs sampler for the (optionally outcome-supervised) latent class model
// under a survey-weighted pseudo-likelihood: each unit's likelihood factor is
// raised to wtilde_i = w_i / kappa, so class counts in the full conditionals
// become weighted counts. The probit outcome block uses latent-utility
// augmentation and mixture reference coding (class-specific intercept +
// covariate effects). Class allocation follows the unweighted conditional.
#pragma once

#include "swolca/core.hpp"
#include "swolca/distributions.hpp"

#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

namespace swolca {

struct GibbsState {
  ModelParams params;
  std::vector<int> c;  // 0-based class labels
  Vector z;            // latent probit utilities (empty when unsupervised)
  long iter = 0;
};

// ----- full-conditional parameter builders (exposed for direct checking) ----

// Dirichlet parameter for pi | c: alpha_k + sum of wtilde over units in k
inline Vector pi_posterior_alpha(const std::vector<int>& c, const Vector& wtilde,
                                 const Vector& alpha) {
  Vector out = alpha;
  for (std::size_t i = 0; i < c.size(); ++i) out[c[i]] += wtilde[i];
  return out;
}

// Dirichlet parameter for theta_{jk.} | c, x: eta_r + weighted count of
// level-r responses to item j among units in class k
inline Vector theta_posterior_eta(int j, int k, const IntMatrix& items,
                                  const std::vector<int>& c,
                                  const Vector& wtilde, const Vector& eta,
                                  int n_levels) {
  Vector out = eta.head(n_levels);
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c[i] == k) out[items(i, j) - 1] += wtilde[i];
  return out;
}

// normal moments for class k's coefficient block xi_k | c, z: precision
// Sigma0^-1 + sum wtilde u u', with the weighted class-membership selection
// applied to both the mean and the covariance. A ridge is added only if the
// Cholesky of the precision fails (it should not: the prior term is PD).
inline void xi_posterior_moments(int k, const Matrix& u_block,
                                 const std::vector<int>& c,
                                 const Vector& wtilde, const Vector& z,
                                 const Vector& mu0, const Vector& sigma0_diag,
                                 Vector* mean_out, Matrix* cov_out) {
  const int q = static_cast<int>(u_block.cols());
  Matrix prec = Matrix::Zero(q, q);
  Vector rhs = Vector::Zero(q);
  for (int j = 0; j < q; ++j) {
    prec(j, j) = 1.0 / sigma0_diag[j];
    rhs[j] = mu0[j] / sigma0_diag[j];
  }
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c[i] != k) continue;
    const auto u = u_block.row(i);
    prec.noalias() += wtilde[i] * u.transpose() * u;
    rhs.noalias() += (wtilde[i] * z[i]) * u.transpose();
  }
  for (double ridge = 0.0;; ridge = ridge == 0.0 ? 1e-8 : ridge * 100.0) {
    if (ridge > 1e-4) {
      throw NumericalError(
          "xi update: precision matrix for class " + std::to_string(k + 1) +
          " is not positive definite after ridge escalation");
    }
    Eigen::LLT<Matrix> llt(prec + ridge * Matrix::Identity(q, q));
    if (llt.info() != Eigen::Success) continue;
    *mean_out = llt.solve(rhs);
    *cov_out = llt.solve(Matrix::Identity(q, q));
    return;
  }
}

// ----- single-block updates -------------------------------------------------

inline void update_pi(GibbsState& s, const Vector& wtilde,
                      const PriorSpec& prior, RngState& rng) {
  s.params.pi = draw_dirichlet(pi_posterior_alpha(s.c, wtilde, prior.alpha), rng);
}

inline void update_theta(GibbsState& s, const SurveyDataset& data,
                         const Vector& wtilde, const PriorSpec& prior,
                         RngState& rng) {
  const int J = data.n_items();
  const int K = s.params.n_classes();
  const int R = s.params.theta.dim3();
  // one weighted-count pass, then independent Dirichlet rows
  Tensor3 counts(J, K, R, 0.0);
  const int n = data.n();
  for (int i = 0; i < n; ++i) {
    const int k = s.c[i];
    const double w = wtilde[i];
    for (int j = 0; j < J; ++j) counts(j, k, data.items(i, j) - 1) += w;
  }
  for (int j = 0; j < J; ++j) {
    const int rj = data.item_levels[j];
    Vector a(rj);
    for (int k = 0; k < K; ++k) {
      for (int r = 0; r < rj; ++r) a[r] = prior.eta[r] + counts(j, k, r);
      Vector row = draw_dirichlet(a, rng);
      for (int r = 0; r < rj; ++r) s.params.theta(j, k, r) = row[r];
    }
  }
}

inline void update_xi(GibbsState& s, const Matrix& u_block,
                      const Vector& wtilde, const PriorSpec& prior,
                      RngState& rng) {
  const int K = s.params.n_classes();
  Vector mean;
  Matrix cov;
  for (int k = 0; k < K; ++k) {
    xi_posterior_moments(k, u_block, s.c, wtilde, s.z, prior.mu0,
                         prior.sigma0_diag, &mean, &cov);
    s.params.xi.row(k) = draw_mvnormal(mean, cov, rng).transpose();
  }
}

// class allocation; supervised adds the probit-utility density term. The
// weights do not enter here: the allocation is the unweighted conditional.
inline void update_c(GibbsState& s, const SurveyDataset& data,
                     const std::vector<int>& xs_flat, const Matrix& u_block,
                     bool supervised, RngState& rng) {
  const int n = data.n();
  const int J = data.n_items();
  const int K = s.params.n_classes();
  const int R = s.params.theta.dim3();

  std::vector<double> logpi(K), lt(static_cast<std::size_t>(K) * J * R, 0.0);
  for (int k = 0; k < K; ++k) logpi[k] = std::log(s.params.pi[k]);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < J; ++j)
      for (int r = 0; r < data.item_levels[j]; ++r)
        lt[(static_cast<std::size_t>(k) * J + j) * R + r] =
            std::log(s.params.theta(j, k, r));

  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> lp;
  if (supervised) lp = u_block * s.params.xi.transpose();  // n x K utilities

  std::vector<double> logp(K), prob(K);
  for (int i = 0; i < n; ++i) {
    const int* xi_row = xs_flat.data() + static_cast<std::size_t>(i) * J;
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      const double* ltk = lt.data() + static_cast<std::size_t>(k) * J * R;
      double acc = logpi[k];
      for (int j = 0; j < J; ++j) acc += ltk[j * R + xi_row[j]];
      if (supervised) {
        const double d = s.z[i] - lp(i, k);
        acc -= 0.5 * d * d;
      }
      logp[k] = acc;
      if (acc > best) best = acc;
    }
    if (!(best > -std::numeric_limits<double>::infinity()))
      throw NumericalError("update_c: all class log-probabilities are -inf");
    double total = 0.0;
    for (int k = 0; k < K; ++k) total += (prob[k] = std::exp(logp[k] - best));
    const double u = rng.uniform() * total;
    double cum = 0.0;
    int pick = K - 1;
    for (int k = 0; k < K; ++k) {
      cum += prob[k];
      if (u <= cum) {
        pick = k;
        break;
      }
    }
    s.c[i] = pick;
  }
}

// latent probit utilities: truncated at zero on the side given by the outcome
inline void update_z(GibbsState& s, const SurveyDataset& data,
                     const Matrix& u_block, RngState& rng) {
  const int n = data.n();
  const double inf = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double mean = u_block.row(i).dot(s.params.xi.row(s.c[i]));
    s.z[i] = data.outcome[i] == 1 ? draw_truncnormal(mean, 0.0, inf, rng)
                                  : draw_truncnormal(mean, -inf, 0.0, rng);
  }
}

// relabel all blocks by src (new label k takes old label src[k], 0-based)
inline void apply_label_permutation(ModelParams& p, std::vector<int>* c,
                                    const std::vector<int>& src) {
  const int K = p.n_classes();
  ModelParams out = p;
  for (int k = 0; k < K; ++k) {
    out.pi[k] = p.pi[src[k]];
    if (p.xi.size() > 0) out.xi.row(k) = p.xi.row(src[k]);
    for (int j = 0; j < p.theta.dim1(); ++j)
      for (int r = 0; r < p.theta.dim3(); ++r)
        out.theta(j, k, r) = p.theta(j, src[k], r);
  }
  p = std::move(out);
  if (c) {
    std::vector<int> inv(K);
    for (int k = 0; k < K; ++k) inv[src[k]] = k;
    for (auto& ci : *c) ci = inv[ci];
  }
}

// random-permutation step: forces label switching so the chain explores all
// K! symmetric modes and post-hoc relabeling is well posed
inline std::vector<int> permute_labels(GibbsState& s, RngState& rng) {
  const int K = s.params.n_classes();
  auto perm = draw_permutation(K, rng);
  std::vector<int> src(K);
  for (int k = 0; k < K; ++k) src[k] = perm[k] - 1;
  apply_label_permutation(s.params, &s.c, src);
  return src;
}

// weighted complete-data log pseudo-posterior (up to additive constants that
// do not involve the parameters); used for traces and invariance checks
inline double complete_log_pseudo_posterior(const GibbsState& s,
                                            const SurveyDataset& data,
                                            const Vector& wtilde,
                                            const PriorSpec& prior,
                                            const Matrix& u_block,
                                            bool supervised) {
  const int n = data.n();
  const int K = s.params.n_classes();
  double ll = 0.0;
  for (int i = 0; i < n; ++i) {
    const int k = s.c[i];
    double li = std::log(s.params.pi[k]);
    for (int j = 0; j < data.n_items(); ++j)
      li += std::log(s.params.theta(j, k, data.items(i, j) - 1));
    if (supervised) {
      const double d = s.z[i] - u_block.row(i).dot(s.params.xi.row(k));
      li += log_normal_pdf(d);
    }
    ll += wtilde[i] * li;
  }
  // symmetric priors
  for (int k = 0; k < K; ++k) ll += (prior.alpha[k] - 1.0) * std::log(s.params.pi[k]);
  for (int j = 0; j < data.n_items(); ++j)
    for (int k = 0; k < K; ++k)
      for (int r = 0; r < data.item_levels[j]; ++r)
        ll += (prior.eta[r] - 1.0) * std::log(s.params.theta(j, k, r));
  if (supervised) {
    for (int k = 0; k < K; ++k)
      for (int q = 0; q < s.params.xi.cols(); ++q) {
        const double d = s.params.xi(k, q) - prior.mu0[q];
        ll -= 0.5 * d * d / prior.sigma0_diag[q];
      }
  }
  return ll;
}

// ----- sampler drivers -------------------------------------------------------

struct ChainMeta {
  McmcConfig config;
  bool supervised = true;
  double kappa = 1.0;
  int accepted_k = 0;  // K used by the fixed stage
  double seconds = 0.0;
};

struct ChainOutput {
  int n = 0, J = 0, K = 0, R = 0, q_block = 0;
  std::vector<int> item_levels;
  std::vector<ModelParams> draws;                 // kept iterations
  std::vector<std::vector<std::uint16_t>> c_draws;  // kept x n, 0-based
  Vector logpost;                                 // complete-data trace
  ChainMeta meta;

  int n_draws() const { return static_cast<int>(draws.size()); }
};

struct AdaptiveResult {
  int k_hat = 0;
  std::vector<int> occupied_counts;  // per kept iteration
};

namespace detail {

inline std::vector<int> flatten_items(const SurveyDataset& data) {
  const int n = data.n(), J = data.n_items();
  std::vector<int> xs(static_cast<std::size_t>(n) * J);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < J; ++j)
      xs[static_cast<std::size_t>(i) * J + j] = data.items(i, j) - 1;
  return xs;
}

// covariate block (1, v_i) shared by every class's segment of the design row
inline Matrix u_block_of(const SurveyDataset& data) {
  Matrix u(data.n(), 1 + data.n_covariates());
  u.col(0).setOnes();
  if (data.n_covariates() > 0) u.rightCols(data.n_covariates()) = data.covariates;
  return u;
}

inline GibbsState init_state(const SurveyDataset& data, int K,
                             const Matrix& u_block, bool supervised,
                             RngState& rng) {
  GibbsState s;
  const int n = data.n();
  s.params.pi = Vector::Constant(K, 1.0 / K);
  s.params.theta = Tensor3(data.n_items(), K, data.max_levels(), 0.0);
  for (int j = 0; j < data.n_items(); ++j)
    for (int k = 0; k < K; ++k)
      for (int r = 0; r < data.item_levels[j]; ++r)
        s.params.theta(j, k, r) = 1.0 / data.item_levels[j];
  s.c.resize(n);
  Vector unif = Vector::Constant(K, 1.0);
  for (int i = 0; i < n; ++i) s.c[i] = draw_categorical(unif, rng) - 1;
  if (supervised) {
    s.params.xi = Matrix::Zero(K, u_block.cols());
    s.z = Vector::Zero(n);
    update_z(s, data, u_block, rng);
  } else {
    s.params.xi = Matrix(K, 0);
  }
  return s;
}

template <typename KeptFn>
void run_sampler_loop(const SurveyDataset& data, const Vector& wtilde,
                      const PriorSpec& prior, const McmcConfig& cfg, int K,
                      bool supervised, RngState& rng, KeptFn&& on_kept) {
  const auto xs = flatten_items(data);
  const Matrix u_block = u_block_of(data);
  GibbsState s = init_state(data, K, u_block, supervised, rng);
  for (int t = 1; t <= cfg.n_iter; ++t) {
    s.iter = t;
    update_pi(s, wtilde, prior, rng);
    update_theta(s, data, wtilde, prior, rng);
    if (supervised) update_xi(s, u_block, wtilde, prior, rng);
    update_c(s, data, xs, u_block, supervised, rng);
    if (supervised) update_z(s, data, u_block, rng);
    permute_labels(s, rng);
    if (t > cfg.n_burn && (t - cfg.n_burn) % cfg.thin == 0)
      on_kept(s, u_block);
  }
}

}  // namespace detail

// adaptive stage: overfitted mixture at K = k_max with shrinkage prior; the
// selected class count is the (lower) median number of classes whose weight
// exceeds class_cutoff across kept iterations
inline AdaptiveResult run_adaptive(const SurveyDataset& data,
                                   const Vector& wtilde, const PriorSpec& prior,
                                   const McmcConfig& cfg, bool supervised,
                                   RngState& rng) {
  cfg.validate();
  AdaptiveResult res;
  detail::run_sampler_loop(
      data, wtilde, prior, cfg, cfg.k_max, supervised, rng,
      [&](const GibbsState& s, const Matrix&) {
        int occ = 0;
        for (int k = 0; k < cfg.k_max; ++k)
          if (s.params.pi[k] > cfg.class_cutoff) ++occ;
        res.occupied_counts.push_back(occ);
      });
  std::vector<int> sorted = res.occupied_counts;
  std::sort(sorted.begin(), sorted.end());
  res.k_hat = std::max(1, sorted[(sorted.size() - 1) / 2]);
  return res;
}

// fixed stage at a known class count; stores thinned post-burn-in draws
inline ChainOutput run_fixed(const SurveyDataset& data, const Vector& wtilde,
                             const PriorSpec& prior, const McmcConfig& cfg,
                             int K, bool supervised, RngState& rng) {
  cfg.validate();
  if (K < 1) throw ValidationError("run_fixed: K must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  ChainOutput out;
  out.n = data.n();
  out.J = data.n_items();
  out.K = K;
  out.R = data.max_levels();
  out.q_block = supervised ? 1 + data.n_covariates() : 0;
  out.item_levels = data.item_levels;
  out.meta.config = cfg;
  out.meta.supervised = supervised;
  out.meta.accepted_k = K;
  out.draws.reserve(cfg.n_kept());
  out.c_draws.reserve(cfg.n_kept());
  std::vector<double> lp;
  lp.reserve(cfg.n_kept());
  detail::run_sampler_loop(
      data, wtilde, prior, cfg, K, supervised, rng,
      [&](const GibbsState& s, const Matrix& u_block) {
        out.draws.push_back(s.params);
        std::vector<std::uint16_t> ci(s.c.begin(), s.c.end());
        out.c_draws.push_back(std::move(ci));
        lp.push_back(complete_log_pseudo_posterior(s, data, wtilde, prior,
                                                   u_block, supervised));
      });
  out.logpost = Eigen::Map<Vector>(lp.data(), lp.size());
  out.meta.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return out;
}

// carry eta/mu0/sigma0 over to a different class count; alpha is reused only
// when its length already matches, otherwise reset to the 1/K default
inline PriorSpec resize_prior(const PriorSpec& base, int K) {
  PriorSpec p = base;
  if (p.alpha.size() != K) p.alpha = Vector::Constant(K, 1.0 / K);
  return p;
}

// adaptive stage at k_max to choose the class count, then a fixed-K run;
// config.fixed_k skips the adaptive stage entirely
inline ChainOutput run_two_stage(const SurveyDataset& data,
                                 const Vector& wtilde, const PriorSpec& prior,
                                 const McmcConfig& cfg, bool supervised,
                                 RngState& rng) {
  int k_hat;
  if (cfg.fixed_k) {
    k_hat = *cfg.fixed_k;
  } else {
    RngState arng = rng.fork(1);
    k_hat = run_adaptive(data, wtilde, resize_prior(prior, cfg.k_max), cfg,
                         supervised, arng)
                .k_hat;
  }
  RngState frng = rng.fork(2);
  return run_fixed(data, wtilde, resize_prior(prior, k_hat), cfg, k_hat,
                   supervised, frng);
}

}  // namespace swolca
