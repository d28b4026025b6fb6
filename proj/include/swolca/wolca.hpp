// Two-step comparator: unsupervised weighted overfitted LCA to recover the
// patterns, then a survey-weighted probit regression of the outcome on the
// modal class assignments with design-based (linearized) variance.
#pragma once

#include "swolca/core.hpp"
#include "swolca/gibbs.hpp"
#include "swolca/postprocess.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace swolca {

struct ProbitFit {
  Vector beta;          // K blocks of (intercept, covariates)
  Matrix cov;           // linearized design-based covariance
  Vector se, lower, upper;  // Wald t intervals
  double df = 0.0;      // #clusters - #strata
  double t_crit = 0.0;
  int n_iter = 0;
  double grad_norm = 0.0;  // max-abs weighted mean score at the solution
  double loglik = 0.0;     // weighted log-likelihood at the solution
};

namespace detail {

// inverse Mills ratio phi(t)/Phi(t), stable far into the lower tail
inline double mills(double t) {
  return std::exp(log_normal_pdf(t) - log_normal_cdf(t));
}

}  // namespace detail

// weighted probit MLE with raw weights (the point estimate is scale
// invariant) and Taylor-linearized variance from stratum-centered cluster
// score totals. The design matrix assigns each individual the class block of
// its modal latent class.
inline ProbitFit fit_weighted_probit(const SurveyDataset& data,
                                     const std::vector<int>& modal_class) {
  const int n = data.n();
  if (static_cast<int>(modal_class.size()) != n)
    throw ValidationError("fit_weighted_probit: modal_class length mismatch");
  if (data.outcome.size() != n)
    throw ValidationError("fit_weighted_probit: dataset has no outcome");
  int K = 0;
  for (int c : modal_class) {
    if (c < 0) throw ValidationError("fit_weighted_probit: negative class");
    K = std::max(K, c + 1);
  }
  std::vector<int> count(K, 0);
  for (int c : modal_class) count[c]++;
  for (int k = 0; k < K; ++k)
    if (count[k] == 0)
      throw ValidationError("fit_weighted_probit: class " +
                            std::to_string(k + 1) +
                            " has no individuals assigned");

  const CodingSpec coding{K, static_cast<int>(data.covariates.cols())};
  const int q = coding.total_size();
  Matrix x(n, q);
  for (int i = 0; i < n; ++i) {
    const Vector v = data.covariates.row(i).transpose();
    x.row(i) = build_design_row(modal_class[i] + 1, v, coding).transpose();
  }
  // weights enter as w / mean(w): the score root is scale invariant, and the
  // kappa factors cancel in the sandwich, so rescaling all weights by a
  // constant leaves the fit exactly unchanged
  const NormalizedWeights nw = normalize_weights(data.weight);
  const Vector& w = nw.wtilde;

  const auto loglik_at = [&](const Vector& lp) {
    double ll = 0.0;
    for (int i = 0; i < n; ++i)
      ll += w[i] *
            (data.outcome[i] == 1 ? log_normal_cdf(lp[i])
                                  : log_normal_cdf(-lp[i]));
    return ll;
  };

  ProbitFit fit;
  fit.beta = Vector::Zero(q);
  Vector lp = Vector::Zero(n);
  double ll = loglik_at(lp);
  Vector lambda(n), omega(n);
  const int max_iter = 100;
  bool converged = false;
  for (int it = 1; it <= max_iter; ++it) {
    fit.n_iter = it;
    for (int i = 0; i < n; ++i) {
      if (data.outcome[i] == 1) {
        const double m = detail::mills(lp[i]);
        lambda[i] = m;
        omega[i] = m * (m + lp[i]);
      } else {
        const double m = detail::mills(-lp[i]);
        lambda[i] = -m;
        omega[i] = m * (m - lp[i]);
      }
    }
    const Vector grad = x.transpose() * (w.array() * lambda.array()).matrix();
    fit.grad_norm = grad.cwiseAbs().maxCoeff() / n;
    if (fit.grad_norm < 1e-8) {
      converged = true;
      break;
    }
    const Matrix info =
        x.transpose() * (w.array() * omega.array()).matrix().asDiagonal() * x;
    Eigen::LLT<Matrix> llt(info);
    if (llt.info() != Eigen::Success)
      throw NumericalError("fit_weighted_probit: information matrix singular");
    Vector step = llt.solve(grad);
    // step halving keeps the weighted log-likelihood ascent monotone
    double ll_new;
    for (int half = 0;; ++half) {
      lp = x * (fit.beta + step);
      ll_new = loglik_at(lp);
      if (ll_new >= ll || half >= 40) break;
      step *= 0.5;
    }
    fit.beta += step;
    ll = ll_new;
  }
  fit.loglik = ll * nw.kappa;  // report on the raw-weight scale
  if (!converged)
    throw NumericalError(
        "fit_weighted_probit: no convergence after 100 iterations");

  // complete separation: a class whose members are all fitted at 0/1 in the
  // direction of their own outcome has a divergent intercept
  std::vector<int> pinned(K, 0);
  for (int i = 0; i < n; ++i) {
    const double p_hit = data.outcome[i] == 1 ? lp[i] : -lp[i];
    if (p_hit > 4.75) pinned[modal_class[i]]++;  // Phi beyond 1 - 1e-6
  }
  for (int k = 0; k < K; ++k)
    if (pinned[k] == count[k])
      throw NumericalError(
          "fit_weighted_probit: separation in class " + std::to_string(k + 1) +
          " (all fitted probabilities pinned at the observed outcome)");

  // linearized variance: cluster totals of weighted scores, centered within
  // stratum, with the n_h/(n_h-1) finite-cluster factor. lambda/omega are
  // already current at the solution from the last loop pass.
  const Matrix info =
      x.transpose() * (w.array() * omega.array()).matrix().asDiagonal() * x;
  std::map<int, std::map<int, Vector>> totals;  // stratum -> cluster -> sum
  for (int i = 0; i < n; ++i) {
    Vector& z = totals[data.stratum[i]]
                     .try_emplace(data.cluster[i], Vector::Zero(q))
                     .first->second;
    z += w[i] * lambda[i] * x.row(i).transpose();
  }
  long n_clusters = 0;
  Matrix j_hat = Matrix::Zero(q, q);
  for (const auto& [h, clusters] : totals) {
    const long nh = static_cast<long>(clusters.size());
    n_clusters += nh;
    if (nh < 2) continue;  // no within-stratum variance contribution
    Vector mean = Vector::Zero(q);
    for (const auto& [cid, z] : clusters) mean += z;
    mean /= static_cast<double>(nh);
    Matrix acc = Matrix::Zero(q, q);
    for (const auto& [cid, z] : clusters) {
      const Vector dz = z - mean;
      acc += dz * dz.transpose();
    }
    j_hat += (static_cast<double>(nh) / (nh - 1)) * acc;
  }
  fit.df = static_cast<double>(n_clusters - totals.size());
  if (!(fit.df > 0.0))
    throw ValidationError(
        "fit_weighted_probit: design degrees of freedom (#clusters - "
        "#strata) must be positive");

  Eigen::LLT<Matrix> llt(info);
  if (llt.info() != Eigen::Success)
    throw NumericalError("fit_weighted_probit: information matrix singular");
  const Matrix hinv_j = llt.solve(j_hat);
  Matrix v = llt.solve(hinv_j.transpose());
  fit.cov = 0.5 * (v + v.transpose());

  boost::math::students_t_distribution<double> tdist(fit.df);
  fit.t_crit = boost::math::quantile(tdist, 0.975);
  fit.se = fit.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  fit.lower = fit.beta - fit.t_crit * fit.se;
  fit.upper = fit.beta + fit.t_crit * fit.se;
  return fit;
}

// step 1: the same two-stage Gibbs machinery with the outcome blocked out of
// the allocation probabilities (and no xi/z updates at all)
inline ChainOutput fit_wolca_step1(const SurveyDataset& data,
                                   const PriorSpec& prior,
                                   const McmcConfig& cfg, RngState& rng) {
  const NormalizedWeights nw = normalize_weights(data.weight);
  return run_two_stage(data, nw.wtilde, prior, cfg, /*supervised=*/false, rng);
}

struct WolcaFit {
  ChainOutput step1;             // relabeled unsupervised chain
  int k_hat = 0;
  std::vector<int> modal_class;  // 0-based, ties toward the smaller label
  ProbitFit step2;
};

inline WolcaFit fit_wolca(const SurveyDataset& data, const PriorSpec& prior,
                          const McmcConfig& cfg, RngState& rng) {
  WolcaFit fit;
  ChainOutput raw = fit_wolca_step1(data, prior, cfg, rng);
  fit.k_hat = raw.meta.accepted_k;
  fit.step1 = relabel(raw, fit.k_hat).chain;
  fit.modal_class = modal_classes(fit.step1);
  fit.step2 = fit_weighted_probit(data, fit.modal_class);
  return fit;
}

}  // namespace swolca
