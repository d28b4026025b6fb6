// Core value types shared across the toolkit: survey data container, model
// parameter blocks, prior/config structs, weight normalization and the
// mixture reference coding used for the probit regression.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace swolca {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using IntVector = Eigen::VectorXi;
using IntMatrix = Eigen::MatrixXi;

// thrown on malformed input (bad data, bad config); CLI maps this to exit 2
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// thrown on numerical failure (non-finite values, singular systems,
// non-convergence); CLI maps this to exit 3
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// dense 3d array (items x classes x levels for the item-response block)
class Tensor3 {
 public:
  Tensor3() : d1_(0), d2_(0), d3_(0) {}
  Tensor3(int d1, int d2, int d3, double fill = 0.0)
      : d1_(d1), d2_(d2), d3_(d3),
        v_(static_cast<std::size_t>(d1) * d2 * d3, fill) {
    if (d1 < 0 || d2 < 0 || d3 < 0)
      throw ValidationError("Tensor3: negative dimension");
  }

  double& operator()(int i, int j, int k) { return v_[idx(i, j, k)]; }
  double operator()(int i, int j, int k) const { return v_[idx(i, j, k)]; }

  int dim1() const { return d1_; }
  int dim2() const { return d2_; }
  int dim3() const { return d3_; }
  std::size_t size() const { return v_.size(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }

  bool same_shape(const Tensor3& o) const {
    return d1_ == o.d1_ && d2_ == o.d2_ && d3_ == o.d3_;
  }

 private:
  std::size_t idx(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * d2_ + j) * d3_ + k;
  }
  int d1_, d2_, d3_;
  std::vector<double> v_;
};

// one analysis dataset: categorical item responses (codes 1..R_j), binary
// outcome, covariates, survey weights and design identifiers
struct SurveyDataset {
  IntMatrix items;                            // n x J, codes 1..R_j
  IntVector outcome;                          // n, in {0,1}
  Matrix covariates;                          // n x p (p may be 0)
  Vector weight;                              // n, strictly positive
  std::vector<int> stratum;                   // n
  std::vector<int> cluster;                   // n (psu id, unique across strata)
  std::vector<int> item_levels;               // J, R_j >= 2
  std::vector<std::string> covariate_names;   // p (may be empty)

  int n() const { return static_cast<int>(items.rows()); }
  int n_items() const { return static_cast<int>(items.cols()); }
  int n_covariates() const { return static_cast<int>(covariates.cols()); }
  int max_levels() const {
    int r = 0;
    for (int v : item_levels) r = std::max(r, v);
    return r;
  }
};

struct ValidationIssue {
  long row;             // -1 when not row-specific
  std::string column;
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const { return issues.empty(); }
  std::string to_string() const {
    std::ostringstream os;
    for (const auto& is : issues) {
      if (is.row >= 0) os << "row " << is.row << " ";
      if (!is.column.empty()) os << "[" << is.column << "] ";
      os << is.message << "\n";
    }
    return os.str();
  }
};

// model parameter state: class weights pi (K), item-response probabilities
// theta (J x K x R), probit coefficients xi (K x (1+p)); xi has zero columns
// for the unsupervised model
struct ModelParams {
  Vector pi;
  Tensor3 theta;
  Matrix xi;

  int n_classes() const { return static_cast<int>(pi.size()); }
};

struct PriorSpec {
  Vector alpha;        // Dirichlet concentration for pi, length K
  Vector eta;          // Dirichlet concentration for each theta row, length R
  Vector mu0;          // normal prior mean for each class's xi block, length 1+p
  Vector sigma0_diag;  // prior variances (diagonal), length 1+p

  // alpha_k = 1/K (overfitted-mixture shrinkage), eta_r = 1 (flat),
  // xi block ~ N(0, 4 I)
  static PriorSpec defaults(int K, int R, int q_block) {
    PriorSpec p;
    p.alpha = Vector::Constant(K, 1.0 / K);
    p.eta = Vector::Ones(R);
    p.mu0 = Vector::Zero(q_block);
    p.sigma0_diag = Vector::Constant(q_block, 4.0);
    return p;
  }
};

struct McmcConfig {
  int n_iter = 20000;
  int n_burn = 10000;
  int thin = 5;
  std::uint64_t seed = 1;
  int k_max = 30;              // class ceiling for the adaptive stage
  double class_cutoff = 0.05;  // pi_k threshold when counting occupied classes
  bool adjust_variance = true; // post-hoc sandwich rescaling of the chain
  int n_boot_reps = 100;       // replicates for the middle covariance matrix
  double fd_step = 1e-5;       // finite-difference step
  double ridge = 1e-8;         // starting ridge for Cholesky factorizations
  std::optional<int> fixed_k;  // skip the adaptive stage and use this K

  int n_kept() const { return (n_iter - n_burn) / thin; }

  void validate() const {
    if (n_iter <= 0) throw ValidationError("n_iter must be positive");
    if (n_burn < 0 || n_burn >= n_iter)
      throw ValidationError("n_burn must be in [0, n_iter)");
    if (thin <= 0) throw ValidationError("thin must be positive");
    if (n_kept() <= 0)
      throw ValidationError("no kept iterations: (n_iter - n_burn) / thin == 0");
    if (k_max < 1) throw ValidationError("k_max must be >= 1");
    if (!(class_cutoff > 0.0) || !(class_cutoff <= 1.0))
      throw ValidationError("class_cutoff must be in (0, 1]");
    if (n_boot_reps < 2) throw ValidationError("n_boot_reps must be >= 2");
    if (!(fd_step > 0.0)) throw ValidationError("fd_step must be positive");
    if (!(ridge > 0.0)) throw ValidationError("ridge must be positive");
    if (fixed_k && *fixed_k < 1) throw ValidationError("fixed_k must be >= 1");
  }
};

struct NormalizedWeights {
  double kappa;    // mean raw weight
  Vector wtilde;   // weight / kappa, sums to n
};

// rescale raw weights to sum to the sample size; the pseudo-likelihood
// exponent is w_i/kappa so this keeps the information content at n units
inline NormalizedWeights normalize_weights(const Vector& weight) {
  const long n = weight.size();
  if (n == 0) throw ValidationError("normalize_weights: empty weight vector");
  for (long i = 0; i < n; ++i) {
    if (!std::isfinite(weight[i]) || weight[i] <= 0.0) {
      std::ostringstream os;
      os << "normalize_weights: weight[" << i << "] = " << weight[i]
         << " is not strictly positive and finite";
      throw ValidationError(os.str());
    }
  }
  NormalizedWeights out;
  out.kappa = weight.sum() / static_cast<double>(n);
  out.wtilde = weight / out.kappa;
  return out;
}

// mixture reference coding: the design row for an individual in class c has
// K blocks of length 1+p; block c is (1, v), all other blocks are zero, so
// each class carries its own intercept and covariate effects
struct CodingSpec {
  int n_classes = 0;
  int n_covariates = 0;

  int block_size() const { return 1 + n_covariates; }
  int total_size() const { return n_classes * block_size(); }

  void validate() const {
    if (n_classes < 1) throw ValidationError("CodingSpec: n_classes must be >= 1");
    if (n_covariates < 0)
      throw ValidationError("CodingSpec: n_covariates must be >= 0");
  }
};

// cls is 1-based
inline Vector build_design_row(int cls, const Vector& covariates,
                               const CodingSpec& coding) {
  coding.validate();
  if (cls < 1 || cls > coding.n_classes) {
    std::ostringstream os;
    os << "build_design_row: class " << cls << " out of range 1.."
       << coding.n_classes;
    throw ValidationError(os.str());
  }
  if (covariates.size() != coding.n_covariates)
    throw ValidationError("build_design_row: covariate length mismatch");
  Vector row = Vector::Zero(coding.total_size());
  const int off = (cls - 1) * coding.block_size();
  row[off] = 1.0;
  for (int j = 0; j < coding.n_covariates; ++j) row[off + 1 + j] = covariates[j];
  return row;
}

// structural checks on an assembled dataset; returns all problems found
inline ValidationReport validate_dataset(const SurveyDataset& d) {
  ValidationReport rep;
  const long n = d.items.rows();
  const int J = static_cast<int>(d.items.cols());

  if (n == 0) {
    rep.issues.push_back({-1, "", "dataset has no rows"});
    return rep;
  }
  if (J == 0) rep.issues.push_back({-1, "", "dataset has no item columns"});
  if (static_cast<int>(d.item_levels.size()) != J)
    rep.issues.push_back({-1, "", "item_levels length != number of items"});
  auto dim_check = [&](long got, const char* what) {
    if (got != n) {
      std::ostringstream os;
      os << what << " has length " << got << ", expected " << n;
      rep.issues.push_back({-1, what, os.str()});
    }
  };
  dim_check(d.outcome.size(), "y");
  dim_check(d.weight.size(), "weight");
  dim_check(static_cast<long>(d.stratum.size()), "stratum");
  dim_check(static_cast<long>(d.cluster.size()), "cluster");
  dim_check(d.covariates.rows() == 0 && d.covariates.cols() == 0
                ? n  // absent covariate block is fine
                : d.covariates.rows(),
            "covariates");
  if (!rep.ok()) return rep;  // dimension errors make row checks meaningless

  for (int j = 0; j < J; ++j) {
    if (d.item_levels[j] < 2) {
      std::ostringstream os;
      os << "item " << (j + 1) << " has " << d.item_levels[j]
         << " levels, need >= 2";
      rep.issues.push_back({-1, "item_" + std::to_string(j + 1), os.str()});
    }
  }
  for (long i = 0; i < n; ++i) {
    for (int j = 0; j < J; ++j) {
      const int x = d.items(i, j);
      if (x < 1 || x > d.item_levels[j]) {
        std::ostringstream os;
        os << "item code " << x << " outside 1.." << d.item_levels[j];
        rep.issues.push_back({i, "item_" + std::to_string(j + 1), os.str()});
      }
    }
    if (d.outcome[i] != 0 && d.outcome[i] != 1)
      rep.issues.push_back({i, "y", "outcome must be 0 or 1"});
    if (!std::isfinite(d.weight[i]) || d.weight[i] <= 0.0)
      rep.issues.push_back({i, "weight", "weight must be positive and finite"});
    for (int j = 0; j < d.covariates.cols(); ++j) {
      if (!std::isfinite(d.covariates(i, j))) {
        std::string name = j < static_cast<int>(d.covariate_names.size())
                               ? d.covariate_names[j]
                               : "covariate_" + std::to_string(j + 1);
        rep.issues.push_back({i, name, "covariate must be finite"});
      }
    }
  }

  // a psu must not straddle strata, otherwise resampling within strata breaks
  std::vector<std::pair<int, int>> seen;  // (cluster, stratum)
  for (long i = 0; i < n; ++i) {
    bool found = false;
    for (auto& cs : seen) {
      if (cs.first == d.cluster[i]) {
        found = true;
        if (cs.second != d.stratum[i])
          rep.issues.push_back(
              {i, "cluster", "cluster appears in more than one stratum"});
        break;
      }
    }
    if (!found) seen.emplace_back(d.cluster[i], d.stratum[i]);
  }
  return rep;
}

inline void require_valid(const SurveyDataset& d) {
  ValidationReport rep = validate_dataset(d);
  if (!rep.ok()) {
    std::string msg = rep.to_string();
    const std::size_t cap = 2000;  // keep error messages bounded
    if (msg.size() > cap) msg = msg.substr(0, cap) + "... (truncated)";
    throw ValidationError("invalid dataset:\n" + msg);
  }
}

}  // namespace swolca
