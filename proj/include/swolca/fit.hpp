// End-to-end fits: weight handling, two-stage sampling, relabeling, and the
// optional variance rescaling, shared by the CLI and the scenario runner.
#pragma once

#include "swolca/core.hpp"
#include "swolca/gibbs.hpp"
#include "swolca/postprocess.hpp"
#include "swolca/wolca.hpp"

#include <string>
#include <vector>

namespace swolca {

enum class ModelKind { swolca, solca, wolca };

inline const char* model_name(ModelKind m) {
  switch (m) {
    case ModelKind::swolca: return "swolca";
    case ModelKind::solca: return "solca";
    default: return "wolca";
  }
}

inline ModelKind model_from_name(const std::string& s) {
  if (s == "swolca") return ModelKind::swolca;
  if (s == "solca") return ModelKind::solca;
  if (s == "wolca") return ModelKind::wolca;
  throw ValidationError("unknown model '" + s +
                        "' (expected swolca, solca, or wolca)");
}

struct FitResult {
  ModelKind kind = ModelKind::swolca;
  int k_hat = 0;
  ChainOutput chain;             // relabeled; rescaled when adjusted
  ChainOutput chain_unadjusted;  // relabeled pre-rescaling copy (if adjusted)
  bool adjusted = false;
  AdjustReport adjust_report;
  std::vector<int> modal_class;
  std::vector<int> reference_partition;
  // wolca only
  ProbitFit step2;
};

// supervised one- or two-stage fit; solca is the identical model with all
// pseudo-likelihood weights forced to one
inline FitResult fit_supervised(const SurveyDataset& data, ModelKind kind,
                                const PriorSpec& prior, const McmcConfig& cfg,
                                RngState& rng) {
  if (kind == ModelKind::wolca)
    throw ValidationError("fit_supervised: use fit_wolca for wolca");
  FitResult res;
  res.kind = kind;
  const Vector wtilde = kind == ModelKind::solca
                            ? Vector::Ones(data.n())
                            : normalize_weights(data.weight).wtilde;
  RngState chain_rng = rng.fork(0);
  ChainOutput raw =
      run_two_stage(data, wtilde, prior, cfg, /*supervised=*/true, chain_rng);
  res.k_hat = raw.meta.accepted_k;
  if (kind == ModelKind::swolca)
    raw.meta.kappa = normalize_weights(data.weight).kappa;

  RelabeledChain rel = relabel(raw, res.k_hat);
  res.reference_partition = rel.reference_partition;
  res.modal_class = modal_classes(rel.chain);

  if (kind == ModelKind::swolca && cfg.adjust_variance) {
    res.chain_unadjusted = rel.chain;
    RngState adj_rng = rng.fork(1);
    AdjustedChain adj = sandwich_adjust(rel.chain, data,
                                        resize_prior(prior, res.k_hat), cfg,
                                        adj_rng);
    res.adjust_report = adj.report;
    res.adjusted = adj.report.adjusted;
    res.chain = std::move(adj.chain);
  } else {
    res.chain = std::move(rel.chain);
  }
  return res;
}

inline FitResult fit_model(const SurveyDataset& data, ModelKind kind,
                           const PriorSpec& prior, const McmcConfig& cfg,
                           RngState& rng) {
  if (kind != ModelKind::wolca) return fit_supervised(data, kind, prior, cfg, rng);
  FitResult res;
  res.kind = ModelKind::wolca;
  RngState wrng = rng.fork(0);
  WolcaFit wf = fit_wolca(data, prior, cfg, wrng);
  res.k_hat = wf.k_hat;
  res.chain = std::move(wf.step1);
  res.modal_class = std::move(wf.modal_class);
  res.step2 = std::move(wf.step2);
  return res;
}

}  // namespace swolca
