// command-line front end: fit / simulate / summarize
//
// exit codes: 0 success, 2 input or validation problem, 3 numerical failure

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "swolca/io.hpp"

namespace fs = std::filesystem;
using swolca::json;
using swolca::ValidationError;

namespace {

struct CliOptions {
  std::string input;
  std::string out = "swolca_out";
  std::string model = "swolca";
  std::string scenario = "1";
  std::string models = "swolca,solca,wolca";
  std::string config_path;
  long replicates = 0;  // 0 keeps the scenario's own replicate count
  bool plot = false;
  std::vector<std::string> profiles;
  swolca::McmcConfig cfg;
};

// replicate worker count; everything else stays a single logical job
int thread_count_from_env() {
  const char* s = std::getenv("SWOLCA_THREADS");
  if (s == nullptr || *s == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  if (end == s || *end != '\0' || v < 1) return 1;
  return static_cast<int>(std::min(v, 64L));
}

std::vector<swolca::ModelKind> parse_model_list(const std::string& csv) {
  std::vector<swolca::ModelKind> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = swolca::detail::trim(tok);
    if (!tok.empty()) out.push_back(swolca::model_from_name(tok));
  }
  if (out.empty())
    throw ValidationError("simulate: --models names no model");
  return out;
}

json parse_json_file(const std::string& path, const char* what) {
  try {
    return json::parse(swolca::read_text_file(path));
  } catch (const json::exception& e) {
    throw ValidationError(std::string(what) + " " + path + ": " + e.what());
  }
}

// config file fills in whatever the command line left at its default;
// explicit flags always win
void apply_config_file(const CLI::App& cmd, CliOptions& o) {
  if (o.config_path.empty()) return;
  const json cfg = parse_json_file(o.config_path, "config file");
  if (!cfg.is_object())
    throw ValidationError("config file " + o.config_path +
                          ": expected a JSON object");
  auto open = [&cmd](const char* flag) {
    const CLI::Option* opt = cmd.get_option_no_throw(flag);
    return opt != nullptr && opt->count() == 0;
  };
  for (const auto& [key, value] : cfg.items()) {
    try {
      if (key == "input") {
        if (open("--input")) o.input = value.get<std::string>();
      } else if (key == "out") {
        if (open("--out")) o.out = value.get<std::string>();
      } else if (key == "model") {
        if (open("--model")) o.model = value.get<std::string>();
      } else if (key == "scenario") {
        if (open("--scenario")) {
          o.scenario = value.is_number_integer()
                           ? std::to_string(value.get<long>())
                           : value.get<std::string>();
        }
      } else if (key == "replicates") {
        if (open("--replicates")) {
          o.replicates = value.get<long>();
          if (o.replicates < 1)
            throw ValidationError("config key 'replicates' must be >= 1");
        }
      } else if (key == "models") {
        if (open("--models")) o.models = value.get<std::string>();
      } else if (key == "iters") {
        if (open("--iters")) o.cfg.n_iter = value.get<long>();
      } else if (key == "burn") {
        if (open("--burn")) o.cfg.n_burn = value.get<long>();
      } else if (key == "thin") {
        if (open("--thin")) o.cfg.thin = value.get<long>();
      } else if (key == "seed") {
        if (open("--seed")) o.cfg.seed = value.get<std::uint64_t>();
      } else if (key == "kmax") {
        if (open("--kmax")) o.cfg.k_max = value.get<int>();
      } else if (key == "cutoff") {
        if (open("--cutoff")) o.cfg.class_cutoff = value.get<double>();
      } else if (key == "adjust") {
        if (open("--adjust")) o.cfg.adjust_variance = value.get<bool>();
      } else if (key == "plot") {
        if (open("--plot")) o.plot = value.get<bool>();
      } else if (key == "profile") {
        if (open("--profile")) {
          if (value.is_string())
            o.profiles = {value.get<std::string>()};
          else
            o.profiles = value.get<std::vector<std::string>>();
        }
      } else {
        throw ValidationError("config file " + o.config_path +
                              ": unknown key '" + key + "'");
      }
    } catch (const json::exception& e) {
      throw ValidationError("config key '" + key + "': " + e.what());
    }
  }
}

std::vector<swolca::ProfileRequest> resolve_profiles(
    const std::vector<std::string>& specs,
    const std::vector<std::string>& covariate_names, int k_hat) {
  std::vector<swolca::ProfileRequest> out;
  if (specs.empty()) {
    // default report: each class at the zero covariate profile
    for (int k = 1; k <= k_hat; ++k) {
      swolca::ProfileRequest req;
      req.cls = k;
      req.covariates =
          swolca::Vector::Zero(static_cast<long>(covariate_names.size()));
      req.label = "class=" + std::to_string(k);
      out.push_back(std::move(req));
    }
    return out;
  }
  out.reserve(specs.size());
  for (const std::string& s : specs)
    out.push_back(swolca::parse_profile(s, covariate_names, k_hat));
  return out;
}

void write_plots(const fs::path& dir, const swolca::ChainOutput& chain) {
  const swolca::ChainSummary s = swolca::summarize(chain);
  swolca::write_text_file(
      (dir / "patterns.svg").string(),
      swolca::patterns_svg(s.pi_median, s.theta_median, chain.item_levels));
  swolca::write_text_file(
      (dir / "theta_bars.svg").string(),
      swolca::theta_bars_svg(s.pi_median, s.theta_median, chain.item_levels));
}

void print_summary_report(const json& summary, const fs::path& dir) {
  std::cout << summary.at("model").get<std::string>()
            << ": k_hat = " << summary.at("k_hat").get<int>()
            << ", kept draws = " << summary.at("n_draws").get<long>() << "\n";
  char line[192];
  for (const auto& row : summary.at("outcome_probabilities")) {
    std::snprintf(line, sizeof(line), "P(y=1 | %s) = %.4f  [%.4f, %.4f]",
                  row.at("profile").get<std::string>().c_str(),
                  row.at("median").get<double>(),
                  row.at("lower").get<double>(),
                  row.at("upper").get<double>());
    std::cout << line << "\n";
  }
  std::cout << "artifacts in " << dir.string() << "\n";
}

int cmd_fit(const CliOptions& o) {
  if (o.input.empty())
    throw ValidationError("fit: --input is required (survey CSV)");
  swolca::McmcConfig cfg = o.cfg;
  cfg.validate();
  const swolca::ModelKind kind = swolca::model_from_name(o.model);
  const swolca::SurveyDataset data = swolca::read_survey_csv(o.input);
  const fs::path dir(o.out);
  fs::create_directories(dir);

  swolca::RngState rng(cfg.seed, 0);
  const swolca::PriorSpec prior = swolca::PriorSpec::defaults(
      cfg.k_max, data.max_levels(), 1 + data.n_covariates());
  const swolca::FitResult fit =
      swolca::fit_model(data, kind, prior, cfg, rng);

  const std::vector<swolca::ProfileRequest> profiles =
      resolve_profiles(o.profiles, data.covariate_names, fit.k_hat);

  swolca::write_chain_csv((dir / "chain.csv").string(), fit.chain);
  const json summary =
      swolca::summary_to_json(fit, profiles, data.covariate_names);
  swolca::write_text_file((dir / "summary.json").string(),
                          summary.dump(2) + "\n");
  const double kappa = kind == swolca::ModelKind::solca
                           ? 1.0
                           : swolca::normalize_weights(data.weight).kappa;
  const json diag = swolca::diagnostics_to_json(fit, cfg, data.n(), kappa,
                                                data.covariate_names);
  swolca::write_text_file((dir / "diagnostics.json").string(),
                          diag.dump(2) + "\n");
  if (kind == swolca::ModelKind::wolca)
    swolca::write_text_file((dir / "probit.json").string(),
                            swolca::probit_to_json(fit.step2).dump(2) + "\n");
  if (o.plot) write_plots(dir, fit.chain);
  print_summary_report(summary, dir);
  return 0;
}

int cmd_summarize(const CliOptions& o) {
  const fs::path dir(o.out);
  swolca::ChainOutput chain =
      swolca::read_chain_csv((dir / "chain.csv").string());
  const json diag =
      parse_json_file((dir / "diagnostics.json").string(), "diagnostics");

  swolca::FitResult fit;
  std::vector<std::string> covariate_names;
  try {
    fit.kind = swolca::model_from_name(diag.at("model").get<std::string>());
    covariate_names =
        diag.at("covariate_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("diagnostics.json: ") + e.what());
  }
  fit.k_hat = chain.K;
  fit.chain = std::move(chain);
  if (fit.kind == swolca::ModelKind::wolca)
    fit.step2 = swolca::probit_from_json(
        parse_json_file((dir / "probit.json").string(), "probit stage"));

  const std::vector<swolca::ProfileRequest> profiles =
      resolve_profiles(o.profiles, covariate_names, fit.k_hat);
  const json summary =
      swolca::summary_to_json(fit, profiles, covariate_names);
  swolca::write_text_file((dir / "summary.json").string(),
                          summary.dump(2) + "\n");
  if (o.plot) write_plots(dir, fit.chain);
  print_summary_report(summary, dir);
  return 0;
}

int cmd_simulate(const CliOptions& o) {
  swolca::McmcConfig cfg = o.cfg;
  cfg.validate();
  swolca::ScenarioSpec spec;
  long id = 0;
  if (swolca::detail::parse_long(o.scenario, &id))
    spec = swolca::ScenarioSpec::preset(static_cast<int>(id));
  else
    spec = swolca::scenario_from_json(
        parse_json_file(o.scenario, "scenario file"));
  if (o.replicates > 0) spec.replicates = static_cast<int>(o.replicates);
  const std::vector<swolca::ModelKind> models = parse_model_list(o.models);

  const fs::path dir(o.out);
  fs::create_directories(dir);
  swolca::RngState rng(cfg.seed, 0);
  const swolca::ScenarioResult res = swolca::run_scenario(
      spec, models, cfg, rng, thread_count_from_env());

  swolca::write_text_file((dir / "metrics.json").string(),
                          swolca::metrics_to_json(res.metrics).dump(2) + "\n");
  swolca::write_text_file((dir / "replicates.csv").string(),
                          swolca::replicates_csv(res.records));
  const std::string md = swolca::metrics_markdown(res.metrics);
  swolca::write_text_file((dir / "metrics.md").string(), md);
  std::cout << md;
  if (res.n_failed > 0)
    std::cout << "\nfailed replicates: " << res.n_failed << "\n";
  return 0;
}

void add_mcmc_flags(CLI::App* cmd, CliOptions& o) {
  cmd->add_option("--iters", o.cfg.n_iter, "sampler iterations");
  cmd->add_option("--burn", o.cfg.n_burn, "burn-in iterations");
  cmd->add_option("--thin", o.cfg.thin, "thinning interval");
  cmd->add_option("--seed", o.cfg.seed, "random seed");
  cmd->add_option("--kmax", o.cfg.k_max, "class ceiling for the adaptive stage");
  cmd->add_option("--cutoff", o.cfg.class_cutoff,
                  "occupancy cutoff for counting classes");
  cmd->add_flag("--adjust,!--no-adjust", o.cfg.adjust_variance,
                "post-hoc variance adjustment (swolca only)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"survey-weighted Bayesian latent class models"};
  app.require_subcommand(1);
  CliOptions o;

  CLI::App* fit = app.add_subcommand("fit", "fit one model to a survey CSV");
  fit->add_option("--input", o.input, "input survey CSV");
  fit->add_option("--out", o.out, "output directory");
  fit->add_option("--model", o.model, "swolca | solca | wolca");
  add_mcmc_flags(fit, o);
  fit->add_flag("--plot", o.plot, "emit pattern heatmap and probability bars");
  fit->add_option("--profile", o.profiles,
                  "outcome query, e.g. \"class=1,stratum_ind=1\" (repeatable)")
      ->allow_extra_args(false);
  fit->add_option("--config", o.config_path,
                  "JSON config supplying defaults for unset flags");

  CLI::App* sim = app.add_subcommand("simulate", "run a simulation scenario");
  sim->add_option("--scenario", o.scenario,
                  "preset id 1-9 or path to a scenario JSON file");
  sim->add_option("--replicates", o.replicates, "sample replicates to run")
      ->check(CLI::PositiveNumber);
  sim->add_option("--models", o.models, "comma-separated model list");
  sim->add_option("--out", o.out, "output directory");
  add_mcmc_flags(sim, o);
  sim->add_option("--config", o.config_path,
                  "JSON config supplying defaults for unset flags");

  CLI::App* sum = app.add_subcommand(
      "summarize", "recompute summaries from a saved chain");
  sum->add_option("--out", o.out, "directory holding chain.csv");
  sum->add_flag("--plot", o.plot, "emit pattern heatmap and probability bars");
  sum->add_option("--profile", o.profiles,
                  "outcome query, e.g. \"class=1,stratum_ind=1\" (repeatable)")
      ->allow_extra_args(false);
  sum->add_option("--config", o.config_path,
                  "JSON config supplying defaults for unset flags");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (fit->parsed()) {
      apply_config_file(*fit, o);
      return cmd_fit(o);
    }
    if (sim->parsed()) {
      apply_config_file(*sim, o);
      return cmd_simulate(o);
    }
    apply_config_file(*sum, o);
    return cmd_summarize(o);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const swolca::NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
