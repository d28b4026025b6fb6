#include "swolca/io.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <string>
#include <vector>

using namespace swolca;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content)
      : path("iotest_" + name) {
    write_text_file(path, content);
  }
  ~TempFile() { std::remove(path.c_str()); }
};

// supervised two-class chain with deliberately awkward doubles
ChainOutput tiny_chain(int n_draws) {
  ChainOutput chain;
  chain.K = 2;
  chain.J = 2;
  chain.R = 3;
  chain.q_block = 2;
  chain.item_levels = {2, 3};
  chain.meta.supervised = true;
  chain.meta.accepted_k = 2;
  for (int m = 0; m < n_draws; ++m) {
    ModelParams p;
    p.pi.resize(2);
    p.pi << (1.0 + m) / 3.0, 1.0 - (1.0 + m) / 3.0;
    p.theta = Tensor3(2, 2, 3);
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k) {
        double acc = 0.0;
        for (int r = 0; r < chain.item_levels[j] - 1; ++r) {
          p.theta(j, k, r) = 0.1 * (1 + j + k + r) + 1e-17 * m;
          acc += p.theta(j, k, r);
        }
        p.theta(j, k, chain.item_levels[j] - 1) = 1.0 - acc;
      }
    p.xi.resize(2, 2);
    p.xi << 0.1 + m, -1.0 / 7.0, 0.3 * m - 0.5, 2.0 / 3.0;
    chain.draws.push_back(std::move(p));
  }
  return chain;
}

}  // namespace

TEST_CASE("survey CSV parses reserved and covariate columns") {
  TempFile f("read.csv",
             "item_1,item_2,y,weight,stratum,cluster,age,bmi\n"
             "1,3,0,2.5,1,10,34,22.5\n"
             "2,1,1,1.25,1,10,55,31\n"
             "1,2,1,4,2,20,41,27.75\n");
  const SurveyDataset d = read_survey_csv(f.path);
  REQUIRE(d.n() == 3);
  REQUIRE(d.n_items() == 2);
  REQUIRE(d.items(0, 1) == 3);
  REQUIRE(d.item_levels == std::vector<int>{2, 3});
  REQUIRE(d.outcome[1] == 1);
  REQUIRE(d.weight[2] == 4.0);
  REQUIRE(d.stratum[2] == 2);
  REQUIRE(d.cluster[1] == 10);
  REQUIRE(d.covariate_names == std::vector<std::string>{"age", "bmi"});
  REQUIRE(d.covariates(0, 0) == 34.0);
  REQUIRE(d.covariates(2, 1) == 27.75);

  // write/read round trip preserves everything bitwise
  TempFile g("rewrite.csv", "");
  write_survey_csv(g.path, d);
  const SurveyDataset d2 = read_survey_csv(g.path);
  REQUIRE((d2.items.array() == d.items.array()).all());
  REQUIRE((d2.outcome.array() == d.outcome.array()).all());
  REQUIRE((d2.weight.array() == d.weight.array()).all());
  REQUIRE(d2.stratum == d.stratum);
  REQUIRE(d2.cluster == d.cluster);
  REQUIRE((d2.covariates.array() == d.covariates.array()).all());
  REQUIRE(d2.covariate_names == d.covariate_names);
}

TEST_CASE("survey CSV violations raise a populated report") {
  SECTION("missing required column") {
    TempFile f("noweight.csv", "item_1,y,stratum,cluster\n1,0,1,1\n");
    REQUIRE_THROWS_WITH(read_survey_csv(f.path),
                        Catch::Matchers::ContainsSubstring("weight"));
  }
  SECTION("non-contiguous item columns") {
    TempFile f("gap.csv", "item_1,item_3,y,weight,stratum,cluster\n"
                          "1,1,0,1,1,1\n");
    REQUIRE_THROWS_WITH(read_survey_csv(f.path),
                        Catch::Matchers::ContainsSubstring("item_2"));
  }
  SECTION("wrong field count names the row") {
    TempFile f("short.csv", "item_1,y,weight,stratum,cluster\n"
                            "1,0,1,1,1\n"
                            "1,0,1,1\n");
    REQUIRE_THROWS_WITH(read_survey_csv(f.path),
                        Catch::Matchers::ContainsSubstring("row 1") &&
                            Catch::Matchers::ContainsSubstring("expected 5"));
  }
  SECTION("missing value") {
    TempFile f("hole.csv", "item_1,y,weight,stratum,cluster\n1,0,,1,1\n");
    REQUIRE_THROWS_WITH(read_survey_csv(f.path),
                        Catch::Matchers::ContainsSubstring("weight"));
  }
  SECTION("bad item code") {
    TempFile f("code.csv", "item_1,y,weight,stratum,cluster\n"
                           "1,0,1,1,1\n0,1,1,1,2\n");
    REQUIRE_THROWS_AS(read_survey_csv(f.path), ValidationError);
  }
  SECTION("out-of-range outcome") {
    TempFile f("y2.csv", "item_1,y,weight,stratum,cluster\n"
                         "1,2,1,1,1\n2,0,1,1,2\n");
    REQUIRE_THROWS_WITH(read_survey_csv(f.path),
                        Catch::Matchers::ContainsSubstring("outcome"));
  }
  SECTION("cluster straddling strata") {
    TempFile f("nest.csv", "item_1,y,weight,stratum,cluster\n"
                           "1,0,1,1,7\n2,1,1,2,7\n");
    REQUIRE_THROWS_WITH(
        read_survey_csv(f.path),
        Catch::Matchers::ContainsSubstring("more than one stratum"));
  }
  SECTION("nonexistent file") {
    REQUIRE_THROWS_WITH(read_survey_csv("no_such_file.csv"),
                        Catch::Matchers::ContainsSubstring("cannot open"));
  }
}

TEST_CASE("chain storage round-trips bitwise") {
  const ChainOutput chain = tiny_chain(4);
  TempFile f("chain.csv", "");
  write_chain_csv(f.path, chain);
  const ChainOutput back = read_chain_csv(f.path);
  REQUIRE(back.K == 2);
  REQUIRE(back.J == 2);
  REQUIRE(back.R == 3);
  REQUIRE(back.q_block == 2);
  REQUIRE(back.item_levels == chain.item_levels);
  REQUIRE(back.n_draws() == 4);
  for (int m = 0; m < 4; ++m) {
    for (int k = 0; k < 2; ++k)
      REQUIRE(back.draws[m].pi[k] == chain.draws[m].pi[k]);
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k)
        for (int r = 0; r < chain.item_levels[j]; ++r)
          REQUIRE(back.draws[m].theta(j, k, r) ==
                  chain.draws[m].theta(j, k, r));
    for (int k = 0; k < 2; ++k)
      for (int q = 0; q < 2; ++q)
        REQUIRE(back.draws[m].xi(k, q) == chain.draws[m].xi(k, q));
  }
  // summaries recomputed from disk match the in-memory ones exactly
  const ChainSummary a = summarize(chain), b = summarize(back);
  REQUIRE(a.pi_median[0] == b.pi_median[0]);
  REQUIRE(a.xi_prob_positive(1, 1) == b.xi_prob_positive(1, 1));
}

TEST_CASE("chain header is the documented flat naming") {
  REQUIRE(chain_header(2, {2}, 1) ==
          "pi_1,pi_2,theta_1_1_1,theta_1_1_2,theta_1_2_1,theta_1_2_2,"
          "xi_1_1,xi_2_1");
  REQUIRE(chain_header(1, {2, 3}, 0) ==
          "pi_1,theta_1_1_1,theta_1_1_2,theta_2_1_1,theta_2_1_2,theta_2_1_3");
}

TEST_CASE("corrupt chain files are rejected with clear messages") {
  const ChainOutput chain = tiny_chain(3);
  SECTION("truncated row") {
    std::string text = chain_header(2, {2, 3}, 2) + "\n";
    text += "0.5,0.5,0.1,0.9,0.2,0.8,0.1,0.2,0.7,0.3,0.3\n";  // too short
    TempFile f("trunc.csv", text);
    REQUIRE_THROWS_WITH(
        read_chain_csv(f.path),
        Catch::Matchers::ContainsSubstring("truncated or corrupt at line 2"));
  }
  SECTION("bad number") {
    std::string text = chain_header(1, {2}, 0) + "\n0.5,oops,0.5\n";
    TempFile f("badnum.csv", text);
    REQUIRE_THROWS_WITH(read_chain_csv(f.path),
                        Catch::Matchers::ContainsSubstring("bad number"));
  }
  SECTION("non-canonical header order") {
    TempFile f("order.csv", "theta_1_1_1,pi_1,theta_1_1_2\n0.1,1.0,0.9\n");
    REQUIRE_THROWS_WITH(read_chain_csv(f.path),
                        Catch::Matchers::ContainsSubstring("canonical"));
  }
  SECTION("unknown column") {
    TempFile f("alien.csv", "pi_1,beta_1\n1.0,0.5\n");
    REQUIRE_THROWS_AS(read_chain_csv(f.path), ValidationError);
  }
  SECTION("no draws") {
    TempFile f("empty.csv", chain_header(1, {2}, 0) + "\n");
    REQUIRE_THROWS_WITH(read_chain_csv(f.path),
                        Catch::Matchers::ContainsSubstring("no draws"));
  }
}

TEST_CASE("profile strings select a class and covariate setting") {
  const std::vector<std::string> names = {"x1", "x2"};
  const ProfileRequest a = parse_profile("class=2,x2=1.5", names, 3);
  REQUIRE(a.cls == 2);
  REQUIRE(a.covariates[0] == 0.0);
  REQUIRE(a.covariates[1] == 1.5);
  const ProfileRequest b = parse_profile(" class = 1 , x1 = -2 ", names, 3);
  REQUIRE(b.cls == 1);
  REQUIRE(b.covariates[0] == -2.0);
  REQUIRE_THROWS_WITH(parse_profile("class=4", names, 3),
                      Catch::Matchers::ContainsSubstring("1..3"));
  REQUIRE_THROWS_WITH(parse_profile("class=1,zz=0", names, 3),
                      Catch::Matchers::ContainsSubstring("x1, x2"));
  REQUIRE_THROWS_WITH(parse_profile("x1=1", names, 3),
                      Catch::Matchers::ContainsSubstring("class"));
  REQUIRE_THROWS_AS(parse_profile("class", names, 3), ValidationError);
}

TEST_CASE("summary JSON mirrors the chain summaries") {
  FitResult fit;
  fit.kind = ModelKind::solca;
  fit.k_hat = 2;
  fit.chain = tiny_chain(5);
  const std::vector<std::string> names = {"z"};
  const std::vector<ProfileRequest> profiles = {
      parse_profile("class=1", names, 2),
      parse_profile("class=2,z=1", names, 2)};
  const json j = summary_to_json(fit, profiles, names);

  REQUIRE(j.at("model") == "solca");
  REQUIRE(j.at("k_hat") == 2);
  REQUIRE(j.at("n_draws") == 5);
  const ChainSummary s = summarize(fit.chain);
  REQUIRE(j.at("pi").at("median").at(0).get<double>() == s.pi_median[0]);
  REQUIRE(j.at("theta").at("upper").at(1).at(0).size() == 3);  // item 2 has 3 levels
  REQUIRE(j.at("theta").at("median").at(0).at(1).size() == 2);
  REQUIRE(j.at("xi").at("prob_positive").is_array());
  REQUIRE(j.at("xi").at("median").at(1).at(1).get<double>() ==
          s.xi_median(1, 1));

  const auto& probs = j.at("outcome_probabilities");
  REQUIRE(probs.size() == 2);
  const ScalarSummary p1 =
      outcome_probability(fit.chain, 1, Vector::Zero(1));
  REQUIRE(probs.at(0).at("median").get<double>() == p1.median);
  REQUIRE(probs.at(0).at("class") == 1);
  Vector z1(1);
  z1 << 1.0;
  const ScalarSummary p2 = outcome_probability(fit.chain, 2, z1);
  REQUIRE(probs.at(1).at("lower").get<double>() == p2.lower);

  // identical input, identical bytes
  REQUIRE(summary_to_json(fit, profiles, names).dump(2) == j.dump(2));
}

TEST_CASE("wolca summary uses Wald intervals and no posterior sign mass") {
  FitResult fit;
  fit.kind = ModelKind::wolca;
  fit.k_hat = 2;
  fit.chain = tiny_chain(3);
  fit.chain.q_block = 0;  // unsupervised first stage
  for (auto& p : fit.chain.draws) p.xi.resize(2, 0);
  fit.step2.beta = Vector(4);
  fit.step2.beta << 0.5, -0.2, 1.1, 0.4;
  fit.step2.cov = Matrix::Identity(4, 4) * 0.04;
  fit.step2.se = Vector::Constant(4, 0.2);
  fit.step2.t_crit = 2.0;
  fit.step2.df = 30.0;
  fit.step2.lower = fit.step2.beta.array() - 0.4;
  fit.step2.upper = fit.step2.beta.array() + 0.4;

  const std::vector<std::string> names = {"z"};
  const std::vector<ProfileRequest> profiles = {
      parse_profile("class=2,z=1", names, 2)};
  const json j = summary_to_json(fit, profiles, names);
  REQUIRE(j.at("xi").at("prob_positive").is_null());
  REQUIRE(j.at("xi").at("median").at(1).at(0).get<double>() == 1.1);
  REQUIRE(j.at("xi").at("lower").at(0).at(1).get<double>() ==
          fit.step2.lower[1]);

  // probability of the event at class 2, z = 1: linear predictor 1.5,
  // se = sqrt(0.04 + 0.04) = 0.2828..., interval on the probit scale
  const double lp = 1.1 + 0.4;
  const double se = std::sqrt(0.08);
  const auto& rec = j.at("outcome_probabilities").at(0);
  REQUIRE(rec.at("median").get<double>() == normal_cdf(lp));
  REQUIRE(rec.at("lower").get<double>() == normal_cdf(lp - 2.0 * se));
  REQUIRE(rec.at("upper").get<double>() == normal_cdf(lp + 2.0 * se));
}

TEST_CASE("probit fit persists exactly through JSON") {
  ProbitFit fit;
  fit.beta = Vector(2);
  fit.beta << 1.0 / 3.0, -2.0 / 7.0;
  fit.cov = Matrix(2, 2);
  fit.cov << 0.1, 0.01, 0.01, 0.2;
  fit.se = fit.cov.diagonal().array().sqrt();
  fit.lower = fit.beta.array() - 1e-3;
  fit.upper = fit.beta.array() + 1e-3;
  fit.df = 17.0;
  fit.t_crit = 2.1098155778331806;
  fit.n_iter = 6;
  fit.grad_norm = 3.5e-12;
  fit.loglik = -123.456789012345678;

  const json j = json::parse(probit_to_json(fit).dump());
  const ProbitFit back = probit_from_json(j);
  REQUIRE(back.beta[0] == fit.beta[0]);
  REQUIRE(back.beta[1] == fit.beta[1]);
  REQUIRE(back.cov(0, 1) == fit.cov(0, 1));
  REQUIRE(back.se[1] == fit.se[1]);
  REQUIRE(back.lower[0] == fit.lower[0]);
  REQUIRE(back.upper[1] == fit.upper[1]);
  REQUIRE(back.df == fit.df);
  REQUIRE(back.t_crit == fit.t_crit);
  REQUIRE(back.n_iter == fit.n_iter);
  REQUIRE(back.grad_norm == fit.grad_norm);
  REQUIRE(back.loglik == fit.loglik);
}

TEST_CASE("diagnostics JSON carries the adjustment report") {
  McmcConfig cfg;
  cfg.seed = 42;
  FitResult fit;
  fit.chain = tiny_chain(2);
  fit.k_hat = 2;

  SECTION("swolca with adjustment") {
    fit.kind = ModelKind::swolca;
    fit.adjusted = true;
    fit.adjust_report.adjusted = true;
    fit.adjust_report.dim = 7;
    fit.adjust_report.n_boot = 100;
    fit.adjust_report.hessian_asymmetry = 1.5e-6;
    const json j = diagnostics_to_json(fit, cfg, 500, 3.25, {"age", "bmi"});
    REQUIRE(j.at("model") == "swolca");
    REQUIRE(j.at("kappa") == 3.25);
    REQUIRE(j.at("n") == 500);
    REQUIRE(j.at("covariate_names") ==
            std::vector<std::string>{"age", "bmi"});
    REQUIRE(j.at("adjustment").at("adjusted") == true);
    REQUIRE(j.at("adjustment").at("dim") == 7);
    REQUIRE(j.at("wolca_step2").is_null());
    REQUIRE(j.at("config").at("seed") == 42);
  }
  SECTION("solca has no adjustment block") {
    fit.kind = ModelKind::solca;
    const json j = diagnostics_to_json(fit, cfg, 500, 1.0);
    REQUIRE(j.at("adjustment").is_null());
  }
  SECTION("wolca reports the probit stage") {
    fit.kind = ModelKind::wolca;
    fit.step2.df = 12.0;
    fit.step2.n_iter = 5;
    const json j = diagnostics_to_json(fit, cfg, 500, 1.0);
    REQUIRE(j.at("adjustment").is_null());
    REQUIRE(j.at("wolca_step2").at("df") == 12.0);
  }
}

TEST_CASE("metrics JSON and Markdown mirror the report") {
  MetricsReport rep;
  rep.scenario_id = 2;
  rep.k_true = 3;
  ModelMetrics mm;
  mm.n_replicates = 20;
  mm.n_failed = 1;
  mm.k_bias = 0.25;
  mm.pi = {0.006, 0.052, 0.97, 120};
  mm.theta = {0.04, 0.21, 0.92, 7200};
  mm.xi = {0.08, 0.61, 0.88, 120};
  rep.models["swolca"] = mm;

  const json j = metrics_to_json(rep);
  REQUIRE(j.at("scenario") == 2);
  REQUIRE(j.at("k_true") == 3);
  REQUIRE(j.at("models").at("swolca").at("pi").at("bias") == 0.006);
  REQUIRE(j.at("models").at("swolca").at("xi").at("cells") == 120);
  REQUIRE(j.at("models").at("swolca").at("n_failed") == 1);

  const std::string md = metrics_markdown(rep);
  REQUIRE(md.find("| Model |") != std::string::npos);
  REQUIRE(md.find("| swolca | 20 (+1 failed) |") != std::string::npos);
  REQUIRE(md.find("0.970") != std::string::npos);
  REQUIRE(md.find("Scenario 2") != std::string::npos);
}

TEST_CASE("replicate CSV quotes error messages") {
  ReplicateRecord ok;
  ok.replicate = 0;
  ok.model = "swolca";
  ok.k_hat = 3;
  ok.pi = {0.01, 0.05, 1.0, 3};
  ReplicateRecord bad;
  bad.replicate = 1;
  bad.model = "wolca";
  bad.failed = true;
  bad.error = "separation in class 2, all \"pinned\"";
  const std::string csv = replicates_csv({ok, bad});
  REQUIRE(csv.find("replicate,model,failed,error,k_hat") == 0);
  // %.17g keeps the doubles exact: 0.05 carries its binary representation
  REQUIRE(csv.find("0,swolca,0,,3,0.01,0.050000000000000003,1,") !=
          std::string::npos);
  REQUIRE(csv.find("\"separation in class 2, all \"\"pinned\"\"\"") !=
          std::string::npos);
}

TEST_CASE("pattern heatmap encodes modal levels") {
  Vector pi(2);
  pi << 0.575, 0.425;
  Tensor3 theta(2, 2, 4);
  // item 1: class 1 modal level 1, class 2 modal level 4
  theta(0, 0, 0) = 0.7;
  theta(0, 0, 1) = theta(0, 0, 2) = theta(0, 0, 3) = 0.1;
  theta(0, 1, 3) = 0.6;
  theta(0, 1, 0) = theta(0, 1, 1) = theta(0, 1, 2) = 0.4 / 3;
  // item 2: both classes modal level 2
  for (int k = 0; k < 2; ++k) {
    theta(1, k, 1) = 0.55;
    theta(1, k, 0) = theta(1, k, 2) = theta(1, k, 3) = 0.15;
  }
  const std::string svg = patterns_svg(pi, theta, {4, 4});
  REQUIRE(svg.find("<svg") == 0);
  REQUIRE(svg.find("Class 2") != std::string::npos);
  REQUIRE(svg.find("(57.5%)") != std::string::npos);
  REQUIRE(svg.find("level 4") != std::string::npos);
  // background + 4 cells + 4 legend squares
  std::size_t rects = 0;
  for (std::size_t at = svg.find("<rect"); at != std::string::npos;
       at = svg.find("<rect", at + 1))
    ++rects;
  REQUIRE(rects == 1 + 4 + 4);
  REQUIRE(svg.find(detail::level_color(0, 4)) != std::string::npos);
  REQUIRE(svg.find(detail::level_color(3, 4)) != std::string::npos);
  REQUIRE(patterns_svg(pi, theta, {4, 4}) == svg);  // deterministic bytes
}

TEST_CASE("probability bars stack to the bar width") {
  Vector pi(1);
  pi << 1.0;
  Tensor3 theta(1, 1, 2);
  theta(0, 0, 0) = 0.25;
  theta(0, 0, 1) = 0.75;
  const std::string svg = theta_bars_svg(pi, theta, {2});
  REQUIRE(svg.find("<svg") == 0);
  std::size_t rects = 0;
  for (std::size_t at = svg.find("<rect"); at != std::string::npos;
       at = svg.find("<rect", at + 1))
    ++rects;
  REQUIRE(rects == 1 + 2 + 2);  // background + 2 segments + 2 legend squares
  REQUIRE(svg.find("width=\"35.00\"") != std::string::npos);   // 0.25 * 140
  REQUIRE(svg.find("width=\"105.00\"") != std::string::npos);  // 0.75 * 140
}

TEST_CASE("scenario files start from presets and override fields") {
  const ScenarioSpec seven = scenario_from_json(json{{"id", 7}});
  REQUIRE(seven.design == Design::stratified);
  REQUIRE(seven.n == 800);

  // n=800 on the stratified design without naming the preset routes to the
  // same settings
  const ScenarioSpec custom =
      scenario_from_json(json{{"design", "stratified"}, {"n", 800}});
  REQUIRE(custom.design == seven.design);
  REQUIRE(custom.n == seven.n);
  REQUIRE(custom.association == seven.association);
  REQUIRE(custom.mode_prob == seven.mode_prob);
  REQUIRE(custom.overlap == seven.overlap);

  const ScenarioSpec tweaked = scenario_from_json(
      json{{"id", 2}, {"replicates", 5}, {"mode_prob", 0.6}});
  REQUIRE(tweaked.replicates == 5);
  REQUIRE(tweaked.mode_prob == 0.6);

  REQUIRE_THROWS_WITH(scenario_from_json(json{{"bogus", 1}}),
                      Catch::Matchers::ContainsSubstring("bogus"));
  REQUIRE_THROWS_AS(scenario_from_json(json{{"design", "cluster"}}),
                    ValidationError);
  REQUIRE_THROWS_AS(scenario_from_json(json::array()), ValidationError);
}
