#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "snmm/common.hpp"
#include "snmm/dgp.hpp"
#include "snmm/estimator.hpp"
#include "snmm/montecarlo.hpp"

namespace snmm {

using json = nlohmann::json;

// Configs reject unknown keys so typos fail loudly instead of being ignored.
inline void check_keys(const json& obj, const std::set<std::string>& allowed,
                       const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw config_error("unknown key '" + it.key() + "' in " + where);
}

inline Eigen::VectorXd json_vector(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw config_error(where + " must be an array");
  Eigen::VectorXd v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
  return v;
}

inline Eigen::MatrixXd json_matrix(const json& arr, const std::string& where) {
  if (!arr.is_array() || arr.empty()) throw config_error(where + " must be an array of rows");
  Eigen::MatrixXd m(arr.size(), arr[0].size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_array() || arr[i].size() != arr[0].size())
      throw config_error(where + " must be rectangular");
    for (std::size_t j = 0; j < arr[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = arr[i][j].get<double>();
  }
  return m;
}

inline json vector_json(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

inline json matrix_json(const Eigen::MatrixXd& m) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    arr.push_back(row);
  }
  return arr;
}

// ---------------------------------------------------------------------------
// DgpConfig
// ---------------------------------------------------------------------------

inline DgpConfig dgp_from_json(const json& j, const std::string& where = "dgp") {
  check_keys(j, {"preset", "n", "T", "K", "region_count", "theta", "intensity_base",
                 "intensity_lockdown_loghr", "intensity_coef", "mu_y0", "mu_p0", "beta_y0",
                 "beta_p0", "sigma_y_diag", "sigma_p_diag", "target_corr", "rho_y", "rho_p",
                 "psi_p0", "psi_y0", "seed", "max_clamp_fraction"},
             where);
  DgpConfig cfg;
  std::string preset = j.value("preset", std::string("P1"));
  if (preset == "P1")
    cfg = DgpConfig::p1();
  else if (preset == "P2")
    cfg = DgpConfig::p2();
  else
    throw config_error(where + ".preset must be P1 or P2");
  cfg.n = j.value("n", cfg.n);
  cfg.T = j.value("T", cfg.T);
  cfg.K = j.value("K", cfg.K);
  cfg.region_count = j.value("region_count", cfg.region_count);
  if (j.count("theta")) cfg.theta = json_vector(j["theta"], where + ".theta");
  cfg.intensity_base = j.value("intensity_base", cfg.intensity_base);
  cfg.intensity_lockdown_loghr = j.value("intensity_lockdown_loghr", cfg.intensity_lockdown_loghr);
  if (j.count("intensity_coef")) cfg.intensity_coef = json_vector(j["intensity_coef"], where);
  if (j.count("mu_y0")) cfg.mu_y0 = json_vector(j["mu_y0"], where + ".mu_y0");
  if (j.count("mu_p0")) cfg.mu_p0 = json_vector(j["mu_p0"], where + ".mu_p0");
  if (j.count("beta_y0")) cfg.beta_y0 = json_vector(j["beta_y0"], where + ".beta_y0");
  if (j.count("beta_p0")) cfg.beta_p0 = json_vector(j["beta_p0"], where + ".beta_p0");
  if (j.count("sigma_y_diag")) cfg.sigma_y_diag = json_vector(j["sigma_y_diag"], where);
  if (j.count("sigma_p_diag")) cfg.sigma_p_diag = json_vector(j["sigma_p_diag"], where);
  if (j.count("target_corr")) cfg.target_corr = json_matrix(j["target_corr"], where);
  cfg.rho_y = j.value("rho_y", cfg.rho_y);
  cfg.rho_p = j.value("rho_p", cfg.rho_p);
  if (j.count("psi_p0")) cfg.psi_p0 = json_vector(j["psi_p0"], where + ".psi_p0");
  if (j.count("psi_y0")) cfg.psi_y0 = json_vector(j["psi_y0"], where + ".psi_y0");
  cfg.seed = j.value("seed", cfg.seed);
  cfg.max_clamp_fraction = j.value("max_clamp_fraction", cfg.max_clamp_fraction);
  cfg.validate();
  return cfg;
}

inline json dgp_to_json(const DgpConfig& cfg) {
  json j;
  j["n"] = cfg.n;
  j["T"] = cfg.T;
  j["K"] = cfg.K;
  j["region_count"] = cfg.region_count;
  j["theta"] = vector_json(cfg.theta);
  j["intensity_base"] = cfg.intensity_base;
  j["intensity_lockdown_loghr"] = cfg.intensity_lockdown_loghr;
  j["intensity_coef"] = vector_json(cfg.intensity_coef);
  j["mu_y0"] = vector_json(cfg.mu_y0);
  j["mu_p0"] = vector_json(cfg.mu_p0);
  j["beta_y0"] = vector_json(cfg.beta_y0);
  j["beta_p0"] = vector_json(cfg.beta_p0);
  j["sigma_y_diag"] = vector_json(cfg.sigma_y_diag);
  j["sigma_p_diag"] = vector_json(cfg.sigma_p_diag);
  j["target_corr"] = matrix_json(cfg.target_corr);
  j["rho_y"] = cfg.rho_y;
  j["rho_p"] = cfg.rho_p;
  j["psi_p0"] = vector_json(cfg.psi_p0);
  j["psi_y0"] = vector_json(cfg.psi_y0);
  j["seed"] = cfg.seed;
  j["max_clamp_fraction"] = cfg.max_clamp_fraction;
  return j;
}

// ---------------------------------------------------------------------------
// Term lists, causal spec, pipeline spec
// ---------------------------------------------------------------------------

inline std::vector<TermSpec> terms_from_json(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw config_error(where + " must be an array of terms");
  std::vector<TermSpec> out;
  for (const auto& t : arr) {
    if (t.is_string()) {
      out.push_back(TermSpec::linear(t.get<std::string>()));
    } else if (t.is_object()) {
      check_keys(t, {"col", "smooth"}, where);
      if (!t.count("col")) throw config_error(where + ": term object needs 'col'");
      TermSpec ts;
      ts.expr = t["col"].get<std::string>();
      ts.smooth = t.value("smooth", false);
      out.push_back(ts);
    } else {
      throw config_error(where + ": terms must be strings or {col, smooth} objects");
    }
  }
  return out;
}

inline json terms_to_json(const std::vector<TermSpec>& terms) {
  json arr = json::array();
  for (const auto& t : terms) {
    if (t.smooth)
      arr.push_back(json{{"col", t.expr}, {"smooth", true}});
    else
      arr.push_back(t.expr);
  }
  return arr;
}

inline CausalSpec causal_from_json(const json& j, int K, const std::string& where = "causal") {
  check_keys(j, {"category_terms", "shared_terms"}, where);
  CausalSpec spec;
  spec.K = K;
  if (j.count("category_terms"))
    for (const auto& t : j["category_terms"]) spec.category_terms.push_back(t.get<std::string>());
  if (j.count("shared_terms"))
    for (const auto& t : j["shared_terms"]) spec.shared_terms.push_back(t.get<std::string>());
  if (spec.category_terms.empty())
    throw config_error(where + ".category_terms must not be empty");
  return spec;
}

inline PipelineSpec pipeline_from_json(const json& j, int K, const std::string& where = "config") {
  check_keys(j, {"causal", "intensity_terms", "propensity_terms", "outcome_terms", "outcome_mode",
                 "estimator", "cluster"},
             where);
  PipelineSpec spec;
  if (!j.count("causal")) throw config_error(where + " needs a 'causal' section");
  spec.causal = causal_from_json(j["causal"], K);
  if (j.count("intensity_terms"))
    spec.intensity_terms = terms_from_json(j["intensity_terms"], where + ".intensity_terms");
  if (j.count("propensity_terms"))
    spec.propensity_terms = terms_from_json(j["propensity_terms"], where + ".propensity_terms");
  if (j.count("outcome_terms"))
    spec.outcome_terms = terms_from_json(j["outcome_terms"], where + ".outcome_terms");
  std::string mode = j.value("outcome_mode", std::string("two_part"));
  if (mode == "direct")
    spec.outcome_mode = OutcomeMode::direct;
  else if (mode == "two_part")
    spec.outcome_mode = OutcomeMode::two_part;
  else
    throw config_error(where + ".outcome_mode must be direct or two_part");
  spec.kind = kind_from_name(j.value("estimator", std::string("pgh")));
  std::string cluster = j.value("cluster", std::string("time"));
  if (cluster == "time")
    spec.cluster_region_time = false;
  else if (cluster == "region_time")
    spec.cluster_region_time = true;
  else
    throw config_error(where + ".cluster must be time or region_time");
  return spec;
}

inline json estimate_to_json(const GEstimate& est, const CausalSpec& spec) {
  json j;
  j["estimator"] = kind_name(est.kind);
  json comps = json::array();
  for (int i = 0; i < est.psi.size(); ++i) {
    double z = est.se(i) > 0.0 ? est.psi(i) / est.se(i) : 0.0;
    comps.push_back(json{{"name", spec.component_name(i)},
                         {"term", spec.component_term(i)},
                         {"estimate", est.psi(i)},
                         {"se", est.se(i)},
                         {"p_value", normal_two_sided_p(z)}});
  }
  j["components"] = comps;
  j["covariance"] = matrix_json(est.covariance);
  j["sigma1"] = matrix_json(est.sigma1);
  j["sigma2"] = matrix_json(est.sigma2);
  j["solver"] = json{{"iterations", est.trace.iterations},
                     {"final_residual", est.trace.final_residual},
                     {"restarted", est.trace.restarted}};
  return j;
}

// ---------------------------------------------------------------------------
// Nuisance model summaries for audit
// ---------------------------------------------------------------------------

inline json diagnostics_json(const FitDiagnostics& d) {
  json j;
  j["converged"] = d.converged;
  j["iterations"] = d.iterations;
  j["final_gradient_norm"] = d.final_gradient_norm;
  j["warnings"] = d.warnings;
  return j;
}

inline json intensity_to_json(const IntensityModel& m) {
  json j;
  j["terms"] = terms_to_json(m.terms);
  j["gamma"] = vector_json(m.gamma);
  j["diagnostics"] = diagnostics_json(m.diag);
  return j;
}

inline json propensity_to_json(const PropensityModel& m) {
  json j;
  j["terms"] = terms_to_json(m.design.terms);
  j["coefficients"] = vector_json(m.beta);
  j["penalty_weight"] = m.lambda;
  j["effective_df"] = m.edf;
  j["clip_count"] = m.clip_count;
  j["diagnostics"] = diagnostics_json(m.diag);
  return j;
}

inline json outcome_to_json(const OutcomeModel& m) {
  json j;
  j["terms"] = terms_to_json(m.terms);
  j["mode"] = m.mode == OutcomeMode::direct ? "direct" : "two_part";
  json cats = json::array();
  for (const auto& f : m.fits) {
    json c;
    c["all_zero"] = f.all_zero;
    c["two_part"] = f.two_part;
    if (!f.all_zero) {
      c["mean_coefficients"] = vector_json(f.beta_mean);
      c["mean_penalty_weight"] = f.lambda_mean;
      if (f.two_part) {
        c["prob_coefficients"] = vector_json(f.beta_prob);
        c["prob_penalty_weight"] = f.lambda_prob;
        c["log_residual_variance"] = f.log_sigma2;
      }
    }
    cats.push_back(c);
  }
  j["categories"] = cats;
  j["diagnostics"] = diagnostics_json(m.diag);
  return j;
}

inline json nuisance_summary_json(const PipelineResult& result) {
  json j;
  j["intensity"] = intensity_to_json(result.intensity);
  if (result.propensity) j["propensity"] = propensity_to_json(*result.propensity);
  if (result.outcome) j["outcome"] = outcome_to_json(*result.outcome);
  return j;
}

// ---------------------------------------------------------------------------
// Study configs
// ---------------------------------------------------------------------------

struct StudyConfig {
  std::vector<ScenarioConfig> scenarios;
  std::uint64_t master_seed = 1;
  bool dump_estimates = false;
};

inline StudyConfig study_from_json(const json& j) {
  check_keys(j, {"master_seed", "replications", "dump_estimates", "scenarios"}, "study");
  StudyConfig study;
  study.master_seed = j.value("master_seed", 1ULL);
  study.dump_estimates = j.value("dump_estimates", false);
  int default_R = j.value("replications", 200);
  if (!j.count("scenarios") || !j["scenarios"].is_array() || j["scenarios"].empty())
    throw config_error("study needs a non-empty 'scenarios' array");
  for (const auto& s : j["scenarios"]) {
    check_keys(s, {"name", "dgp", "estimator", "pi_correct", "gamma_correct", "h_correct",
                   "outcome_mode", "replications"},
               "scenario");
    ScenarioConfig sc;
    if (!s.count("name")) throw config_error("scenario needs a 'name'");
    sc.name = s["name"].get<std::string>();
    sc.dgp = dgp_from_json(s.value("dgp", json::object()), "scenario '" + sc.name + "'.dgp");
    sc.kind = kind_from_name(s.value("estimator", std::string("pgh")));
    sc.flags.pi_correct = s.value("pi_correct", true);
    sc.flags.gamma_correct = s.value("gamma_correct", true);
    sc.flags.h_correct = s.value("h_correct", true);
    std::string mode = s.value("outcome_mode", std::string("two_part"));
    if (mode == "direct")
      sc.h_mode = OutcomeMode::direct;
    else if (mode == "two_part")
      sc.h_mode = OutcomeMode::two_part;
    else
      throw config_error("scenario '" + sc.name + "': outcome_mode must be direct or two_part");
    sc.replications = s.value("replications", default_R);
    sc.master_seed = study.master_seed;
    for (const auto& other : study.scenarios)
      if (other.name == sc.name) throw config_error("duplicate scenario name '" + sc.name + "'");
    study.scenarios.push_back(std::move(sc));
  }
  return study;
}

inline json scenario_to_json(const ScenarioConfig& sc) {
  json j;
  j["name"] = sc.name;
  j["dgp"] = dgp_to_json(sc.dgp);
  j["estimator"] = kind_name(sc.kind);
  j["pi_correct"] = sc.flags.pi_correct;
  j["gamma_correct"] = sc.flags.gamma_correct;
  j["h_correct"] = sc.flags.h_correct;
  j["outcome_mode"] = sc.h_mode == OutcomeMode::direct ? "direct" : "two_part";
  j["replications"] = sc.replications;
  j["seed"] = scenario_seed(sc.master_seed, sc.name);
  return j;
}

}  // namespace snmm
