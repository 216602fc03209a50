#pragma once

#include <atomic>
#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "snmm/common.hpp"
#include "snmm/dgp.hpp"
#include "snmm/estimator.hpp"
#include "snmm/rng.hpp"

namespace snmm {

// Correct/wrong nuisance specifications of the simulation study. The wrong
// variants drop exactly what the design prescribes: the propensity keeps
// only an intercept, the intensity omits the a*d_lkdn interaction, and the
// outcome model keeps only a smooth of e_short.
struct NuisanceFlags {
  bool pi_correct = true;
  bool gamma_correct = true;
  bool h_correct = true;

  std::string label() const {
    std::string s;
    s += pi_correct ? "piC" : "piW";
    s += gamma_correct ? "_gC" : "_gW";
    s += h_correct ? "_hC" : "_hW";
    return s;
  }
};

inline CausalSpec sim_causal_spec(int K) {
  CausalSpec spec;
  spec.K = K;
  spec.category_terms = {"1", "d_lkdn"};
  spec.shared_terms = {"i_lkdn", "e_short"};
  return spec;
}

inline std::vector<TermSpec> sim_intensity_terms(bool correct) {
  if (correct)
    return {TermSpec::linear("e_short"), TermSpec::linear("a"), TermSpec::linear("a*d_lkdn")};
  return {TermSpec::linear("e_short"), TermSpec::linear("a")};
}

inline std::vector<TermSpec> sim_propensity_terms(bool correct) {
  if (correct) return {TermSpec::linear("i_lkdn"), TermSpec::spline("d_lkdn")};
  return {};  // intercept only
}

inline std::vector<TermSpec> sim_outcome_terms(bool correct, int K) {
  std::vector<TermSpec> terms;
  if (correct) {
    for (int k = 1; k <= K; ++k) terms.push_back(TermSpec::linear("log_yplus_" + std::to_string(k)));
    terms.push_back(TermSpec::linear("i_lkdn"));
    terms.push_back(TermSpec::spline("d_lkdn"));
    terms.push_back(TermSpec::spline("e_short"));
    terms.push_back(TermSpec::linear("i_lkdn*e_short"));
    terms.push_back(TermSpec::linear("d_lkdn*e_short"));
  } else {
    terms.push_back(TermSpec::spline("e_short"));
  }
  return terms;
}

inline PipelineSpec sim_pipeline_spec(const DgpConfig& dgp, EstimatorKind kind,
                                      const NuisanceFlags& flags, OutcomeMode h_mode) {
  PipelineSpec spec;
  spec.causal = sim_causal_spec(dgp.K);
  spec.intensity_terms = sim_intensity_terms(flags.gamma_correct);
  spec.propensity_terms = sim_propensity_terms(flags.pi_correct);
  spec.outcome_terms = sim_outcome_terms(flags.h_correct, dgp.K);
  spec.outcome_mode = h_mode;
  spec.kind = kind;
  return spec;
}

struct ScenarioConfig {
  std::string name;
  DgpConfig dgp;
  EstimatorKind kind = EstimatorKind::pi_gamma_h;
  NuisanceFlags flags;
  OutcomeMode h_mode = OutcomeMode::two_part;
  int replications = 200;
  std::uint64_t master_seed = 1;

  void validate() const {
    if (replications < 2) throw validation_error("scenario '" + name + "': need R >= 2");
    dgp.validate();
  }
};

struct ReplicationRecord {
  bool ok = false;
  Eigen::VectorXd psi;
  Eigen::VectorXd se;
  std::string error;
};

// Replication seeds are a pure function of (master seed, scenario name, r):
// reordering scenarios or parallelizing replications cannot change results.
inline std::uint64_t scenario_seed(std::uint64_t master, const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL ^ master;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

inline ReplicationRecord run_replication(const ScenarioConfig& scenario, int r) {
  ReplicationRecord rec;
  try {
    DgpConfig dgp = scenario.dgp;
    std::uint64_t s = scenario_seed(scenario.master_seed, scenario.name);
    s ^= 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(r + 1);
    dgp.seed = splitmix64(s);
    Panel panel = simulate_panel(dgp);
    PipelineSpec spec = sim_pipeline_spec(dgp, scenario.kind, scenario.flags, scenario.h_mode);
    PipelineResult result = fit_pipeline(panel, spec);
    rec.ok = true;
    rec.psi = result.estimate.psi;
    rec.se = result.estimate.se;
  } catch (const std::exception& e) {
    rec.ok = false;
    rec.error = e.what();
  }
  return rec;
}

struct MetricsTable {
  std::vector<std::string> component;
  Eigen::VectorXd bias, ssd, ese, cp, mcse;
  int n_success = 0;
  int n_failed = 0;
};

// Bias / SSD / ESE / CP / MCSE per component; failed replications are
// excluded from the formulas but reported in the failure count.
inline MetricsTable summarize(const std::vector<ReplicationRecord>& records,
                              const Eigen::VectorXd& truth, const CausalSpec& spec) {
  std::vector<const ReplicationRecord*> ok;
  int failed = 0;
  for (const auto& r : records) {
    if (r.ok)
      ok.push_back(&r);
    else
      ++failed;
  }
  if (ok.size() < 2)
    throw numerical_error("summarize: fewer than 2 successful replications (" +
                          std::to_string(failed) + " failed)");

  const int p = static_cast<int>(truth.size());
  const double R = static_cast<double>(ok.size());
  MetricsTable m;
  m.n_success = static_cast<int>(ok.size());
  m.n_failed = failed;
  m.bias.setZero(p);
  m.ssd.setZero(p);
  m.ese.setZero(p);
  m.cp.setZero(p);
  m.mcse.setZero(p);
  for (int j = 0; j < p; ++j) m.component.push_back(spec.component_name(j));

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
  for (const auto* r : ok) mean += r->psi;
  mean /= R;

  for (const auto* r : ok) {
    m.ssd += (r->psi - mean).cwiseAbs2();
    m.ese += r->se;
    for (int j = 0; j < p; ++j)
      if (std::abs(r->psi(j) - truth(j)) <= 1.96 * r->se(j)) m.cp(j) += 1.0;
  }
  m.bias = mean - truth;
  m.ssd = (m.ssd / (R - 1.0)).cwiseSqrt();
  m.ese /= R;
  m.cp /= R;
  m.mcse = m.ssd / std::sqrt(R);
  return m;
}

inline std::string metrics_csv(const MetricsTable& m) {
  std::string out = "component,bias,ssd,ese,cp,mcse\n";
  for (std::size_t j = 0; j < m.component.size(); ++j) {
    out += m.component[j];
    out += "," + format_double(m.bias(static_cast<Eigen::Index>(j)));
    out += "," + format_double(m.ssd(static_cast<Eigen::Index>(j)));
    out += "," + format_double(m.ese(static_cast<Eigen::Index>(j)));
    out += "," + format_double(m.cp(static_cast<Eigen::Index>(j)));
    out += "," + format_double(m.mcse(static_cast<Eigen::Index>(j)));
    out += "\n";
  }
  return out;
}

// Replication-level parallelism with a fixed reduction order: records land
// in a preallocated slot per index, so results are identical for any worker
// count.
inline std::vector<ReplicationRecord> run_scenario(const ScenarioConfig& scenario, int workers) {
  scenario.validate();
  const int R = scenario.replications;
  std::vector<ReplicationRecord> records(static_cast<std::size_t>(R));
  if (workers < 1) workers = 1;
  workers = std::min(workers, R);

  if (workers == 1) {
    for (int r = 0; r < R; ++r) records[static_cast<std::size_t>(r)] = run_replication(scenario, r);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          int r = next.fetch_add(1);
          if (r >= R) return;
          records[static_cast<std::size_t>(r)] = run_replication(scenario, r);
        }
      });
    }
    for (auto& th : pool) th.join();
  }

  int failed = 0;
  std::string first_error;
  for (const auto& rec : records) {
    if (!rec.ok) {
      if (first_error.empty()) first_error = rec.error;
      ++failed;
    }
  }
  if (failed > 0.05 * R)
    throw numerical_error("scenario '" + scenario.name + "': " + std::to_string(failed) + " of " +
                          std::to_string(R) + " replications failed (first: " + first_error + ")");
  return records;
}

struct ScenarioResult {
  ScenarioConfig config;
  MetricsTable metrics;
  std::vector<ReplicationRecord> records;
};

inline ScenarioResult run_scenario_summarized(const ScenarioConfig& scenario, int workers) {
  ScenarioResult out;
  out.config = scenario;
  out.records = run_scenario(scenario, workers);
  out.metrics = summarize(out.records, scenario.dgp.psi0(), sim_causal_spec(scenario.dgp.K));
  return out;
}

inline std::vector<ScenarioResult> run_study(const std::vector<ScenarioConfig>& scenarios,
                                             int workers) {
  std::vector<ScenarioResult> out;
  out.reserve(scenarios.size());
  for (const auto& sc : scenarios) {
    log_info("running scenario '" + sc.name + "' (R=" + std::to_string(sc.replications) + ")");
    out.push_back(run_scenario_summarized(sc, workers));
    log_info("finished scenario '" + sc.name + "'");
  }
  return out;
}

}  // namespace snmm
