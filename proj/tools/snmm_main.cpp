// Batch entry points: simulate panels, fit one dataset, run Monte Carlo
// studies, and render study reports. All randomness flows from the single
// configured seed; exit codes are 0 success, 2 config error, 3 data or
// assumption diagnostic, 4 numerical failure.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "snmm/common.hpp"
#include "snmm/csv.hpp"
#include "snmm/dgp.hpp"
#include "snmm/estimator.hpp"
#include "snmm/io_json.hpp"
#include "snmm/montecarlo.hpp"
#include "snmm/panel.hpp"

namespace fs = std::filesystem;
using snmm::json;

namespace {

constexpr const char* kVersion = "0.1.0";

json load_config(const std::string& path) {
  std::string text;
  try {
    text = snmm::read_text_file(path);
  } catch (const snmm::error& e) {
    throw snmm::config_error(e.what());
  }
  try {
    return json::parse(text);
  } catch (const std::exception& e) {
    throw snmm::config_error("cannot parse config " + path + ": " + e.what());
  }
}

void write_manifest(const fs::path& out_dir, const std::string& command, const json& resolved,
                    double wall_seconds, json extra = json::object()) {
  json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["config"] = resolved;
  m["wall_seconds"] = wall_seconds;
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  snmm::write_text_file((out_dir / "manifest.json").string(), m.dump(2) + "\n");
}

int cmd_simulate(const std::string& config_path, const std::string& out,
                 std::optional<std::uint64_t> seed) {
  json cfg = load_config(config_path);
  snmm::check_keys(cfg, {"dgp"}, "config");
  if (!cfg.count("dgp")) throw snmm::config_error("simulate config needs a 'dgp' section");
  snmm::DgpConfig dgp = snmm::dgp_from_json(cfg["dgp"]);
  if (seed) dgp.seed = *seed;

  auto t0 = std::chrono::steady_clock::now();
  snmm::Panel panel = snmm::simulate_panel(dgp);
  fs::create_directories(out);
  snmm::write_panel_csv(panel, (fs::path(out) / "regions.csv").string(),
                        (fs::path(out) / "subjects.csv").string());
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(out, "simulate", json{{"dgp", snmm::dgp_to_json(dgp)}}, wall);
  std::cout << "wrote " << out << "/regions.csv and " << out << "/subjects.csv ("
            << panel.subjects.size() << " subjects, T=" << panel.grid.horizon << ")\n";
  return 0;
}

int cmd_fit(const std::string& config_path, const std::string& out,
            std::optional<std::string> estimator_override) {
  json cfg = load_config(config_path);
  snmm::check_keys(cfg, {"panel", "causal", "intensity_terms", "propensity_terms", "outcome_terms",
                         "outcome_mode", "estimator", "cluster"},
                   "config");
  if (!cfg.count("panel")) throw snmm::config_error("fit config needs a 'panel' section");
  snmm::check_keys(cfg["panel"], {"regions", "subjects"}, "panel");
  if (!cfg["panel"].count("regions") || !cfg["panel"].count("subjects"))
    throw snmm::config_error("panel section needs 'regions' and 'subjects' paths");

  snmm::Panel panel = snmm::read_panel_csv(cfg["panel"]["regions"].get<std::string>(),
                                           cfg["panel"]["subjects"].get<std::string>());
  json fit_cfg = cfg;
  fit_cfg.erase("panel");
  snmm::PipelineSpec spec = snmm::pipeline_from_json(fit_cfg, panel.K);
  if (estimator_override) spec.kind = snmm::kind_from_name(*estimator_override);

  auto t0 = std::chrono::steady_clock::now();
  snmm::PipelineResult result = snmm::fit_pipeline(panel, spec);
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::cout << snmm::format_estimate_table(result.estimate, spec.causal);
  if (!out.empty()) {
    fs::create_directories(out);
    json est = snmm::estimate_to_json(result.estimate, spec.causal);
    snmm::write_text_file((fs::path(out) / "estimate.json").string(), est.dump(2) + "\n");
    json nuis = snmm::nuisance_summary_json(result);
    snmm::write_text_file((fs::path(out) / "nuisance.json").string(), nuis.dump(2) + "\n");
    json resolved = cfg;
    resolved["estimator"] = snmm::kind_name(spec.kind);
    write_manifest(out, "fit", resolved, wall);
    std::cout << "wrote " << out << "/estimate.json and nuisance.json\n";
  }
  return 0;
}

std::string estimates_csv(const snmm::ScenarioResult& res) {
  std::string out = "replication,ok";
  const int p = res.config.dgp.psi_dim();
  snmm::CausalSpec spec = snmm::sim_causal_spec(res.config.dgp.K);
  for (int j = 0; j < p; ++j) out += "," + spec.component_name(j);
  for (int j = 0; j < p; ++j) out += ",se_" + spec.component_name(j);
  out += "\n";
  for (std::size_t r = 0; r < res.records.size(); ++r) {
    const auto& rec = res.records[r];
    out += std::to_string(r) + "," + (rec.ok ? "1" : "0");
    for (int j = 0; j < p; ++j)
      out += "," + (rec.ok ? snmm::format_double(rec.psi(j)) : std::string());
    for (int j = 0; j < p; ++j)
      out += "," + (rec.ok ? snmm::format_double(rec.se(j)) : std::string());
    out += "\n";
  }
  return out;
}

int cmd_mc(const std::string& config_path, const std::string& out,
           std::optional<std::uint64_t> seed, int workers, bool resume) {
  json cfg = load_config(config_path);
  snmm::StudyConfig study = snmm::study_from_json(cfg);
  if (seed) {
    study.master_seed = *seed;
    for (auto& sc : study.scenarios) sc.master_seed = *seed;
  }
  fs::create_directories(out);

  // A finished study is a no-op under --resume: completed scenarios are
  // skipped when their metrics file is already present.
  std::set<std::string> done;
  fs::path manifest_path = fs::path(out) / "manifest.json";
  if (resume && fs::exists(manifest_path)) {
    json prev = json::parse(snmm::read_text_file(manifest_path.string()));
    if (prev.count("completed"))
      for (const auto& name : prev["completed"]) {
        std::string n = name.get<std::string>();
        if (fs::exists(fs::path(out) / (n + ".csv"))) done.insert(n);
      }
  }

  auto t0 = std::chrono::steady_clock::now();
  json completed = json::array();
  json failures = json::object();
  for (const auto& sc : study.scenarios) {
    if (done.count(sc.name)) {
      snmm::log_info("scenario '" + sc.name + "' already complete; skipping");
      completed.push_back(sc.name);
      continue;
    }
    snmm::log_info("running scenario '" + sc.name + "'");
    snmm::ScenarioResult res = snmm::run_scenario_summarized(sc, workers);
    snmm::write_text_file((fs::path(out) / (sc.name + ".csv")).string(),
                          snmm::metrics_csv(res.metrics));
    if (study.dump_estimates)
      snmm::write_text_file((fs::path(out) / ("estimates_" + sc.name + ".csv")).string(),
                            estimates_csv(res));
    completed.push_back(sc.name);
    failures[sc.name] = res.metrics.n_failed;
  }
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json scenarios = json::array();
  for (const auto& sc : study.scenarios) scenarios.push_back(snmm::scenario_to_json(sc));
  write_manifest(out, "mc", cfg, wall,
                 json{{"completed", completed},
                      {"failures", failures},
                      {"master_seed", study.master_seed},
                      {"scenarios", scenarios}});
  std::cout << "study complete: " << completed.size() << " scenario(s) in " << out << "\n";
  return 0;
}

int cmd_report(const std::string& out) {
  fs::path manifest_path = fs::path(out) / "manifest.json";
  if (!fs::exists(manifest_path))
    throw snmm::structural_error("no manifest.json in " + out + " (not a study directory?)");
  json manifest = json::parse(snmm::read_text_file(manifest_path.string()));
  if (!manifest.count("completed")) throw snmm::structural_error("manifest has no completed list");

  for (const auto& name_j : manifest["completed"]) {
    std::string name = name_j.get<std::string>();
    snmm::CsvTable t = snmm::read_csv((fs::path(out) / (name + ".csv")).string());
    std::printf("scenario %s\n", name.c_str());
    std::printf("  %-10s %9s %9s %9s %7s %9s\n", "component", "bias", "ssd", "ese", "cp", "mcse");
    for (const auto& row : t.rows) {
      std::printf("  %-10s %9.4f %9.4f %9.4f %7.3f %9.4f\n", row[0].c_str(),
                  snmm::parse_double(row[1], "bias"), snmm::parse_double(row[2], "ssd"),
                  snmm::parse_double(row[3], "ese"), snmm::parse_double(row[4], "cp"),
                  snmm::parse_double(row[5], "mcse"));
    }
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Doubly robust G-estimation for multivariate zero-inflated panels"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> estimator;
  int workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers < 1) workers = 1;
  bool resume = false;

  auto* sim = app.add_subcommand("simulate", "Generate a panel and write the CSV pair");
  sim->add_option("--config", config_path, "JSON config with a dgp section")->required();
  sim->add_option("--out", out_dir, "output directory")->required();
  sim->add_option("--seed", seed, "override the configured seed");

  auto* fit = app.add_subcommand("fit", "Fit one dataset and print the estimate table");
  fit->add_option("--config", config_path, "JSON config with panel paths and model specs")
      ->required();
  fit->add_option("--out", out_dir, "output directory for estimate.json");
  fit->add_option("--estimator", estimator, "estimating function: pg|h|pgh");

  auto* mc = app.add_subcommand("mc", "Run a Monte Carlo study");
  mc->add_option("--config", config_path, "JSON study config")->required();
  mc->add_option("--out", out_dir, "output directory")->required();
  mc->add_option("--seed", seed, "override the master seed");
  mc->add_option("--workers", workers, "parallel replication workers");
  mc->add_flag("--resume", resume, "skip scenarios already completed in --out");

  auto* rep = app.add_subcommand("report", "Pretty-print the metrics of a finished study");
  rep->add_option("--out", out_dir, "study directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sim->parsed()) return cmd_simulate(config_path, out_dir, seed);
    if (fit->parsed()) return cmd_fit(config_path, out_dir, estimator);
    if (mc->parsed()) return cmd_mc(config_path, out_dir, seed, workers, resume);
    if (rep->parsed()) return cmd_report(out_dir);
  } catch (const snmm::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const snmm::positivity_error& e) {
    std::cerr << "assumption diagnostic: " << e.what() << "\n";
    return 3;
  } catch (const snmm::structural_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const snmm::validation_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const snmm::calibration_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const snmm::numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
