#include <catch2/catch.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "snmm/csv.hpp"
#include "snmm/estimator.hpp"
#include "snmm/io_json.hpp"
#include "snmm/panel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  CliResult res;
  std::string cmd = std::string(SNMM_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf;
  while (std::size_t got = std::fread(buf.data(), 1, buf.size(), pipe)) res.output.append(buf.data(), got);
  int status = pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("snmm_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string write_sim_config(const fs::path& dir, int n, int T, std::uint64_t seed) {
  json cfg;
  cfg["dgp"] = {{"preset", "P1"}, {"n", n}, {"T", T}, {"seed", seed}};
  fs::path p = dir / "sim.json";
  snmm::write_text_file(p.string(), cfg.dump(2));
  return p.string();
}

json fit_config_body() {
  json cfg;
  cfg["causal"] = {{"category_terms", {"1", "d_lkdn"}}, {"shared_terms", {"i_lkdn", "e_short"}}};
  cfg["intensity_terms"] = {"e_short", "a", "a*d_lkdn"};
  cfg["propensity_terms"] = json::array({"i_lkdn", json{{"col", "d_lkdn"}, {"smooth", true}}});
  cfg["outcome_terms"] = json::array({"log_yplus_1", "log_yplus_2", "log_yplus_3", "log_yplus_4",
                                      "i_lkdn", json{{"col", "d_lkdn"}, {"smooth", true}},
                                      json{{"col", "e_short"}, {"smooth", true}},
                                      "i_lkdn*e_short", "d_lkdn*e_short"});
  cfg["outcome_mode"] = "two_part";
  cfg["estimator"] = "pgh";
  return cfg;
}

}  // namespace

TEST_CASE("simulate is deterministic and writes the toy schema") {
  fs::path dir = fresh_dir("simulate");
  std::string cfg = write_sim_config(dir, 10, 20, 7);

  CliResult a = run_cli("simulate --config " + cfg + " --out " + (dir / "a").string());
  INFO(a.output);
  REQUIRE(a.exit_code == 0);
  CliResult b = run_cli("simulate --config " + cfg + " --out " + (dir / "b").string());
  REQUIRE(b.exit_code == 0);

  CHECK(snmm::read_text_file((dir / "a/regions.csv").string()) ==
        snmm::read_text_file((dir / "b/regions.csv").string()));
  CHECK(snmm::read_text_file((dir / "a/subjects.csv").string()) ==
        snmm::read_text_file((dir / "b/subjects.csv").string()));

  // 10 subjects x 20 time points plus the header row
  snmm::CsvTable t = snmm::read_csv((dir / "a/subjects.csv").string());
  CHECK(t.rows.size() == 200);
}

TEST_CASE("malformed config exits 2 and names the key") {
  fs::path dir = fresh_dir("badcfg");
  json cfg;
  cfg["dgp"] = {{"preset", "P1"}, {"n", 10}, {"T", 20}, {"bogus_knob", 3}};
  fs::path p = dir / "bad.json";
  snmm::write_text_file(p.string(), cfg.dump());
  CliResult r = run_cli("simulate --config " + p.string() + " --out " + (dir / "out").string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("bogus_knob") != std::string::npos);
}

TEST_CASE("fit matches the library pipeline and writes stars") {
  fs::path dir = fresh_dir("fit");
  std::string sim_cfg = write_sim_config(dir, 120, 60, 11);
  REQUIRE(run_cli("simulate --config " + sim_cfg + " --out " + (dir / "panel").string()).exit_code == 0);

  json cfg = fit_config_body();
  cfg["panel"] = {{"regions", (dir / "panel/regions.csv").string()},
                  {"subjects", (dir / "panel/subjects.csv").string()}};
  fs::path p = dir / "fit.json";
  snmm::write_text_file(p.string(), cfg.dump(2));

  CliResult r = run_cli("fit --config " + p.string() + " --out " + (dir / "est").string());
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("Causal parameter estimates") != std::string::npos);

  json est = json::parse(snmm::read_text_file((dir / "est/estimate.json").string()));

  // nuisance audit trail: coefficients, penalties, diagnostics
  json nuis = json::parse(snmm::read_text_file((dir / "est/nuisance.json").string()));
  CHECK(nuis["intensity"]["gamma"].size() == 3);
  CHECK(nuis["propensity"].contains("penalty_weight"));
  CHECK(nuis["outcome"]["categories"].size() == 4);

  // library-level composition on the same CSVs
  snmm::Panel panel = snmm::read_panel_csv((dir / "panel/regions.csv").string(),
                                           (dir / "panel/subjects.csv").string());
  json fit_cfg = cfg;
  fit_cfg.erase("panel");
  snmm::PipelineSpec spec = snmm::pipeline_from_json(fit_cfg, panel.K);
  snmm::PipelineResult lib = snmm::fit_pipeline(panel, spec);

  REQUIRE(est["components"].size() == 10);
  for (int j = 0; j < 10; ++j) {
    CHECK(est["components"][j]["estimate"].get<double>() == lib.estimate.psi(j));
    CHECK(est["components"][j]["se"].get<double>() == lib.estimate.se(j));
  }
}

TEST_CASE("constant intervention exits 3") {
  fs::path dir = fresh_dir("positivity");

  // hand-written CSV pair with a == 0 everywhere
  std::string regions = "region_id,t,a,i_lkdn,d_lkdn\n";
  for (int t = 1; t <= 20; ++t)
    regions += "r1," + std::to_string(t) + ",0," + (2 * t > 20 ? "1" : "0") + ",0\n";
  snmm::write_text_file((dir / "regions.csv").string(), regions);
  std::string subjects = "subject_id,region_id,t,visit,y_1,y0_1\n";
  for (int i = 1; i <= 8; ++i)
    for (int t = 1; t <= 20; ++t)
      subjects += "s" + std::to_string(i) + ",r1," + std::to_string(t) + "," +
                  (t % 3 == 0 ? "1,2.5" : "0,") + ",1\n";
  snmm::write_text_file((dir / "subjects.csv").string(), subjects);

  json cfg;
  cfg["panel"] = {{"regions", (dir / "regions.csv").string()},
                  {"subjects", (dir / "subjects.csv").string()}};
  cfg["causal"] = {{"category_terms", {"1"}}, {"shared_terms", json::array()}};
  cfg["intensity_terms"] = json::array({"e_short"});
  cfg["propensity_terms"] = json::array();
  cfg["outcome_terms"] = json::array({"e_short"});
  cfg["estimator"] = "pgh";
  fs::path p = dir / "fit.json";
  snmm::write_text_file(p.string(), cfg.dump());

  CliResult r = run_cli("fit --config " + p.string());
  INFO(r.output);
  CHECK(r.exit_code == 3);
}

TEST_CASE("mc smoke study: determinism across workers and resume no-op") {
  fs::path dir = fresh_dir("mc");
  json cfg;
  cfg["master_seed"] = 99;
  cfg["replications"] = 2;
  cfg["scenarios"] = json::array(
      {json{{"name", "s1"}, {"dgp", {{"preset", "P1"}, {"n", 60}, {"T", 40}}}, {"estimator", "pgh"}},
       json{{"name", "s2"},
            {"dgp", {{"preset", "P1"}, {"n", 60}, {"T", 40}}},
            {"estimator", "h"},
            {"h_correct", false}}});
  fs::path p = dir / "study.json";
  snmm::write_text_file(p.string(), cfg.dump(2));

  CliResult w1 = run_cli("mc --config " + p.string() + " --out " + (dir / "w1").string() +
                         " --workers 1");
  INFO(w1.output);
  REQUIRE(w1.exit_code == 0);
  CliResult w8 = run_cli("mc --config " + p.string() + " --out " + (dir / "w8").string() +
                         " --workers 8");
  REQUIRE(w8.exit_code == 0);

  for (const char* name : {"s1.csv", "s2.csv"})
    CHECK(snmm::read_text_file((dir / "w1" / name).string()) ==
          snmm::read_text_file((dir / "w8" / name).string()));

  // resume: a finished study re-run is a no-op with identical outputs
  std::string before = snmm::read_text_file((dir / "w1/s1.csv").string());
  auto mtime_before = fs::last_write_time(dir / "w1/s1.csv");
  CliResult again = run_cli("mc --config " + p.string() + " --out " + (dir / "w1").string() +
                            " --resume --workers 2");
  REQUIRE(again.exit_code == 0);
  CHECK(snmm::read_text_file((dir / "w1/s1.csv").string()) == before);
  CHECK(fs::last_write_time(dir / "w1/s1.csv") == mtime_before);

  // report renders both scenario tables
  CliResult rep = run_cli("report --out " + (dir / "w1").string());
  REQUIRE(rep.exit_code == 0);
  CHECK(rep.output.find("scenario s1") != std::string::npos);
  CHECK(rep.output.find("scenario s2") != std::string::npos);
}

TEST_CASE("estimator flag override") {
  fs::path dir = fresh_dir("kindflag");
  std::string sim_cfg = write_sim_config(dir, 80, 40, 3);
  REQUIRE(run_cli("simulate --config " + sim_cfg + " --out " + (dir / "panel").string()).exit_code == 0);
  json cfg = fit_config_body();
  cfg["panel"] = {{"regions", (dir / "panel/regions.csv").string()},
                  {"subjects", (dir / "panel/subjects.csv").string()}};
  fs::path p = dir / "fit.json";
  snmm::write_text_file(p.string(), cfg.dump());
  CliResult r = run_cli("fit --config " + p.string() + " --estimator pg --out " +
                        (dir / "out").string());
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  json est = json::parse(snmm::read_text_file((dir / "out/estimate.json").string()));
  CHECK(est["estimator"] == "pg");
}
