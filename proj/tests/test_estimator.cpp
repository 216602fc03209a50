#include <catch2/catch.hpp>

#include <cmath>

#include "snmm/dgp.hpp"
#include "snmm/estimator.hpp"
#include "snmm/montecarlo.hpp"
#include "snmm/panel.hpp"

using namespace snmm;

namespace {

// Exact nuisance values recorded by the simulator: true propensity, true
// intensity weight, and the latent-conditional mean of Y under A_t = 0.
NuisancePredictions oracle_predictions(const CovariateFrame& frame, const OracleInfo& oracle) {
  NuisancePredictions p;
  p.weight = oracle.weight.col(0);
  p.pi.resize(frame.rows());
  for (int i = 0; i < frame.n_subjects; ++i)
    for (int t = 1; t <= frame.T; ++t)
      p.pi(frame.row(i, t)) = oracle.pi(frame.region_of[i], t - 1);
  p.h = oracle.h;
  return p;
}

DgpConfig small_cfg(std::uint64_t seed) {
  DgpConfig cfg = DgpConfig::p1();
  cfg.n = 120;
  cfg.T = 60;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("transform_H formula") {
  Panel panel = simulate_panel(small_cfg(1));
  CovariateFrame frame = build_features(panel);
  CausalSpec spec = sim_causal_spec(4);
  Eigen::Index row = frame.row(0, 1);

  Eigen::VectorXd y(4);
  y << 2.0, 0.0, 1.0, 3.0;

  // psi = 0 and a = 0 both leave y untouched
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(spec.dim());
  CHECK(transform_H(y, frame, row, 1.0, zero, spec) == y);
  Eigen::VectorXd psi = Eigen::VectorXd::Constant(spec.dim(), 0.3);
  CHECK(transform_H(y, frame, row, 0.0, psi, spec) == y);

  // with b_k' psi = ln 2 for all k and a = 1: H = y / 2. Row at t=1 has
  // d_lkdn = i_lkdn = e_short = 0, so only the category intercepts load.
  Eigen::VectorXd ln2 = Eigen::VectorXd::Zero(spec.dim());
  for (int k = 0; k < 4; ++k) ln2(2 * k) = std::log(2.0);
  Eigen::VectorXd h = transform_H(y, frame, row, 1.0, ln2, spec);
  Eigen::VectorXd expected(4);
  expected << 1.0, 0.0, 0.5, 1.5;
  for (int k = 0; k < 4; ++k) CHECK(h(k) == Approx(expected(k)).epsilon(1e-12));

  // overflow guard
  Eigen::VectorXd huge = Eigen::VectorXd::Zero(spec.dim());
  huge(0) = 800.0;
  CHECK_THROWS_AS(transform_H(y, frame, row, 1.0, huge, spec), numerical_error);
}

TEST_CASE("psi_equation with no visits is the zero vector") {
  DgpConfig cfg = small_cfg(2);
  cfg.intensity_base = 1e-9;  // hazard ~ 0: no visits
  OracleInfo oracle;
  Panel panel = simulate_panel(cfg, &oracle);
  CovariateFrame frame = build_features(panel);
  NuisancePredictions preds = oracle_predictions(frame, oracle);
  CausalSpec spec = sim_causal_spec(4);
  Eigen::VectorXd out = psi_equation(frame, preds, cfg.psi0(), spec, EstimatorKind::pi_gamma_h);
  CHECK(out == Eigen::VectorXd::Zero(spec.dim()));
}

TEST_CASE("estimating function is mean-zero at the truth with oracle nuisances") {
  // 200 replications; the averaged equation should sit within 3 Monte Carlo
  // standard errors of zero componentwise. Also exercises single-sided
  // robustness: exact h keeps the mean at zero under a wrong propensity,
  // and exact (pi, gamma) keep it at zero under a wrong h.
  const int R = 200;
  CausalSpec spec = sim_causal_spec(4);
  const int p = spec.dim();

  Eigen::MatrixXd full(R, p), wrong_pi(R, p), wrong_h(R, p), h_kind(R, p);
  for (int r = 0; r < R; ++r) {
    DgpConfig cfg = small_cfg(3000 + static_cast<std::uint64_t>(r));
    OracleInfo oracle;
    Panel panel = simulate_panel(cfg, &oracle);
    CovariateFrame frame = build_features(panel);
    NuisancePredictions preds = oracle_predictions(frame, oracle);

    full.row(r) = psi_equation(frame, preds, cfg.psi0(), spec, EstimatorKind::pi_gamma_h);

    NuisancePredictions bad_pi = preds;
    bad_pi.pi.setConstant(0.5);  // deliberately wrong propensity
    wrong_pi.row(r) = psi_equation(frame, bad_pi, cfg.psi0(), spec, EstimatorKind::pi_gamma_h);

    NuisancePredictions bad_h = preds;
    bad_h.h = 1.7 * preds.h;  // deliberately wrong outcome mean
    wrong_h.row(r) = psi_equation(frame, bad_h, cfg.psi0(), spec, EstimatorKind::pi_gamma_h);

    h_kind.row(r) = psi_equation(frame, preds, cfg.psi0(), spec, EstimatorKind::h_only);
  }

  auto check_mean_zero = [&](const Eigen::MatrixXd& samples, const char* label) {
    INFO(label);
    for (int j = 0; j < p; ++j) {
      double mean = samples.col(j).mean();
      double sd = std::sqrt((samples.col(j).array() - mean).square().sum() / (R - 1));
      double mcse = sd / std::sqrt(static_cast<double>(R));
      INFO("component " << j << ": mean " << mean << " mcse " << mcse);
      CHECK(std::abs(mean) < 3.0 * mcse);
    }
  };
  check_mean_zero(full, "oracle pi, gamma, h");
  check_mean_zero(wrong_pi, "exact h, wrong pi");
  check_mean_zero(wrong_h, "exact pi and gamma, wrong h");
  check_mean_zero(h_kind, "Psi_h with exact h and gamma");
}

TEST_CASE("analytic jacobian matches central finite differences") {
  DgpConfig cfg = small_cfg(7);
  OracleInfo oracle;
  Panel panel = simulate_panel(cfg, &oracle);
  CovariateFrame frame = build_features(panel);
  NuisancePredictions preds = oracle_predictions(frame, oracle);
  CausalSpec spec = sim_causal_spec(4);
  const int p = spec.dim();

  Eigen::VectorXd psi = cfg.psi0();
  for (auto kind : {EstimatorKind::pi_gamma, EstimatorKind::h_only, EstimatorKind::pi_gamma_h}) {
    Eigen::MatrixXd jac = psi_jacobian(frame, preds, psi, spec, kind);
    Eigen::MatrixXd fd(p, p);
    const double h = 1e-6;
    for (int j = 0; j < p; ++j) {
      Eigen::VectorXd up = psi, dn = psi;
      up(j) += h;
      dn(j) -= h;
      fd.col(j) = (psi_equation(frame, preds, up, spec, kind) -
                   psi_equation(frame, preds, dn, spec, kind)) /
                  (2.0 * h);
    }
    INFO("kind " << kind_name(kind));
    CHECK((jac - fd).norm() / fd.norm() < 1e-6);
  }
}

TEST_CASE("jacobian vanishes when the intervention is identically zero") {
  DgpConfig cfg = small_cfg(8);
  cfg.theta << -40.0, 0.0, 0.0;  // A == 0 everywhere
  OracleInfo oracle;
  Panel panel = simulate_panel(cfg, &oracle);
  CovariateFrame frame = build_features(panel);
  NuisancePredictions preds = oracle_predictions(frame, oracle);
  CausalSpec spec = sim_causal_spec(4);
  Eigen::MatrixXd jac =
      psi_jacobian(frame, preds, cfg.psi0(), spec, EstimatorKind::pi_gamma_h);
  CHECK(jac.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single-visit jacobian agrees with the hand closed form") {
  // One subject, one visit with a = 1, K = 1, p = 1: the analytic derivative
  // reduces to -w y b^2 exp(-b psi a) a / (nT) with b = 1.
  Panel panel;
  panel.grid.horizon = 2;
  panel.K = 1;
  RegionSeries rg;
  rg.region_id = "r1";
  rg.a = {1, 0};
  rg.covariate_names = {};
  rg.covariates.resize(2, 0);
  panel.regions.push_back(rg);
  SubjectPanel s;
  s.subject_id = "s1";
  s.region_id = "r1";
  s.visit = {1, 0};
  s.outcomes.setConstant(2, 1, kMissing);
  s.outcomes(0, 0) = 2.5;
  s.y0 = Eigen::VectorXd::Ones(1);
  panel.subjects.push_back(s);

  CovariateFrame frame = build_features(panel);
  CausalSpec spec;
  spec.K = 1;
  spec.category_terms = {"1"};

  NuisancePredictions preds;
  preds.weight = Eigen::VectorXd::Constant(2, 1.3);
  preds.pi = Eigen::VectorXd::Constant(2, 0.4);
  preds.h = Eigen::MatrixXd::Constant(2, 1, 0.7);

  Eigen::VectorXd psi(1);
  psi << 0.3;
  const double w = (1.0 - 0.4) / 1.3;
  const double expected = -w * 2.5 * std::exp(-0.3) / 2.0;  // nT = 2
  Eigen::MatrixXd jac = psi_jacobian(frame, preds, psi, spec, EstimatorKind::pi_gamma_h);
  CHECK(jac(0, 0) == Approx(expected).epsilon(1e-12));
}

TEST_CASE("solver finds zero psi when the blip is off and is deterministic") {
  DgpConfig cfg = small_cfg(33);
  cfg.n = 400;
  cfg.psi_p0.setZero();
  cfg.psi_y0.setZero();
  OracleInfo oracle;
  Panel panel = simulate_panel(cfg, &oracle);
  CovariateFrame frame = build_features(panel);
  NuisancePredictions preds = oracle_predictions(frame, oracle);
  CausalSpec spec = sim_causal_spec(4);

  GEstimate est = solve_psi(frame, preds, spec, EstimatorKind::pi_gamma_h);
  REQUIRE(est.trace.final_residual < 1e-8);
  for (int j = 0; j < spec.dim(); ++j)
    CHECK(std::abs(est.psi(j)) < 3.0 * est.se(j));

  GEstimate again = solve_psi(frame, preds, spec, EstimatorKind::pi_gamma_h);
  CHECK(est.psi == again.psi);  // bit-for-bit
}

TEST_CASE("sandwich is invariant to uniform rescaling of the contributions") {
  DgpConfig cfg = small_cfg(55);
  OracleInfo oracle;
  Panel panel = simulate_panel(cfg, &oracle);
  CovariateFrame frame = build_features(panel);
  NuisancePredictions preds = oracle_predictions(frame, oracle);
  CausalSpec spec = sim_causal_spec(4);

  GEstimate base = solve_psi(frame, preds, spec, EstimatorKind::pi_gamma_h);

  // halving every intensity weight doubles every contribution: A scales by
  // c, B by c^2, and A^{-1} B A^{-T} is unchanged
  NuisancePredictions scaled = preds;
  scaled.weight *= 0.5;
  GEstimate doubled;
  doubled.kind = EstimatorKind::pi_gamma_h;
  sandwich(frame, scaled, spec, EstimatorKind::pi_gamma_h, base.psi, doubled);

  CHECK((doubled.covariance - base.covariance).norm() / base.covariance.norm() < 1e-12);
  CHECK((doubled.sigma1 - 2.0 * base.sigma1).norm() / base.sigma1.norm() < 1e-12);
  CHECK((doubled.sigma2 - 4.0 * base.sigma2).norm() / base.sigma2.norm() < 1e-12);
}

TEST_CASE("one time point degenerates to a single-cluster sandwich") {
  // All visits share t = 1, so the meat has exactly one cluster: the whole
  // sample. cov = A^{-1} s s' A^{-T} with s the total score.
  Panel panel;
  panel.grid.horizon = 2;
  panel.K = 1;
  RegionSeries rg;
  rg.region_id = "r1";
  rg.a = {1, 0};
  rg.covariate_names = {};
  rg.covariates.resize(2, 0);
  panel.regions.push_back(rg);
  for (int i = 0; i < 5; ++i) {
    SubjectPanel s;
    s.subject_id = "s" + std::to_string(i + 1);
    s.region_id = "r1";
    s.visit = {1, 0};
    s.outcomes.setConstant(2, 1, kMissing);
    s.outcomes(0, 0) = 0.5 + i;
    s.y0 = Eigen::VectorXd::Ones(1);
    panel.subjects.push_back(s);
  }
  CovariateFrame frame = build_features(panel);
  CausalSpec spec;
  spec.K = 1;
  spec.category_terms = {"1"};

  NuisancePredictions preds;
  preds.weight = Eigen::VectorXd::Ones(frame.rows());
  preds.pi = Eigen::VectorXd::Constant(frame.rows(), 0.4);
  preds.h = Eigen::MatrixXd::Constant(frame.rows(), 1, 1.1);

  Eigen::VectorXd psi(1);
  psi << 0.2;
  GEstimate est;
  est.kind = EstimatorKind::pi_gamma_h;
  sandwich(frame, preds, spec, EstimatorKind::pi_gamma_h, psi, est);

  // direct computation of the degenerate form
  double A = 0.0, s_total = 0.0;
  const double w = (1.0 - 0.4) / 1.0;
  for (int i = 0; i < 5; ++i) {
    double y = 0.5 + i;
    double H = y * std::exp(-0.2);
    s_total += (H - 1.1) * w;
    A += -w * H;
  }
  double expected_cov = (s_total * s_total) / (A * A);
  CHECK(est.covariance(0, 0) == Approx(expected_cov).epsilon(1e-12));
}

TEST_CASE("permuting category order permutes the estimate blocks") {
  DgpConfig cfg = small_cfg(77);
  cfg.n = 200;
  OracleInfo oracle;
  Panel panel = simulate_panel(cfg, &oracle);
  CovariateFrame frame = build_features(panel);
  NuisancePredictions preds = oracle_predictions(frame, oracle);
  CausalSpec spec = sim_causal_spec(4);
  GEstimate base = solve_psi(frame, preds, spec, EstimatorKind::pi_gamma_h);

  // reverse the category order everywhere
  std::vector<int> perm = {3, 2, 1, 0};
  Panel permuted = panel;
  for (auto& s : permuted.subjects) {
    Eigen::MatrixXd out = s.outcomes;
    Eigen::VectorXd y0 = s.y0;
    for (int k = 0; k < 4; ++k) {
      s.outcomes.col(k) = out.col(perm[k]);
      s.y0(k) = y0(perm[k]);
    }
  }
  CovariateFrame pframe = build_features(permuted);
  NuisancePredictions ppreds = preds;
  for (int k = 0; k < 4; ++k) ppreds.h.col(k) = preds.h.col(perm[k]);

  GEstimate swapped = solve_psi(pframe, ppreds, spec, EstimatorKind::pi_gamma_h);
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 2; ++j)
      CHECK(swapped.psi(2 * k + j) == Approx(base.psi(2 * perm[k] + j)).margin(1e-9));
  CHECK(swapped.psi(8) == Approx(base.psi(8)).margin(1e-9));
  CHECK(swapped.psi(9) == Approx(base.psi(9)).margin(1e-9));
}

TEST_CASE("pipeline composition equals the manual steps and skips unused fits") {
  DgpConfig cfg = small_cfg(91);
  cfg.n = 200;
  Panel panel = simulate_panel(cfg);
  CovariateFrame frame = build_features(panel);

  PipelineSpec spec =
      sim_pipeline_spec(cfg, EstimatorKind::pi_gamma_h, NuisanceFlags{}, OutcomeMode::two_part);
  PipelineResult end_to_end = fit_pipeline(panel, spec);

  // manual composition of the same steps
  IntensityModel im = fit_cox(frame, spec.intensity_terms);
  CovariateFrame rframe = region_frame(panel);
  PropensityModel pm = fit_propensity(rframe, spec.propensity_terms);
  OutcomeModel om = fit_outcome(frame, spec.outcome_terms, spec.outcome_mode);

  NuisancePredictions preds;
  preds.weight = im.predict_weights(frame);
  std::vector<Eigen::Index> rrows(static_cast<std::size_t>(rframe.rows()));
  for (Eigen::Index r = 0; r < rframe.rows(); ++r) rrows[static_cast<std::size_t>(r)] = r;
  Eigen::VectorXd rpi = pm.predict_rows(rframe, rrows);
  preds.pi.resize(frame.rows());
  for (int i = 0; i < frame.n_subjects; ++i)
    for (int t = 1; t <= frame.T; ++t)
      preds.pi(frame.row(i, t)) = rpi(rframe.row(frame.region_of[i], t));
  std::vector<Eigen::Index> vrows;
  for (Eigen::Index r = 0; r < frame.rows(); ++r)
    if (frame.visit[r]) vrows.push_back(r);
  Eigen::MatrixXd hv = om.predict_rows(frame, vrows);
  preds.h.setConstant(frame.rows(), frame.K, kMissing);
  for (std::size_t i = 0; i < vrows.size(); ++i)
    preds.h.row(vrows[i]) = hv.row(static_cast<Eigen::Index>(i));

  GEstimate manual = solve_psi(frame, preds, spec.causal, spec.kind);
  CHECK(end_to_end.estimate.psi == manual.psi);

  // structural skips
  PipelineSpec h_spec = spec;
  h_spec.kind = EstimatorKind::h_only;
  PipelineResult h_res = fit_pipeline(panel, h_spec);
  CHECK_FALSE(h_res.propensity.has_value());
  CHECK(h_res.outcome.has_value());

  PipelineSpec pg_spec = spec;
  pg_spec.kind = EstimatorKind::pi_gamma;
  PipelineResult pg_res = fit_pipeline(panel, pg_spec);
  CHECK(pg_res.propensity.has_value());
  CHECK_FALSE(pg_res.outcome.has_value());
}

TEST_CASE("region-time clustering is available behind the flag") {
  DgpConfig cfg = small_cfg(99);
  OracleInfo oracle;
  Panel panel = simulate_panel(cfg, &oracle);
  CovariateFrame frame = build_features(panel);
  NuisancePredictions preds = oracle_predictions(frame, oracle);
  CausalSpec spec = sim_causal_spec(4);

  GEstimate time_cl = solve_psi(frame, preds, spec, EstimatorKind::pi_gamma_h,
                                Eigen::VectorXd::Zero(spec.dim()), false);
  GEstimate region_cl = solve_psi(frame, preds, spec, EstimatorKind::pi_gamma_h,
                                  Eigen::VectorXd::Zero(spec.dim()), true);
  CHECK(time_cl.psi == region_cl.psi);  // the point estimate ignores clustering
  // finer clusters split the per-time score sums, so the meat must differ
  CHECK((time_cl.sigma2 - region_cl.sigma2).norm() > 0.0);
  CHECK(region_cl.se.minCoeff() > 0.0);
}

TEST_CASE("p-value stars") {
  CHECK(p_value_stars(normal_two_sided_p(3.5)) == "***");
  CHECK(normal_two_sided_p(3.5) == Approx(0.000465).margin(2e-6));
  CHECK(p_value_stars(normal_two_sided_p(2.8)) == "**");
  CHECK(p_value_stars(normal_two_sided_p(2.0)) == "*");
  CHECK(p_value_stars(normal_two_sided_p(1.7)) == ".");
  CHECK(p_value_stars(normal_two_sided_p(0.5)) == "");
}
