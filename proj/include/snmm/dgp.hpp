#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "snmm/common.hpp"
#include "snmm/panel.hpp"
#include "snmm/rng.hpp"

namespace snmm {

// Simulation settings. The causal parameter splits into a zero-inflation
// part psi_p0 and a positive-mean part psi_y0; the estimand is their sum.
// Layout of psi: (psi_10, psi_11, ..., psi_K0, psi_K1, psi_(1), psi_(2)):
// per-category intercept and d_lkdn slope, then the i_lkdn and e_short
// modifiers shared by all categories.
struct DgpConfig {
  int n = 600;
  int T = 200;
  int K = 4;
  int region_count = 10;

  Eigen::Vector3d theta{-0.5, 0.25, 1.0};  // propensity: 1, i_lkdn, d_lkdn

  double intensity_base = 0.075;
  double intensity_lockdown_loghr = 0.125;             // on i_lkdn (part of the baseline)
  Eigen::Vector3d intensity_coef{0.5, -0.2, -0.2};     // on (e_short, a, a*d_lkdn)

  Eigen::VectorXd mu_y0, mu_p0;      // K: baseline means of Z^y, Z^p
  Eigen::VectorXd beta_y0, beta_p0;  // K: coefficients on the baseline functions
  Eigen::VectorXd sigma_y_diag;      // K: Var(Z^y_k)
  Eigen::VectorXd sigma_p_diag;      // K: Var(Z^p_k)
  Eigen::MatrixXd target_corr;       // K x K within-time correlation of the outcomes
  double rho_y = 0.9;                // temporal correlation between consecutive visits
  double rho_p = 0.9;

  Eigen::VectorXd psi_p0, psi_y0;    // 2K+2 each
  std::uint64_t seed = 1;

  // Maximum fraction of exp(Z^p) draws that may be clamped into (0,1)
  // before the replication fails loudly. The P1 setting carries a small
  // structural clamp rate (~0.2%, treated category-1 rows late in lockdown),
  // so the guard sits above that but still trips on real miscalibration.
  double max_clamp_fraction = 5e-3;

  Eigen::VectorXd psi0() const { return psi_p0 + psi_y0; }
  int psi_dim() const { return 2 * K + 2; }

  static Eigen::MatrixXd paper_target_corr() {
    Eigen::MatrixXd s(4, 4);
    s << 1.0, 0.05, -0.05, 0.1,
         0.05, 1.0, 0.3, 0.45,
         -0.05, 0.3, 1.0, 0.50,
         0.1, 0.45, 0.50, 1.0;
    return s;
  }

  static DgpConfig base() {
    DgpConfig c;
    c.mu_y0 = Eigen::VectorXd::Ones(4);
    c.mu_p0.resize(4);
    c.mu_p0 << std::log(0.3), std::log(0.5), std::log(0.7), std::log(0.9);
    c.beta_y0 = Eigen::VectorXd::Constant(4, -0.25);
    c.beta_p0.resize(4);
    c.beta_p0 << -0.05, 0.05, -0.05, 0.02;
    c.sigma_y_diag = c.mu_y0.cwiseAbs() / 4.0;
    // Z^p must stay below 0 essentially surely so that exp(Z^p) is a valid
    // probability: |mu_p0|/8 is taken as the standard deviation, which puts
    // zero exactly eight sigmas above every category's mean.
    c.sigma_p_diag = (c.mu_p0.cwiseAbs() / 8.0).cwiseAbs2();
    c.target_corr = paper_target_corr();
    return c;
  }

  // Intervention raises zero-inflation and lowers positive spending in the
  // same (P1) or opposite (P2) directions across the category pairs.
  static DgpConfig p1() {
    DgpConfig c = base();
    c.psi_p0.resize(10);
    c.psi_y0.resize(10);
    c.psi_p0 << 0.5, 0.5, -0.5, -0.5, 0.15, 0.15, -0.15, -0.15, 0.0, 0.0;
    c.psi_y0 << -0.15, -0.15, 0.15, 0.15, -0.5, -0.5, 0.5, 0.5, 0.35, 0.35;
    return c;
  }

  static DgpConfig p2() {
    DgpConfig c = base();
    c.psi_p0.resize(10);
    c.psi_y0.resize(10);
    c.psi_p0 << 0.15, 0.15, -0.1, -0.1, 0.05, 0.05, -0.2, -0.2, 0.0, 0.0;
    c.psi_y0 << 0.2, 0.2, -0.25, -0.25, 0.30, 0.30, -0.15, -0.15, 0.35, 0.35;
    return c;
  }

  void validate() const {
    if (n < 1 || T < 2 || K < 1 || region_count < 1)
      throw validation_error("dgp: need n >= 1, T >= 2, K >= 1, region_count >= 1");
    auto check_k = [&](const Eigen::VectorXd& v, const char* name) {
      if (v.size() != K) throw validation_error(std::string("dgp: ") + name + " must have length K");
    };
    check_k(mu_y0, "mu_y0");
    check_k(mu_p0, "mu_p0");
    check_k(beta_y0, "beta_y0");
    check_k(beta_p0, "beta_p0");
    check_k(sigma_y_diag, "sigma_y_diag");
    check_k(sigma_p_diag, "sigma_p_diag");
    for (int k = 0; k < K; ++k)
      if (!(mu_p0(k) < 0.0))
        throw validation_error("dgp: mu_p0 entries must be negative so exp(Z^p) can stay in (0,1)");
    if (target_corr.rows() != K || target_corr.cols() != K)
      throw validation_error("dgp: target_corr must be K x K");
    if (!target_corr.isApprox(target_corr.transpose(), 1e-12))
      throw validation_error("dgp: target_corr must be symmetric");
    for (int k = 0; k < K; ++k)
      if (std::abs(target_corr(k, k) - 1.0) > 1e-12)
        throw validation_error("dgp: target_corr must have unit diagonal");
    if (psi_p0.size() != psi_dim() || psi_y0.size() != psi_dim())
      throw validation_error("dgp: psi vectors must have length 2K+2");
  }
};

// Lockdown schedule of the simulation design: the indicator turns on for
// t in (T/2, T]; the cumulative duration is scaled to [0, 1].
inline double lockdown_indicator(int t, int T) { return 2 * t > T ? 1.0 : 0.0; }
inline double lockdown_duration(int t, int T) {
  double half = T / 2.0;
  return std::max(0.0, t - half) / half;
}

inline double propensity_true(const DgpConfig& cfg, double i_lkdn, double d_lkdn) {
  return logistic(cfg.theta(0) + cfg.theta(1) * i_lkdn + cfg.theta(2) * d_lkdn);
}

inline double hazard_true(const DgpConfig& cfg, double i_lkdn, double d_lkdn, double e_short,
                          int a) {
  double lp = cfg.intensity_coef(0) * e_short + cfg.intensity_coef(1) * a +
              cfg.intensity_coef(2) * a * d_lkdn;
  return cfg.intensity_base * std::exp(cfg.intensity_lockdown_loghr * i_lkdn) * std::exp(lp);
}

// Sequential Bernoulli intervention draws over t = 1..T (A_0 = 0).
inline std::vector<int> gen_intervention(const DgpConfig& cfg, RngStream& rng) {
  std::vector<int> a(cfg.T);
  for (int t = 1; t <= cfg.T; ++t) {
    double p = propensity_true(cfg, lockdown_indicator(t, cfg.T), lockdown_duration(t, cfg.T));
    a[t - 1] = rng.bernoulli(p) ? 1 : 0;
  }
  return a;
}

// Covariance maps C1/C2: given the target within-time correlation of the
// exponentiated variables and the diagonal of the normal-scale covariance,
// recover the normal-scale within-time covariance and the cross-time
// covariance whose exponentiated correlations equal rho_bar * target.
struct CovariancePair {
  Eigen::MatrixXd within;  // Sigma_w
  Eigen::MatrixXd cross;   // cross-covariance between consecutive visits
};

inline CovariancePair covariance_map(const Eigen::MatrixXd& target_corr,
                                     const Eigen::VectorXd& diag, double rho_bar) {
  const int K = static_cast<int>(diag.size());
  if (target_corr.rows() != K || target_corr.cols() != K)
    throw validation_error("covariance_map: shape mismatch");
  for (int k = 0; k < K; ++k)
    if (!(diag(k) > 0.0)) throw validation_error("covariance_map: diagonal must be positive");

  Eigen::VectorXd scale(K);
  for (int k = 0; k < K; ++k) scale(k) = std::sqrt(std::exp(diag(k)) - 1.0);

  CovariancePair out;
  out.within.resize(K, K);
  out.cross.resize(K, K);
  for (int k = 0; k < K; ++k) {
    for (int l = 0; l < K; ++l) {
      double base = target_corr(k, l) * scale(k) * scale(l);
      out.within(k, l) = (k == l) ? diag(k) : std::log1p(base);
      out.cross(k, l) = std::log1p(rho_bar * base);
    }
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(out.within);
  double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < -1e-12)
    throw calibration_error("covariance_map: Sigma_w is not positive semidefinite (eigenvalue " +
                            std::to_string(min_eig) + ")");
  return out;
}

// E(Y)_k = exp(mu_k + Sigma_kk / 2) for Y = exp(Z), Z ~ N(mu, Sigma).
inline Eigen::VectorXd lognormal_mean(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
  Eigen::VectorXd out(mu.size());
  for (Eigen::Index k = 0; k < mu.size(); ++k) out(k) = std::exp(mu(k) + 0.5 * sigma(k, k));
  return out;
}

// Cov(Y) = E(Y) E(Y)^T .* (exp(Sigma) - 1).
inline Eigen::MatrixXd lognormal_cov(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
  Eigen::VectorXd m = lognormal_mean(mu, sigma);
  Eigen::MatrixXd out(mu.size(), mu.size());
  for (Eigen::Index k = 0; k < mu.size(); ++k)
    for (Eigen::Index l = 0; l < mu.size(); ++l)
      out(k, l) = m(k) * m(l) * (std::exp(sigma(k, l)) - 1.0);
  return out;
}

// Baseline functions of the generating process (Appendix-style nuisance
// structure the estimator never sees).
inline double baseline_fun_y(double i_lkdn, double d_lkdn, double e_short) {
  return (1.0 + d_lkdn) / (i_lkdn * e_short + 1.0);
}
inline double baseline_fun_p(double i_lkdn, double d_lkdn, double e_short) {
  return (i_lkdn * e_short) / (1.0 + d_lkdn);
}

// Treatment blip for category k (0-based) in the simulation's causal model:
// category intercept + category d_lkdn slope + shared i_lkdn and e_short terms.
inline double sim_blip(const Eigen::VectorXd& psi, int k, double i_lkdn, double d_lkdn,
                       double e_short) {
  const int K = (static_cast<int>(psi.size()) - 2) / 2;
  return psi(2 * k) + psi(2 * k + 1) * d_lkdn + psi(2 * K) * i_lkdn + psi(2 * K + 1) * e_short;
}

// Latent-state oracles recorded during simulation; used by tests that need
// exact nuisance values (true propensity, true intensity weight, and the
// exact conditional mean of Y under A_t = 0 given the latent history).
struct OracleInfo {
  Eigen::MatrixXd pi;            // region_count x T: true propensity
  Eigen::MatrixXd weight;        // (n*T): exp(m_v' gamma_true), subject-major rows
  Eigen::MatrixXd h;             // (n*T) x K: E(Y | latent history, A_t = 0); NaN off-visits
  long clamp_count = 0;          // exp(Z^p) draws clamped into (0,1)
  long p_draw_count = 0;
};

namespace detail {

struct OutcomeSampler {
  Eigen::MatrixXd chol_marginal;  // Cholesky of Sigma_w
  Eigen::MatrixXd regress;        // Sigma_cross * Sigma_w^{-1}
  Eigen::MatrixXd chol_cond;      // Cholesky of Sigma_w - regress * Sigma_cross^T
  Eigen::VectorXd cond_var_diag;

  void init(const CovariancePair& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov.within);
    if (llt.info() != Eigen::Success)
      throw calibration_error("outcome covariance is not positive definite");
    chol_marginal = llt.matrixL();
    regress = cov.within.llt().solve(cov.cross.transpose()).transpose();
    Eigen::MatrixXd cond = cov.within - regress * cov.cross.transpose();
    cond = 0.5 * (cond + cond.transpose());
    Eigen::LLT<Eigen::MatrixXd> lltc(cond);
    if (lltc.info() != Eigen::Success)
      throw calibration_error("conditional outcome covariance is not positive definite");
    chol_cond = lltc.matrixL();
    cond_var_diag = cond.diagonal();
  }
};

}  // namespace detail

// Full panel simulation: independent intervention trajectories per region,
// subjects assigned round-robin, visits and outcomes generated alternately
// in time order with features maintained causally. Reproducible given the
// seed; also fills latent oracles when requested.
inline Panel simulate_panel(const DgpConfig& cfg, OracleInfo* oracle = nullptr) {
  cfg.validate();
  const int T = cfg.T;
  const int K = cfg.K;

  CovariancePair cov_y = covariance_map(cfg.target_corr, cfg.sigma_y_diag, cfg.rho_y);
  CovariancePair cov_p = covariance_map(cfg.target_corr, cfg.sigma_p_diag, cfg.rho_p);
  detail::OutcomeSampler samp_y, samp_p;
  samp_y.init(cov_y);
  samp_p.init(cov_p);

  Panel panel;
  panel.grid.horizon = T;
  panel.K = K;

  if (oracle) {
    oracle->pi.resize(cfg.region_count, T);
    oracle->weight.resize(static_cast<Eigen::Index>(cfg.n) * T, 1);
    oracle->h.setConstant(static_cast<Eigen::Index>(cfg.n) * T, K, kMissing);
    oracle->clamp_count = 0;
    oracle->p_draw_count = 0;
  }

  for (int r = 0; r < cfg.region_count; ++r) {
    RngStream rng(cfg.seed, 0x5245ULL * 1000003ULL + static_cast<std::uint64_t>(r));
    RegionSeries rg;
    rg.region_id = "r" + std::to_string(r + 1);
    rg.a = gen_intervention(cfg, rng);
    rg.covariate_names = {"i_lkdn", "d_lkdn"};
    rg.covariates.resize(T, 2);
    for (int t = 1; t <= T; ++t) {
      rg.covariates(t - 1, 0) = lockdown_indicator(t, T);
      rg.covariates(t - 1, 1) = lockdown_duration(t, T);
      if (oracle) oracle->pi(r, t - 1) = propensity_true(cfg, rg.covariates(t - 1, 0), rg.covariates(t - 1, 1));
    }
    panel.regions.push_back(std::move(rg));
  }

  long clamp_count = 0;
  long p_draw_count = 0;

  for (int i = 0; i < cfg.n; ++i) {
    RngStream rng(cfg.seed, 0x5355ULL * 1000003ULL + static_cast<std::uint64_t>(i));
    const int r = i % cfg.region_count;
    const auto& region = panel.regions[r];

    SubjectPanel subj;
    subj.subject_id = "s" + std::to_string(i + 1);
    subj.region_id = region.region_id;
    subj.visit.assign(T, 0);
    subj.outcomes.setConstant(T, K, kMissing);

    // Initial state at t = 0: no lockdown, A_0 = 0, E_Short = 0. The latent
    // chain seeds here and Y+_0 = exp(Z^y_0) is all-positive by construction.
    Eigen::VectorXd mu_y_prev(K), mu_p_prev(K);
    const double m0y_init = baseline_fun_y(0.0, 0.0, 0.0);
    const double m0p_init = baseline_fun_p(0.0, 0.0, 0.0);
    for (int k = 0; k < K; ++k) {
      mu_y_prev(k) = cfg.mu_y0(k) + m0y_init * cfg.beta_y0(k);
      mu_p_prev(k) = cfg.mu_p0(k) + m0p_init * cfg.beta_p0(k);
    }
    Eigen::VectorXd z_y_prev = rng.mvn(mu_y_prev, samp_y.chol_marginal);
    Eigen::VectorXd z_p_prev = rng.mvn(mu_p_prev, samp_p.chol_marginal);
    subj.y0 = z_y_prev.array().exp();

    detail::HistoryState hist;
    hist.init(subj.y0);

    for (int t = 1; t <= T; ++t) {
      const double i_lkdn = region.covariates(t - 1, 0);
      const double d_lkdn = region.covariates(t - 1, 1);
      const int a = region.a[t - 1];
      const double e_short = hist.e_short;

      if (oracle)
        oracle->weight(static_cast<Eigen::Index>(i) * T + (t - 1), 0) = std::exp(
            cfg.intensity_coef(0) * e_short + cfg.intensity_coef(1) * a +
            cfg.intensity_coef(2) * a * d_lkdn);

      const double lambda = hazard_true(cfg, i_lkdn, d_lkdn, e_short, a);
      if (!rng.bernoulli(std::min(lambda, 1.0))) continue;

      subj.visit[t - 1] = 1;

      // Marginal means at this visit; the blip enters only through a_t.
      Eigen::VectorXd mu_y(K), mu_p(K);
      const double m0y = baseline_fun_y(i_lkdn, d_lkdn, e_short);
      const double m0p = baseline_fun_p(i_lkdn, d_lkdn, e_short);
      for (int k = 0; k < K; ++k) {
        mu_y(k) = cfg.mu_y0(k) + m0y * cfg.beta_y0(k) +
                  sim_blip(cfg.psi_y0, k, i_lkdn, d_lkdn, e_short) * a;
        mu_p(k) = cfg.mu_p0(k) + m0p * cfg.beta_p0(k) +
                  sim_blip(cfg.psi_p0, k, i_lkdn, d_lkdn, e_short) * a;
      }

      // Chain from the previous visit regardless of the gap length: the
      // conditional normal uses the cross covariance for any lag.
      Eigen::VectorXd cond_mean_y = mu_y + samp_y.regress * (z_y_prev - mu_y_prev);
      Eigen::VectorXd cond_mean_p = mu_p + samp_p.regress * (z_p_prev - mu_p_prev);
      Eigen::VectorXd z_y = rng.mvn(cond_mean_y, samp_y.chol_cond);
      Eigen::VectorXd z_p = rng.mvn(cond_mean_p, samp_p.chol_cond);

      if (oracle) {
        // Exact conditional mean of Y under a_t = 0 given the latent history:
        // strip the blip from both conditional means and take log-normal
        // moments of the two independent chains.
        const Eigen::Index row = static_cast<Eigen::Index>(i) * T + (t - 1);
        for (int k = 0; k < K; ++k) {
          oracle->h(row, k) = std::exp(cond_mean_p(k) - sim_blip(cfg.psi_p0, k, i_lkdn, d_lkdn, e_short) * a +
                                       0.5 * samp_p.cond_var_diag(k)) *
                              std::exp(cond_mean_y(k) - sim_blip(cfg.psi_y0, k, i_lkdn, d_lkdn, e_short) * a +
                                       0.5 * samp_y.cond_var_diag(k));
        }
      }

      for (int k = 0; k < K; ++k) {
        double p = std::exp(z_p(k));
        ++p_draw_count;
        if (p >= 1.0) {
          p = 1.0 - 1e-12;
          ++clamp_count;
        }
        const bool positive = rng.bernoulli(p);
        subj.outcomes(t - 1, k) = positive ? std::exp(z_y(k)) : 0.0;
      }

      hist.absorb_visit(subj.outcomes.row(t - 1).transpose());
      z_y_prev = z_y;
      z_p_prev = z_p;
      mu_y_prev = mu_y;
      mu_p_prev = mu_p;
    }

    panel.subjects.push_back(std::move(subj));
  }

  if (clamp_count >= 20 &&
      static_cast<double>(clamp_count) / static_cast<double>(p_draw_count) > cfg.max_clamp_fraction)
    throw calibration_error("simulate_panel: " + std::to_string(clamp_count) + " of " +
                            std::to_string(p_draw_count) +
                            " positive-probability draws clamped; settings are miscalibrated");
  if (oracle) {
    oracle->clamp_count = clamp_count;
    oracle->p_draw_count = p_draw_count;
  }
  return panel;
}

}  // namespace snmm
