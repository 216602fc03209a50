#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "snmm/common.hpp"
#include "snmm/nuisance.hpp"
#include "snmm/panel.hpp"
#include "snmm/rng.hpp"

namespace snmm {

enum class EstimatorKind { pi_gamma, h_only, pi_gamma_h };

inline std::string kind_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::pi_gamma: return "pg";
    case EstimatorKind::h_only: return "h";
    case EstimatorKind::pi_gamma_h: return "pgh";
  }
  return "?";
}

inline EstimatorKind kind_from_name(const std::string& s) {
  if (s == "pg") return EstimatorKind::pi_gamma;
  if (s == "h") return EstimatorKind::h_only;
  if (s == "pgh") return EstimatorKind::pi_gamma_h;
  throw config_error("unknown estimator kind: '" + s + "' (expected pg|h|pgh)");
}

// Linear-in-psi causal basis. The blip for category k is
//   m_a(L; psi_k) = sum_j psi[k*J + j] * cat_j(L) + sum_s psi[K*J + s] * shared_s(L),
// so m_a(.; 0) = 0 holds by construction and the stacked derivative matrix
// C(L) = dm_a/dpsi (column k = basis of category k) is the default c(L).
struct CausalSpec {
  int K = 0;
  std::vector<std::string> category_terms;  // per-category block, e.g. {"1", "d_lkdn"}
  std::vector<std::string> shared_terms;    // common modifiers, e.g. {"i_lkdn", "e_short"}

  int dim() const {
    return K * static_cast<int>(category_terms.size()) + static_cast<int>(shared_terms.size());
  }

  // Parameter label in the psi_kj / psi_(s) naming scheme.
  std::string component_name(int j) const {
    const int J = static_cast<int>(category_terms.size());
    if (j < K * J)
      return "psi_" + std::to_string(j / J + 1) + std::to_string(j % J);
    return "psi_(" + std::to_string(j - K * J + 1) + ")";
  }

  std::string component_term(int j) const {
    const int J = static_cast<int>(category_terms.size());
    if (j < K * J) return category_terms[j % J];
    return shared_terms[j - K * J];
  }
};

namespace detail {

// Column plans resolved once per frame.
struct CausalPlan {
  int K = 0;
  int J = 0;  // category terms
  int S = 0;  // shared terms
  std::vector<std::vector<int>> cat_cols;
  std::vector<std::vector<int>> shared_cols;

  static CausalPlan resolve(const CausalSpec& spec, const CovariateFrame& frame) {
    if (spec.K != frame.K)
      throw validation_error("causal spec K does not match the panel's category count");
    CausalPlan plan;
    plan.K = spec.K;
    plan.J = static_cast<int>(spec.category_terms.size());
    plan.S = static_cast<int>(spec.shared_terms.size());
    for (const auto& t : spec.category_terms) plan.cat_cols.push_back(resolve_product(frame, t));
    for (const auto& t : spec.shared_terms) plan.shared_cols.push_back(resolve_product(frame, t));
    return plan;
  }

  int dim() const { return K * J + S; }

  void values(const CovariateFrame& frame, Eigen::Index row, Eigen::VectorXd& cat_vals,
              Eigen::VectorXd& shared_vals) const {
    for (int j = 0; j < J; ++j) cat_vals(j) = product_value(frame, row, cat_cols[j]);
    for (int s = 0; s < S; ++s) shared_vals(s) = product_value(frame, row, shared_cols[s]);
  }

  // Dense basis vector b_k for category k given precomputed term values.
  void basis(int k, const Eigen::VectorXd& cat_vals, const Eigen::VectorXd& shared_vals,
             Eigen::VectorXd& b) const {
    b.setZero();
    b.segment(k * J, J) = cat_vals;
    b.tail(S) = shared_vals;
  }

  double blip(int k, const Eigen::VectorXd& psi, const Eigen::VectorXd& cat_vals,
              const Eigen::VectorXd& shared_vals) const {
    return psi.segment(k * J, J).dot(cat_vals) + psi.tail(S).dot(shared_vals);
  }
};

}  // namespace detail

// Counterfactual transform: H_k = y_k exp(-m_a(L; psi_k) a); at the true
// parameter this mimics the treatment-free outcome given (L, A_t).
inline Eigen::VectorXd transform_H(const Eigen::VectorXd& y, const CovariateFrame& frame,
                                   Eigen::Index row, double a, const Eigen::VectorXd& psi,
                                   const CausalSpec& spec) {
  auto plan = detail::CausalPlan::resolve(spec, frame);
  Eigen::VectorXd cat_vals(plan.J), shared_vals(plan.S);
  plan.values(frame, row, cat_vals, shared_vals);
  Eigen::VectorXd h(spec.K);
  for (int k = 0; k < spec.K; ++k) {
    double expo = -plan.blip(k, psi, cat_vals, shared_vals) * a;
    if (std::abs(expo) > 700.0) throw numerical_error("transform_H: exponent overflow");
    h(k) = y(k) * std::exp(expo);
  }
  return h;
}

// Per-row nuisance predictions consumed by the estimating function: the
// intensity weight exp(m_v' gamma), the propensity, and the conditional mean
// outcome (needed at visit rows only).
struct NuisancePredictions {
  Eigen::VectorXd weight;
  Eigen::VectorXd pi;
  Eigen::MatrixXd h;

  void require(EstimatorKind kind, Eigen::Index rows, int K) const {
    if (weight.size() != rows) throw structural_error("nuisance predictions: missing weights");
    if (kind != EstimatorKind::h_only && pi.size() != rows)
      throw structural_error("nuisance predictions: missing propensity");
    if (kind != EstimatorKind::pi_gamma && (h.rows() != rows || h.cols() != K))
      throw structural_error("nuisance predictions: missing conditional outcome mean");
  }
};

namespace detail {

// One pass over visit rows accumulating any of: the normalized estimating
// equation, its Jacobian, and the unnormalized sandwich pieces A (summed
// Jacobian) and per-cluster score sums.
struct PsiAccumulator {
  Eigen::VectorXd psi_sum;               // sum of Psi_{i,t} * dN
  Eigen::MatrixXd jac_sum;               // sum of dPsi_{i,t}/dpsi * dN
  std::vector<Eigen::VectorXd> clusters; // per-cluster score sums
};

enum class ClusterMode { time, region_time };

inline void accumulate_psi(const CovariateFrame& frame, const NuisancePredictions& preds,
                           const Eigen::VectorXd& psi, EstimatorKind kind, const CausalPlan& plan,
                           bool want_jacobian, bool want_clusters, ClusterMode cluster_mode,
                           PsiAccumulator& acc) {
  const int p = plan.dim();
  const int K = plan.K;
  const int J = plan.J;
  const int S = plan.S;
  const int a_col = frame.column("a");
  const int n_regions =
      frame.region_of.empty() ? 1 : 1 + *std::max_element(frame.region_of.begin(), frame.region_of.end());

  acc.psi_sum.setZero(p);
  if (want_jacobian) acc.jac_sum.setZero(p, p);
  if (want_clusters) {
    std::size_t n_clusters = cluster_mode == ClusterMode::time
                                 ? static_cast<std::size_t>(frame.T)
                                 : static_cast<std::size_t>(frame.T) * n_regions;
    acc.clusters.assign(n_clusters, Eigen::VectorXd::Zero(p));
  }

  Eigen::VectorXd cat_vals(J), shared_vals(S);
  Eigen::VectorXd contrib(p);
  Eigen::VectorXd b(p);

  for (int i = 0; i < frame.n_subjects; ++i) {
    for (int t = 1; t <= frame.T; ++t) {
      const Eigen::Index row = frame.row(i, t);
      if (!frame.visit[row]) continue;

      const double a = frame.at(row, a_col);
      const double w_den = preds.weight(row);
      if (!(w_den > 0.0)) throw numerical_error("nonpositive intensity weight");
      const double w =
          (kind == EstimatorKind::h_only ? a : a - preds.pi(row)) / w_den;

      plan.values(frame, row, cat_vals, shared_vals);

      contrib.setZero();
      for (int k = 0; k < K; ++k) {
        const double y = frame.y(row, k);
        if (is_missing(y)) throw validation_error("missing outcome at a visit row");
        const double expo = -plan.blip(k, psi, cat_vals, shared_vals) * a;
        if (std::abs(expo) > 700.0) throw numerical_error("transform_H: exponent overflow");
        const double Hk = y * std::exp(expo);
        const double rk =
            kind == EstimatorKind::pi_gamma ? Hk : Hk - preds.h(row, k);
        const double f = rk * w;
        contrib.segment(k * J, J) += f * cat_vals;
        contrib.tail(S) += f * shared_vals;

        if (want_jacobian && a != 0.0) {
          plan.basis(k, cat_vals, shared_vals, b);
          acc.jac_sum.selfadjointView<Eigen::Lower>().rankUpdate(b, -a * w * Hk);
        }
      }
      acc.psi_sum += contrib;
      if (want_clusters) {
        std::size_t c = cluster_mode == ClusterMode::time
                            ? static_cast<std::size_t>(t - 1)
                            : static_cast<std::size_t>(frame.region_of[i]) * frame.T + (t - 1);
        acc.clusters[c] += contrib;
      }
    }
  }
  if (want_jacobian)
    acc.jac_sum = Eigen::MatrixXd(acc.jac_sum.selfadjointView<Eigen::Lower>());
}

}  // namespace detail

// Normalized estimating function (1/(nT)) sum_i sum_t Psi_{i,t} dN_{i,t};
// only visit rows contribute.
inline Eigen::VectorXd psi_equation(const CovariateFrame& frame, const NuisancePredictions& preds,
                                    const Eigen::VectorXd& psi, const CausalSpec& spec,
                                    EstimatorKind kind) {
  auto plan = detail::CausalPlan::resolve(spec, frame);
  preds.require(kind, frame.rows(), frame.K);
  detail::PsiAccumulator acc;
  detail::accumulate_psi(frame, preds, psi, kind, plan, false, false,
                         detail::ClusterMode::time, acc);
  return acc.psi_sum / static_cast<double>(frame.rows());
}

// Analytic derivative of psi_equation with respect to psi; matches central
// finite differences to relative error 1e-6.
inline Eigen::MatrixXd psi_jacobian(const CovariateFrame& frame, const NuisancePredictions& preds,
                                    const Eigen::VectorXd& psi, const CausalSpec& spec,
                                    EstimatorKind kind) {
  auto plan = detail::CausalPlan::resolve(spec, frame);
  preds.require(kind, frame.rows(), frame.K);
  detail::PsiAccumulator acc;
  detail::accumulate_psi(frame, preds, psi, kind, plan, true, false,
                         detail::ClusterMode::time, acc);
  return acc.jac_sum / static_cast<double>(frame.rows());
}

struct SolverTrace {
  int iterations = 0;
  double final_residual = 0.0;
  bool restarted = false;
};

struct GEstimate {
  EstimatorKind kind = EstimatorKind::pi_gamma_h;
  Eigen::VectorXd psi;
  Eigen::MatrixXd sigma1;      // (nT)^{-1} sum dPsi dN at psi_hat
  Eigen::MatrixXd sigma2;      // (nT)^{-1} sum_t (sum_i Psi dN)^{x2}
  Eigen::MatrixXd covariance;  // A^{-1} B A^{-T}, symmetrized
  Eigen::VectorXd se;
  SolverTrace trace;
};

// Damped Newton root finder on the estimating equation: full step, halved
// until the residual norm decreases, convergence at ||Psi|| < 1e-8. On
// failure one restart is attempted from a perturbed start before erroring.
inline Eigen::VectorXd solve_psi_root(const CovariateFrame& frame,
                                      const NuisancePredictions& preds, const CausalSpec& spec,
                                      EstimatorKind kind, const Eigen::VectorXd& psi_init,
                                      SolverTrace* trace) {
  auto plan = detail::CausalPlan::resolve(spec, frame);
  preds.require(kind, frame.rows(), frame.K);
  const double nT = static_cast<double>(frame.rows());

  auto attempt = [&](const Eigen::VectorXd& start, SolverTrace& tr) -> std::optional<Eigen::VectorXd> {
    Eigen::VectorXd psi = start;
    detail::PsiAccumulator acc;
    detail::accumulate_psi(frame, preds, psi, kind, plan, true, false,
                           detail::ClusterMode::time, acc);
    Eigen::VectorXd f = acc.psi_sum / nT;
    double fnorm = f.norm();
    for (int iter = 1; iter <= 100; ++iter) {
      tr.iterations = iter;
      if (fnorm < 1e-8) {
        tr.final_residual = fnorm;
        return psi;
      }
      Eigen::MatrixXd jac = acc.jac_sum / nT;
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(jac, Eigen::ComputeThinU | Eigen::ComputeThinV);
      const double smax = svd.singularValues()(0);
      const double smin = svd.singularValues()(svd.singularValues().size() - 1);
      if (!(smin > 0.0) || smax / smin > 1e12) {
        tr.final_residual = fnorm;
        return std::nullopt;  // singular Jacobian
      }
      Eigen::VectorXd step = svd.solve(-f);
      double scale = 1.0;
      bool improved = false;
      for (int h = 0; h <= 30; ++h) {
        Eigen::VectorXd trial = psi + scale * step;
        detail::PsiAccumulator acc_t;
        bool finite = true;
        try {
          detail::accumulate_psi(frame, preds, trial, kind, plan, true, false,
                                 detail::ClusterMode::time, acc_t);
        } catch (const numerical_error&) {
          finite = false;  // overflowing trial: treat as a rejected step
        }
        if (finite) {
          Eigen::VectorXd f_t = acc_t.psi_sum / nT;
          if (f_t.allFinite() && f_t.norm() < fnorm) {
            psi = trial;
            acc = std::move(acc_t);
            f = f_t;
            fnorm = f.norm();
            improved = true;
            break;
          }
        }
        scale *= 0.5;
      }
      if (!improved) {
        tr.final_residual = fnorm;
        return std::nullopt;
      }
    }
    tr.final_residual = fnorm;
    return fnorm < 1e-8 ? std::optional<Eigen::VectorXd>(psi) : std::nullopt;
  };

  SolverTrace tr;
  auto sol = attempt(psi_init, tr);
  if (!sol) {
    tr.restarted = true;
    RngStream rng(0x736f6c7665ULL, 1);  // fixed restart stream keeps runs reproducible
    Eigen::VectorXd jitter(psi_init.size());
    for (Eigen::Index j = 0; j < jitter.size(); ++j) jitter(j) = 0.2 * rng.uniform() - 0.1;
    sol = attempt(psi_init + jitter, tr);
  }
  if (trace) *trace = tr;
  if (!sol)
    throw numerical_error("solve_psi: no convergence (residual " +
                          std::to_string(tr.final_residual) + ")");
  return *sol;
}

// Theorem-style cluster sandwich, computed in the normalization-free form
// cov = A^{-1} B A^{-T} with A the summed Jacobian and B the sum of squared
// per-cluster score sums; the (nT) factors of the displayed Sigma_1/Sigma_2
// cancel in this composition. Default clusters are time points pooled over
// subjects and regions; (region x time) is available for comparison.
inline void sandwich(const CovariateFrame& frame, const NuisancePredictions& preds,
                     const CausalSpec& spec, EstimatorKind kind, const Eigen::VectorXd& psi_hat,
                     GEstimate& out, bool cluster_region_time = false) {
  auto plan = detail::CausalPlan::resolve(spec, frame);
  preds.require(kind, frame.rows(), frame.K);
  detail::PsiAccumulator acc;
  detail::accumulate_psi(frame, preds, psi_hat, kind, plan, true, true,
                         cluster_region_time ? detail::ClusterMode::region_time
                                             : detail::ClusterMode::time,
                         acc);

  const int p = plan.dim();
  const double nT = static_cast<double>(frame.rows());
  Eigen::MatrixXd A = acc.jac_sum;
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(p, p);
  for (const auto& s : acc.clusters) B.selfadjointView<Eigen::Lower>().rankUpdate(s, 1.0);
  B = Eigen::MatrixXd(B.selfadjointView<Eigen::Lower>());

  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  if (!lu.isInvertible()) throw numerical_error("sandwich: singular bread matrix");
  Eigen::MatrixXd Ainv = lu.inverse();
  Eigen::MatrixXd cov = Ainv * B * Ainv.transpose();
  cov = 0.5 * (cov + cov.transpose());

  out.sigma1 = A / nT;
  out.sigma2 = B / nT;
  out.covariance = cov;
  out.se.resize(p);
  for (int j = 0; j < p; ++j) out.se(j) = std::sqrt(std::max(cov(j, j), 0.0));
}

inline GEstimate solve_psi(const CovariateFrame& frame, const NuisancePredictions& preds,
                           const CausalSpec& spec, EstimatorKind kind,
                           const Eigen::VectorXd& psi_init, bool cluster_region_time = false) {
  GEstimate est;
  est.kind = kind;
  est.psi = solve_psi_root(frame, preds, spec, kind, psi_init, &est.trace);
  sandwich(frame, preds, spec, kind, est.psi, est, cluster_region_time);
  return est;
}

inline GEstimate solve_psi(const CovariateFrame& frame, const NuisancePredictions& preds,
                           const CausalSpec& spec, EstimatorKind kind) {
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(spec.dim());
  return solve_psi(frame, preds, spec, kind, zero);
}

// ---------------------------------------------------------------------------
// Pipeline: the four estimation steps in order (fit gamma, pi, h; predict;
// plug in; solve). Estimator kinds skip the nuisances they do not use.
// ---------------------------------------------------------------------------

struct PipelineSpec {
  CausalSpec causal;
  std::vector<TermSpec> intensity_terms;
  std::vector<TermSpec> propensity_terms;
  std::vector<TermSpec> outcome_terms;
  OutcomeMode outcome_mode = OutcomeMode::two_part;
  EstimatorKind kind = EstimatorKind::pi_gamma_h;
  bool cluster_region_time = false;
};

struct PipelineResult {
  GEstimate estimate;
  IntensityModel intensity;
  std::optional<PropensityModel> propensity;
  std::optional<OutcomeModel> outcome;
  NuisancePredictions predictions;
};

inline void check_positivity(const Panel& panel) {
  int first = panel.regions.front().a.front();
  for (const auto& rg : panel.regions)
    for (int v : rg.a)
      if (v != first) return;
  throw positivity_error("intervention is constant across all regions and times (positivity)");
}

inline PipelineResult fit_pipeline(const Panel& panel, const CovariateFrame& frame,
                                   const PipelineSpec& spec) {
  check_positivity(panel);
  PipelineResult res;

  auto wrap = [](const char* step, auto&& fn) {
    try {
      return fn();
    } catch (const error&) {
      throw;
    } catch (const std::exception& e) {
      throw numerical_error(std::string("pipeline step '") + step + "' failed: " + e.what());
    }
  };

  res.intensity = wrap("intensity", [&] { return fit_cox(frame, spec.intensity_terms); });
  res.predictions.weight = res.intensity.predict_weights(frame);

  if (spec.kind != EstimatorKind::h_only) {
    CovariateFrame rframe = region_frame(panel);
    res.propensity = wrap("propensity", [&] { return fit_propensity(rframe, spec.propensity_terms); });
    // map region-level predictions onto subject rows
    std::vector<Eigen::Index> rrows(rframe.rows());
    for (Eigen::Index r = 0; r < rframe.rows(); ++r) rrows[static_cast<std::size_t>(r)] = r;
    Eigen::VectorXd rpi = res.propensity->predict_rows(rframe, rrows);
    res.predictions.pi.resize(frame.rows());
    for (int i = 0; i < frame.n_subjects; ++i)
      for (int t = 1; t <= frame.T; ++t)
        res.predictions.pi(frame.row(i, t)) = rpi(rframe.row(frame.region_of[i], t));
  }

  if (spec.kind != EstimatorKind::pi_gamma) {
    res.outcome = wrap("outcome", [&] { return fit_outcome(frame, spec.outcome_terms, spec.outcome_mode); });
    std::vector<Eigen::Index> vrows;
    for (Eigen::Index r = 0; r < frame.rows(); ++r)
      if (frame.visit[r]) vrows.push_back(r);
    Eigen::MatrixXd hv = res.outcome->predict_rows(frame, vrows);
    res.predictions.h.setConstant(frame.rows(), frame.K, kMissing);
    for (std::size_t i = 0; i < vrows.size(); ++i)
      res.predictions.h.row(vrows[i]) = hv.row(static_cast<Eigen::Index>(i));
  }

  res.estimate = wrap("solve", [&] {
    return solve_psi(frame, res.predictions, spec.causal, spec.kind,
                     Eigen::VectorXd::Zero(spec.causal.dim()), spec.cluster_region_time);
  });
  return res;
}

inline PipelineResult fit_pipeline(const Panel& panel, const PipelineSpec& spec) {
  CovariateFrame frame = build_features(panel);
  return fit_pipeline(panel, frame, spec);
}

// Two-sided normal p-value and the conventional significance stars.
inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

inline std::string p_value_stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  if (p < 0.1) return ".";
  return "";
}

// Human-readable estimate table: category-specific block then the shared
// modifiers, each with SE, p-value, and stars.
inline std::string format_estimate_table(const GEstimate& est, const CausalSpec& spec) {
  const int J = static_cast<int>(spec.category_terms.size());
  char buf[160];
  std::string out;
  out += "Causal parameter estimates (" + kind_name(est.kind) + ")\n";
  out += "----------------------------------------------------------------\n";
  out += "Category-specific intervention effects\n";
  for (int k = 0; k < spec.K; ++k) {
    for (int j = 0; j < J; ++j) {
      int idx = k * J + j;
      double z = est.se(idx) > 0.0 ? est.psi(idx) / est.se(idx) : 0.0;
      double p = normal_two_sided_p(z);
      std::snprintf(buf, sizeof(buf), "  cat %d  %-12s % .4f (%.4f)  p=%.4g %s\n", k + 1,
                    spec.category_terms[j].c_str(), est.psi(idx), est.se(idx), p,
                    p_value_stars(p).c_str());
      out += buf;
    }
  }
  if (!spec.shared_terms.empty()) {
    out += "Modifiers shared by all categories\n";
    for (std::size_t s = 0; s < spec.shared_terms.size(); ++s) {
      int idx = spec.K * J + static_cast<int>(s);
      double z = est.se(idx) > 0.0 ? est.psi(idx) / est.se(idx) : 0.0;
      double p = normal_two_sided_p(z);
      std::snprintf(buf, sizeof(buf), "  %-18s % .4f (%.4f)  p=%.4g %s\n",
                    spec.shared_terms[s].c_str(), est.psi(idx), est.se(idx), p,
                    p_value_stars(p).c_str());
      out += buf;
    }
  }
  return out;
}

}  // namespace snmm
