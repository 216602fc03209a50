#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "snmm/common.hpp"
#include "snmm/panel.hpp"
#include "snmm/spline.hpp"

namespace snmm {

// A model term over frame columns: either a product of columns entering
// linearly ("a", "a*d_lkdn") or a single column expanded in a penalized
// cubic B-spline basis.
struct TermSpec {
  std::string expr;
  bool smooth = false;

  static TermSpec linear(std::string e) { return {std::move(e), false}; }
  static TermSpec spline(std::string e) { return {std::move(e), true}; }
};

inline std::vector<std::string> split_product(const std::string& expr) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : expr) {
    if (c == '*') {
      parts.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  if (parts.empty() || parts.front().empty())
    throw config_error("empty term expression: '" + expr + "'");
  return parts;
}

struct FitDiagnostics {
  bool converged = false;
  int iterations = 0;
  double final_gradient_norm = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

inline double product_value(const CovariateFrame& frame, Eigen::Index row,
                            const std::vector<int>& cols) {
  double v = 1.0;
  for (int c : cols) v *= frame.at(row, c);
  return v;
}

inline std::vector<int> resolve_product(const CovariateFrame& frame, const std::string& expr) {
  std::vector<int> cols;
  for (const auto& name : split_product(expr)) {
    if (name == "1") continue;  // constant factor
    cols.push_back(frame.column(name));
  }
  return cols;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Visit-intensity model: discrete-time Cox partial likelihood with Breslow
// handling of ties. Every subject is at risk at every t (recurrent events,
// no censoring), so the risk set is the full cross-section. The baseline
// intensity is intentionally unestimated; it cancels in the estimating
// function.
// ---------------------------------------------------------------------------

struct IntensityModel {
  std::vector<TermSpec> terms;
  Eigen::VectorXd gamma;
  FitDiagnostics diag;

  // exp(m_v' gamma) for one frame row.
  double predict_weight(const CovariateFrame& frame, Eigen::Index row) const {
    double lp = 0.0;
    for (std::size_t j = 0; j < terms.size(); ++j)
      lp += gamma(static_cast<Eigen::Index>(j)) *
            detail::product_value(frame, row, detail::resolve_product(frame, terms[j].expr));
    if (lp > 700.0)
      throw numerical_error("intensity linear predictor overflow (m_v'gamma > 700)");
    return std::exp(lp);
  }

  // Bulk variant with terms resolved once.
  Eigen::VectorXd predict_weights(const CovariateFrame& frame) const {
    std::vector<std::vector<int>> plans;
    plans.reserve(terms.size());
    for (const auto& t : terms) plans.push_back(detail::resolve_product(frame, t.expr));
    Eigen::VectorXd out(frame.rows());
    for (Eigen::Index r = 0; r < frame.rows(); ++r) {
      double lp = 0.0;
      for (std::size_t j = 0; j < plans.size(); ++j)
        lp += gamma(static_cast<Eigen::Index>(j)) * detail::product_value(frame, r, plans[j]);
      if (lp > 700.0)
        throw numerical_error("intensity linear predictor overflow (m_v'gamma > 700)");
      out(r) = std::exp(lp);
    }
    return out;
  }
};

namespace detail {

// Shared state for the Breslow partial likelihood over the full-cross-section
// risk sets.
struct CoxWork {
  Eigen::MatrixXd X;  // subject-major rows
  const CovariateFrame* frame = nullptr;
  int n = 0, T = 0, p = 0;

  CoxWork(const CovariateFrame& f, const std::vector<TermSpec>& terms)
      : frame(&f), n(f.n_subjects), T(f.T), p(static_cast<int>(terms.size())) {
    std::vector<std::vector<int>> plans;
    for (const auto& t : terms) plans.push_back(resolve_product(f, t.expr));
    X.resize(f.rows(), p);
    for (Eigen::Index r = 0; r < f.rows(); ++r)
      for (int j = 0; j < p; ++j) X(r, j) = product_value(f, r, plans[j]);
  }

  double loglik(const Eigen::VectorXd& g, Eigen::VectorXd* grad, Eigen::MatrixXd* hess) const {
    double ll = 0.0;
    if (grad) grad->setZero(p);
    if (hess) hess->setZero(p, p);
    Eigen::VectorXd eta = X * g;
    Eigen::VectorXd s1(p);
    Eigen::MatrixXd s2(p, p);
    for (int t = 0; t < T; ++t) {
      double s0 = 0.0;
      s1.setZero();
      if (hess) s2.setZero();
      int d = 0;
      for (int i = 0; i < n; ++i) {
        const Eigen::Index r = static_cast<Eigen::Index>(i) * T + t;
        double e = std::exp(eta(r));
        s0 += e;
        s1 += e * X.row(r).transpose();
        if (hess) s2.selfadjointView<Eigen::Lower>().rankUpdate(X.row(r).transpose(), e);
        if (frame->visit[r]) {
          ++d;
          ll += eta(r);
          if (grad) *grad += X.row(r).transpose();
        }
      }
      if (d > 0) {
        ll -= d * std::log(s0);
        Eigen::VectorXd mean = s1 / s0;
        if (grad) *grad -= d * mean;
        if (hess) {
          Eigen::MatrixXd s2full = Eigen::MatrixXd(s2.selfadjointView<Eigen::Lower>());
          *hess -= d * (s2full / s0 - mean * mean.transpose());
        }
      }
    }
    return ll;
  }
};

}  // namespace detail

// Breslow partial log-likelihood with optional score and Hessian; exposed
// for diagnostics and oracle checks.
inline double cox_partial_loglik(const CovariateFrame& frame, const std::vector<TermSpec>& terms,
                                 const Eigen::VectorXd& gamma, Eigen::VectorXd* grad = nullptr,
                                 Eigen::MatrixXd* hess = nullptr) {
  detail::CoxWork work(frame, terms);
  return work.loglik(gamma, grad, hess);
}

inline IntensityModel fit_cox(const CovariateFrame& frame, const std::vector<TermSpec>& terms) {
  IntensityModel model;
  model.terms = terms;
  const int p = static_cast<int>(terms.size());

  long events = 0;
  for (Eigen::Index r = 0; r < frame.rows(); ++r) events += frame.visit[r];
  if (events == 0) throw validation_error("fit_cox: no events in the data");

  if (p == 0) {  // degenerate fit: weight identically one
    model.gamma.resize(0);
    model.diag.converged = true;
    return model;
  }

  detail::CoxWork work(frame, terms);
  Eigen::VectorXd gamma = Eigen::VectorXd::Zero(p);
  bool ridged = false;

  auto loglik_parts = [&](const Eigen::VectorXd& g, Eigen::VectorXd* grad, Eigen::MatrixXd* hess) {
    return work.loglik(g, grad, hess);
  };

  Eigen::VectorXd grad(p), grad_trial(p);
  Eigen::MatrixXd hess(p, p), hess_trial(p, p);
  loglik_parts(gamma, &grad, &hess);
  int iter = 0;
  for (; iter < 100; ++iter) {
    if (grad.norm() < 1e-8) break;
    Eigen::MatrixXd neg_h = -hess;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(neg_h);
    Eigen::VectorXd step = ldlt.solve(grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) {
      neg_h.diagonal().array() += 1e-8;  // collinear features: ridge fallback
      step = neg_h.ldlt().solve(grad);
      if (!ridged) {
        model.diag.warnings.push_back("collinear intensity features; ridge fallback 1e-8");
        log_warn("fit_cox: collinear features, applying ridge 1e-8");
        ridged = true;
      }
      if (!step.allFinite()) throw numerical_error("fit_cox: singular information matrix");
    }
    // Step halving on the score norm: near the optimum likelihood gains sink
    // below double resolution, the score does not.
    double scale = 1.0;
    bool accepted = false;
    for (int h = 0; h < 40; ++h) {
      Eigen::VectorXd trial = gamma + scale * step;
      loglik_parts(trial, &grad_trial, &hess_trial);
      if (grad_trial.allFinite() && grad_trial.norm() < grad.norm()) {
        gamma = trial;
        grad = grad_trial;
        hess = hess_trial;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) break;
  }

  model.diag.iterations = iter;
  model.diag.final_gradient_norm = grad.norm();
  model.diag.converged = grad.norm() < 1e-8;
  if (!model.diag.converged)
    throw numerical_error("fit_cox: no convergence after " + std::to_string(iter) +
                          " iterations (gradient norm " + std::to_string(grad.norm()) + ")");
  model.gamma = gamma;
  return model;
}

// ---------------------------------------------------------------------------
// Penalized additive designs shared by the propensity and outcome fitters:
// intercept + linear product terms + centered B-spline blocks, each smooth
// carrying a second-difference penalty. A single smoothing weight multiplies
// the (scale-normalized) block penalties and is selected by GCV over a fixed
// log-spaced grid, so refits on identical data are identical.
// ---------------------------------------------------------------------------

namespace detail {

struct SmoothBlock {
  std::string col;
  BsplineBasis basis;
  Eigen::RowVectorXd center;
  int offset = 0;
};

struct AdditiveDesign {
  std::vector<TermSpec> terms;
  std::vector<std::string> linear_exprs;
  std::vector<SmoothBlock> smooths;
  int ncol = 0;
  Eigen::MatrixXd penalty;  // ncol x ncol, normalized per block

  bool has_smooths() const { return !smooths.empty(); }

  void build(const CovariateFrame& frame, const std::vector<Eigen::Index>& rows,
             Eigen::MatrixXd* X_out) {
    linear_exprs.clear();
    smooths.clear();
    for (const auto& t : terms) {
      if (t.smooth) {
        if (split_product(t.expr).size() != 1)
          throw config_error("smooth terms must reference a single column: " + t.expr);
      } else {
        linear_exprs.push_back(t.expr);
      }
    }

    int col = 1 + static_cast<int>(linear_exprs.size());
    for (const auto& t : terms) {
      if (!t.smooth) continue;
      SmoothBlock blk;
      blk.col = t.expr;
      Eigen::VectorXd x(rows.size());
      int ci = frame.column(t.expr);
      for (std::size_t i = 0; i < rows.size(); ++i) x(static_cast<Eigen::Index>(i)) = frame.at(rows[i], ci);
      blk.basis = BsplineBasis::from_quantiles(x, 10);
      blk.offset = col;
      col += blk.basis.size();
      smooths.push_back(std::move(blk));
    }
    ncol = col;

    Eigen::MatrixXd X(rows.size(), ncol);
    X.col(0).setOnes();
    for (std::size_t j = 0; j < linear_exprs.size(); ++j) {
      auto plan = resolve_product(frame, linear_exprs[j]);
      for (std::size_t i = 0; i < rows.size(); ++i)
        X(static_cast<Eigen::Index>(i), 1 + static_cast<Eigen::Index>(j)) =
            product_value(frame, rows[i], plan);
    }
    penalty = Eigen::MatrixXd::Zero(ncol, ncol);
    for (auto& blk : smooths) {
      int ci = frame.column(blk.col);
      const int m = blk.basis.size();
      for (std::size_t i = 0; i < rows.size(); ++i)
        X.block(static_cast<Eigen::Index>(i), blk.offset, 1, m) =
            blk.basis.eval(frame.at(rows[i], ci)).transpose();
      blk.center = X.block(0, blk.offset, X.rows(), m).colwise().mean();
      X.block(0, blk.offset, X.rows(), m).rowwise() -= blk.center;
      Eigen::MatrixXd pen = blk.basis.penalty();
      double xs = X.block(0, blk.offset, X.rows(), m).squaredNorm();
      double ps = pen.trace();
      if (ps > 0.0) pen *= xs / ps;  // commensurate blocks under one lambda
      penalty.block(blk.offset, blk.offset, m, m) = pen;
    }
    *X_out = X;
  }

  Eigen::RowVectorXd eval_row(const CovariateFrame& frame, Eigen::Index row) const {
    Eigen::RowVectorXd x(ncol);
    x(0) = 1.0;
    for (std::size_t j = 0; j < linear_exprs.size(); ++j)
      x(1 + static_cast<Eigen::Index>(j)) =
          product_value(frame, row, resolve_product(frame, linear_exprs[j]));
    for (const auto& blk : smooths) {
      int ci = frame.column(blk.col);
      x.segment(blk.offset, blk.basis.size()) =
          blk.basis.eval(frame.at(row, ci)).transpose() - blk.center;
    }
    return x;
  }

  Eigen::MatrixXd eval_rows(const CovariateFrame& frame, const std::vector<Eigen::Index>& rows) const {
    Eigen::MatrixXd X(rows.size(), ncol);
    X.col(0).setOnes();
    for (std::size_t j = 0; j < linear_exprs.size(); ++j) {
      auto plan = resolve_product(frame, linear_exprs[j]);
      for (std::size_t i = 0; i < rows.size(); ++i)
        X(static_cast<Eigen::Index>(i), 1 + static_cast<Eigen::Index>(j)) =
            product_value(frame, rows[i], plan);
    }
    for (const auto& blk : smooths) {
      int ci = frame.column(blk.col);
      for (std::size_t i = 0; i < rows.size(); ++i)
        X.block(static_cast<Eigen::Index>(i), blk.offset, 1, blk.basis.size()) =
            blk.basis.eval(frame.at(rows[i], ci)).transpose() - blk.center;
    }
    return X;
  }
};

inline Eigen::VectorXd gcv_grid() {
  Eigen::VectorXd grid(20);
  for (int i = 0; i < 20; ++i) grid(i) = std::pow(10.0, -6.0 + 12.0 * i / 19.0);
  return grid;
}

struct PenalizedGaussianFit {
  Eigen::VectorXd beta;
  double lambda = 0.0;
  double edf = 0.0;
  double sigma2 = 0.0;
  double gcv = 0.0;
};

inline PenalizedGaussianFit penalized_least_squares(const Eigen::MatrixXd& X,
                                                    const Eigen::VectorXd& y,
                                                    const Eigen::MatrixXd& penalty,
                                                    bool search_lambda) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  Eigen::MatrixXd xtx = X.transpose() * X;
  Eigen::VectorXd xty = X.transpose() * y;
  const double ridge = 1e-8 * (xtx.trace() / static_cast<double>(p) + 1.0);
  const double yty = y.squaredNorm();

  auto fit_at = [&](double lambda) {
    PenalizedGaussianFit f;
    f.lambda = lambda;
    Eigen::MatrixXd m = xtx + lambda * penalty;
    m.diagonal().array() += ridge;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
    f.beta = ldlt.solve(xty);
    double rss = yty - 2.0 * f.beta.dot(xty) + f.beta.dot(xtx * f.beta);
    rss = std::max(rss, 0.0);
    f.edf = ldlt.solve(xtx).trace();
    double denom = std::max(static_cast<double>(n) - f.edf, 1.0);
    f.gcv = static_cast<double>(n) * rss / (denom * denom);
    f.sigma2 = rss / denom;
    return f;
  };

  if (!search_lambda) return fit_at(0.0);
  Eigen::VectorXd grid = gcv_grid();
  PenalizedGaussianFit best = fit_at(grid(0));
  for (int i = 1; i < grid.size(); ++i) {
    PenalizedGaussianFit f = fit_at(grid(i));
    if (f.gcv < best.gcv) best = f;
  }
  return best;
}

struct PenalizedLogisticFit {
  Eigen::VectorXd beta;
  double lambda = 0.0;
  double edf = 0.0;
  double gcv = 0.0;
  bool converged = false;
  bool separation_warning = false;
};

inline PenalizedLogisticFit penalized_logistic_at(const Eigen::MatrixXd& X,
                                                  const Eigen::VectorXd& y,
                                                  const Eigen::MatrixXd& penalty, double lambda,
                                                  const Eigen::VectorXd& beta_start) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  const double ridge = 1e-8;

  PenalizedLogisticFit f;
  f.lambda = lambda;
  Eigen::VectorXd beta = beta_start;
  Eigen::VectorXd eta = X * beta;
  Eigen::MatrixXd xtwx(p, p);
  for (int iter = 0; iter < 100; ++iter) {
    Eigen::VectorXd mu = eta.unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
    Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
    w = w.cwiseMax(1e-10);
    Eigen::VectorXd z = eta + (y - mu).cwiseQuotient(w);
    Eigen::MatrixXd xw = X.array().colwise() * w.array();
    xtwx = X.transpose() * xw;
    Eigen::MatrixXd m = xtwx + lambda * penalty;
    m.diagonal().array() += ridge * (xtwx.trace() / static_cast<double>(p) + 1.0);
    Eigen::VectorXd beta_new = m.ldlt().solve(X.transpose() * (w.asDiagonal() * z));
    if (!beta_new.allFinite()) break;
    double delta = (beta_new - beta).norm();
    beta = beta_new;
    eta = X * beta;
    if (delta < 1e-9 * (1.0 + beta.norm())) {
      f.converged = true;
      break;
    }
  }
  f.beta = beta;

  Eigen::VectorXd mu = eta.unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
  mu = mu.cwiseMax(1e-12).cwiseMin(1.0 - 1e-12);
  double dev = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    dev -= 2.0 * (y(i) * std::log(mu(i)) + (1.0 - y(i)) * std::log(1.0 - mu(i)));
  {  // refresh the information at the final coefficients for the edf
    Eigen::VectorXd w = (mu.array() * (1.0 - mu.array())).cwiseMax(1e-10);
    Eigen::MatrixXd xw = X.array().colwise() * w.array();
    xtwx = X.transpose() * xw;
  }
  Eigen::MatrixXd m = xtwx + lambda * penalty;
  m.diagonal().array() += ridge * (xtwx.trace() / static_cast<double>(p) + 1.0);
  f.edf = m.ldlt().solve(xtwx).trace();
  double denom = std::max(static_cast<double>(n) - f.edf, 1.0);
  f.gcv = static_cast<double>(n) * dev / (denom * denom);

  long extreme = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (std::abs(eta(i)) > 30.0) ++extreme;
  f.separation_warning = extreme > 0.05 * static_cast<double>(n);
  return f;
}

inline PenalizedLogisticFit penalized_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                               const Eigen::MatrixXd& penalty, bool search_lambda,
                                               FitDiagnostics* diag) {
  Eigen::VectorXd start = Eigen::VectorXd::Zero(X.cols());
  if (!search_lambda) {
    PenalizedLogisticFit f = penalized_logistic_at(X, y, penalty, 0.0, start);
    if (f.separation_warning && diag)
      diag->warnings.push_back("possible separation in logistic fit");
    return f;
  }
  Eigen::VectorXd grid = gcv_grid();
  std::vector<PenalizedLogisticFit> fits;
  fits.reserve(grid.size());
  for (int i = 0; i < grid.size(); ++i) {
    // warm start along the grid keeps the IRLS path short
    fits.push_back(penalized_logistic_at(X, y, penalty, grid(i),
                                         fits.empty() ? start : fits.back().beta));
  }
  int best = 0;
  for (int i = 1; i < static_cast<int>(fits.size()); ++i)
    if (fits[i].gcv < fits[best].gcv) best = i;
  if (fits[best].separation_warning) {
    // retry with heavier penalties until the linear predictor is tame
    if (diag) diag->warnings.push_back("separation detected; retrying with heavier penalty");
    log_warn("penalized_logistic: separation detected, moving to a heavier penalty");
    int fixed = best;
    for (int i = best + 1; i < static_cast<int>(fits.size()); ++i)
      if (!fits[i].separation_warning) {
        fixed = i;
        break;
      }
    if (fixed == best) fixed = static_cast<int>(fits.size()) - 1;
    best = fixed;
  }
  return fits[best];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Propensity model: additive logistic regression on region-level rows, all
// smoothing choices fixed and data-driven quantities deterministic. Fitted
// probabilities are clipped to [1e-6, 1 - 1e-6].
// ---------------------------------------------------------------------------

struct PropensityModel {
  detail::AdditiveDesign design;
  Eigen::VectorXd beta;
  double lambda = 0.0;
  double edf = 0.0;
  FitDiagnostics diag;
  mutable long clip_count = 0;

  static constexpr double kClip = 1e-6;

  double predict(const CovariateFrame& frame, Eigen::Index row) const {
    double eta = design.eval_row(frame, row).dot(beta);
    double mu = logistic(eta);
    if (mu < kClip || mu > 1.0 - kClip) {
      ++clip_count;
      mu = std::min(std::max(mu, kClip), 1.0 - kClip);
    }
    return mu;
  }

  Eigen::VectorXd predict_rows(const CovariateFrame& frame,
                               const std::vector<Eigen::Index>& rows) const {
    Eigen::MatrixXd X = design.eval_rows(frame, rows);
    Eigen::VectorXd eta = X * beta;
    Eigen::VectorXd out(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      double mu = logistic(eta(i));
      if (mu < kClip || mu > 1.0 - kClip) {
        ++clip_count;
        mu = std::min(std::max(mu, kClip), 1.0 - kClip);
      }
      out(i) = mu;
    }
    return out;
  }
};

// Region-level rows (one per region x t) carrying the intervention and the
// regional covariates only; this is the natural propensity design since
// A_t depends on regional history alone.
inline CovariateFrame region_frame(const Panel& panel) {
  panel.validate();
  const int T = panel.grid.horizon;
  CovariateFrame frame;
  frame.n_subjects = static_cast<int>(panel.regions.size());
  frame.T = T;
  frame.K = 0;
  frame.names.push_back("a");
  for (const auto& c : panel.regions.front().covariate_names) frame.names.push_back(c);
  for (std::size_t j = 0; j < frame.names.size(); ++j)
    frame.index[frame.names[j]] = static_cast<int>(j);
  frame.cols.resize(frame.rows(), static_cast<Eigen::Index>(frame.names.size()));
  frame.visit.assign(frame.rows(), 1);
  frame.y.resize(frame.rows(), 0);
  frame.region_of.resize(frame.n_subjects);
  for (int r = 0; r < frame.n_subjects; ++r) {
    frame.region_of[r] = r;
    const auto& rg = panel.regions[r];
    for (int t = 1; t <= T; ++t) {
      const Eigen::Index row = frame.row(r, t);
      frame.cols(row, 0) = static_cast<double>(rg.a[t - 1]);
      for (Eigen::Index c = 0; c < rg.covariates.cols(); ++c)
        frame.cols(row, 1 + c) = rg.covariates(t - 1, c);
    }
  }
  return frame;
}

inline PropensityModel fit_propensity(const CovariateFrame& region_rows,
                                      const std::vector<TermSpec>& terms) {
  PropensityModel model;
  model.design.terms = terms;

  std::vector<Eigen::Index> rows(region_rows.rows());
  for (Eigen::Index r = 0; r < region_rows.rows(); ++r) rows[static_cast<std::size_t>(r)] = r;

  const int a_col = region_rows.column("a");
  Eigen::VectorXd y(region_rows.rows());
  for (Eigen::Index r = 0; r < region_rows.rows(); ++r) y(r) = region_rows.at(r, a_col);
  const double mean_a = y.mean();
  if (!(mean_a > 0.0) || !(mean_a < 1.0))
    throw positivity_error("fit_propensity: intervention has a single level");

  Eigen::MatrixXd X;
  model.design.build(region_rows, rows, &X);
  auto fit = detail::penalized_logistic(X, y, model.design.penalty, model.design.has_smooths(),
                                        &model.diag);
  model.beta = fit.beta;
  model.lambda = fit.lambda;
  model.edf = fit.edf;
  model.diag.converged = fit.converged;
  return model;
}

// ---------------------------------------------------------------------------
// Conditional mean outcome: per-category additive regressions fit on visit
// rows with A_t = 0 only. Direct mode regresses Y_k with predictions floored
// at zero; two-part mode multiplies an additive-logistic positive-probability
// fit by a log-normal back-transformed positive-mean fit.
// ---------------------------------------------------------------------------

enum class OutcomeMode { direct, two_part };

struct OutcomeModel {
  OutcomeMode mode = OutcomeMode::direct;
  std::vector<TermSpec> terms;
  int K = 0;

  struct CategoryFit {
    bool all_zero = false;
    bool two_part = false;
    Eigen::VectorXd beta_mean;      // direct: E(Y); two-part: E(log Y | Y>0)
    Eigen::VectorXd beta_prob;      // two-part only
    double log_sigma2 = 0.0;        // two-part residual variance on the log scale
    double lambda_mean = 0.0;
    double lambda_prob = 0.0;
  };
  detail::AdditiveDesign design;
  std::vector<CategoryFit> fits;
  FitDiagnostics diag;

  Eigen::VectorXd predict(const CovariateFrame& frame, Eigen::Index row) const {
    Eigen::RowVectorXd x = design.eval_row(frame, row);
    return predict_from_design(x);
  }

  Eigen::MatrixXd predict_rows(const CovariateFrame& frame,
                               const std::vector<Eigen::Index>& rows) const {
    Eigen::MatrixXd X = design.eval_rows(frame, rows);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), K);
    for (Eigen::Index i = 0; i < X.rows(); ++i) out.row(i) = predict_from_design(X.row(i)).transpose();
    return out;
  }

 private:
  Eigen::VectorXd predict_from_design(const Eigen::RowVectorXd& x) const {
    Eigen::VectorXd out(K);
    for (int k = 0; k < K; ++k) {
      const auto& f = fits[k];
      if (f.all_zero) {
        out(k) = 0.0;
        continue;
      }
      if (f.two_part) {
        double p = logistic(x.dot(f.beta_prob));
        double m = x.dot(f.beta_mean);
        out(k) = p * std::exp(m + 0.5 * f.log_sigma2);
      } else {
        out(k) = std::max(x.dot(f.beta_mean), 0.0);
      }
    }
    return out;
  }
};

inline OutcomeModel fit_outcome(const CovariateFrame& frame, const std::vector<TermSpec>& terms,
                                OutcomeMode mode) {
  OutcomeModel model;
  model.mode = mode;
  model.terms = terms;
  model.K = frame.K;

  const int a_col = frame.column("a");
  std::vector<Eigen::Index> rows;
  for (Eigen::Index r = 0; r < frame.rows(); ++r)
    if (frame.visit[r] && frame.at(r, a_col) == 0.0) rows.push_back(r);

  if (static_cast<long>(rows.size()) < 50)
    throw validation_error("fit_outcome: needs at least 50 visit rows with A_t = 0, have " +
                           std::to_string(rows.size()));

  model.design.terms = terms;
  Eigen::MatrixXd X;
  model.design.build(frame, rows, &X);
  const bool search = model.design.has_smooths();

  for (int k = 0; k < frame.K; ++k) {
    OutcomeModel::CategoryFit fit;
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) y(static_cast<Eigen::Index>(i)) = frame.y(rows[i], k);

    long positive = (y.array() > 0.0).count();
    if (positive == 0) {
      fit.all_zero = true;
      model.diag.warnings.push_back("category " + std::to_string(k + 1) +
                                    " is all-zero on A=0 visits; predicting 0");
      log_warn("fit_outcome: all-zero category " + std::to_string(k + 1));
      model.fits.push_back(std::move(fit));
      continue;
    }

    const long min_positive = std::max<long>(20, model.design.ncol + 5);
    if (mode == OutcomeMode::two_part && positive >= min_positive &&
        positive < static_cast<long>(rows.size())) {
      fit.two_part = true;
      Eigen::VectorXd pos = (y.array() > 0.0).cast<double>();
      auto prob = detail::penalized_logistic(X, pos, model.design.penalty, search, &model.diag);
      fit.beta_prob = prob.beta;
      fit.lambda_prob = prob.lambda;

      std::vector<Eigen::Index> pos_idx;
      for (Eigen::Index i = 0; i < y.size(); ++i)
        if (y(i) > 0.0) pos_idx.push_back(i);
      Eigen::MatrixXd Xp(static_cast<Eigen::Index>(pos_idx.size()), X.cols());
      Eigen::VectorXd logy(static_cast<Eigen::Index>(pos_idx.size()));
      for (std::size_t i = 0; i < pos_idx.size(); ++i) {
        Xp.row(static_cast<Eigen::Index>(i)) = X.row(pos_idx[i]);
        logy(static_cast<Eigen::Index>(i)) = std::log(y(pos_idx[i]));
      }
      auto mean = detail::penalized_least_squares(Xp, logy, model.design.penalty, search);
      fit.beta_mean = mean.beta;
      fit.lambda_mean = mean.lambda;
      fit.log_sigma2 = mean.sigma2;
    } else {
      if (mode == OutcomeMode::two_part && positive == static_cast<long>(rows.size())) {
        // no zeros: the two-part decomposition degenerates to the log-linear part
        fit.two_part = true;
        fit.beta_prob = Eigen::VectorXd::Zero(X.cols());
        fit.beta_prob(0) = 30.0;  // probability pinned at ~1
        Eigen::VectorXd logy = y.array().log();
        auto mean = detail::penalized_least_squares(X, logy, model.design.penalty, search);
        fit.beta_mean = mean.beta;
        fit.lambda_mean = mean.lambda;
        fit.log_sigma2 = mean.sigma2;
      } else {
        if (mode == OutcomeMode::two_part)
          model.diag.warnings.push_back("category " + std::to_string(k + 1) +
                                        ": too few positive rows for two-part; using direct fit");
        auto mean = detail::penalized_least_squares(X, y, model.design.penalty, search);
        fit.beta_mean = mean.beta;
        fit.lambda_mean = mean.lambda;
      }
    }
    model.fits.push_back(std::move(fit));
  }
  model.diag.converged = true;
  return model;
}

}  // namespace snmm
