#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "snmm/common.hpp"

namespace snmm {

// Cubic B-spline basis with interior knots at (deduplicated) data quantiles
// and a second-difference coefficient penalty. The penalty null space keeps
// constants and near-linear trends unpenalized, the usual P-spline setup.
class BsplineBasis {
 public:
  static constexpr int kDegree = 3;

  // Place up to `n_interior` interior knots at quantiles of x; duplicates
  // collapse (heavily tied covariates get fewer knots).
  static BsplineBasis from_quantiles(const Eigen::VectorXd& x, int n_interior = 10) {
    BsplineBasis b;
    if (x.size() < 2) throw validation_error("spline basis needs at least 2 observations");
    std::vector<double> sorted(x.data(), x.data() + x.size());
    std::sort(sorted.begin(), sorted.end());
    b.lo_ = sorted.front();
    b.hi_ = sorted.back();
    if (!(b.hi_ > b.lo_)) throw validation_error("spline covariate is constant");

    std::vector<double> interior;
    for (int i = 1; i <= n_interior; ++i) {
      double q = static_cast<double>(i) / (n_interior + 1);
      double pos = q * (sorted.size() - 1);
      std::size_t lo = static_cast<std::size_t>(std::floor(pos));
      std::size_t hi = std::min(lo + 1, sorted.size() - 1);
      double frac = pos - static_cast<double>(lo);
      double v = (1.0 - frac) * sorted[lo] + frac * sorted[hi];
      if (v <= b.lo_ || v >= b.hi_) continue;
      if (!interior.empty() && v - interior.back() < 1e-12 * (b.hi_ - b.lo_)) continue;
      interior.push_back(v);
    }

    b.knots_.assign(kDegree + 1, b.lo_);
    b.knots_.insert(b.knots_.end(), interior.begin(), interior.end());
    b.knots_.insert(b.knots_.end(), kDegree + 1, b.hi_);
    return b;
  }

  int size() const { return static_cast<int>(knots_.size()) - kDegree - 1; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  const std::vector<double>& knots() const { return knots_; }

  // Basis row at x; values outside the training range are clamped.
  Eigen::VectorXd eval(double x) const {
    const int m = size();
    Eigen::VectorXd out = Eigen::VectorXd::Zero(m);
    double xc = std::min(std::max(x, lo_), hi_);

    // Find knot span j with knots[j] <= xc < knots[j+1].
    int j = kDegree;
    int last = static_cast<int>(knots_.size()) - kDegree - 2;
    while (j < last && xc >= knots_[j + 1]) ++j;

    // Cox-de Boor on the local nonzero window.
    double N[kDegree + 1];
    N[0] = 1.0;
    for (int d = 1; d <= kDegree; ++d) {
      double saved = 0.0;
      for (int r = 0; r < d; ++r) {
        double left = knots_[j - d + 1 + r];
        double right = knots_[j + 1 + r];
        double denom = right - left;
        double term = denom > 0.0 ? N[r] / denom : 0.0;
        N[r] = saved + (right - xc) * term;
        saved = (xc - left) * term;
      }
      N[d] = saved;
    }
    for (int r = 0; r <= kDegree; ++r) {
      int idx = j - kDegree + r;
      if (idx >= 0 && idx < m) out(idx) = N[r];
    }
    return out;
  }

  Eigen::MatrixXd eval_matrix(const Eigen::VectorXd& x) const {
    Eigen::MatrixXd out(x.size(), size());
    for (Eigen::Index i = 0; i < x.size(); ++i) out.row(i) = eval(x(i)).transpose();
    return out;
  }

  // P = D2' D2 with D2 the (m-2) x m second-difference operator.
  Eigen::MatrixXd penalty() const {
    const int m = size();
    if (m < 3) return Eigen::MatrixXd::Zero(m, m);
    Eigen::MatrixXd d2 = Eigen::MatrixXd::Zero(m - 2, m);
    for (int i = 0; i < m - 2; ++i) {
      d2(i, i) = 1.0;
      d2(i, i + 1) = -2.0;
      d2(i, i + 2) = 1.0;
    }
    return d2.transpose() * d2;
  }

 private:
  std::vector<double> knots_;
  double lo_ = 0.0, hi_ = 1.0;
};

}  // namespace snmm
