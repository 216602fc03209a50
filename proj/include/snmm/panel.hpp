#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "snmm/common.hpp"
#include "snmm/csv.hpp"

namespace snmm {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) { return std::isnan(v); }

// Discrete study grid {1,...,T}; t = 0 is reserved for the initial state.
struct TimeGrid {
  int horizon = 0;

  void validate() const {
    if (horizon < 2) throw validation_error("time grid horizon must be >= 2");
  }
};

// Region-level intervention sequence and covariate series. Covariates at
// index t are information available before A_t is assigned.
struct RegionSeries {
  std::string region_id;
  std::vector<int> a;                       // length T, a[t-1] in {0,1}; a_0 = 0 by convention
  std::vector<std::string> covariate_names; // e.g. i_lkdn, d_lkdn, i_hday
  Eigen::MatrixXd covariates;               // T x ncov, row t-1

  double covariate(int t, int col) const { return covariates(t - 1, col); }

  void validate(int T) const {
    if (static_cast<int>(a.size()) != T)
      throw validation_error("region " + region_id + ": intervention length != T");
    for (int v : a)
      if (v != 0 && v != 1)
        throw validation_error("region " + region_id + ": intervention not binary");
    if (covariates.rows() != T || covariates.cols() != static_cast<Eigen::Index>(covariate_names.size()))
      throw validation_error("region " + region_id + ": covariate shape mismatch");
    if (!covariates.allFinite())
      throw validation_error("region " + region_id + ": non-finite covariate");
  }
};

// Per-subject irregular visit/outcome records. Outcome cells are explicit
// missing markers (NaN) wherever visit = 0; zeros are data.
struct SubjectPanel {
  std::string subject_id;
  std::string region_id;
  std::vector<std::string> baseline_names;
  Eigen::VectorXd baseline;
  std::vector<int> visit;      // length T, {0,1}
  Eigen::MatrixXd outcomes;    // T x K, NaN where visit = 0
  Eigen::VectorXd y0;          // K, strictly positive initial outcome at t = 0

  void validate(int T, int K) const {
    if (static_cast<int>(visit.size()) != T)
      throw validation_error("subject " + subject_id + ": visit length != T");
    if (outcomes.rows() != T || outcomes.cols() != K)
      throw validation_error("subject " + subject_id + ": outcome shape mismatch");
    if (y0.size() != K) throw validation_error("subject " + subject_id + ": y0 length != K");
    for (int k = 0; k < K; ++k)
      if (!(y0(k) > 0.0)) throw validation_error("subject " + subject_id + ": y0 must be positive");
    for (int t = 1; t <= T; ++t) {
      int dn = visit[t - 1];
      if (dn != 0 && dn != 1)
        throw validation_error("subject " + subject_id + ": visit indicator not binary");
      for (int k = 0; k < K; ++k) {
        double y = outcomes(t - 1, k);
        if (dn == 1) {
          if (is_missing(y))
            throw validation_error("subject " + subject_id + ": missing outcome at visit t=" +
                                   std::to_string(t));
          if (y < 0.0)
            throw validation_error("subject " + subject_id + ": negative outcome at t=" +
                                   std::to_string(t));
        } else if (!is_missing(y)) {
          throw validation_error("subject " + subject_id + ": outcome present without visit at t=" +
                                 std::to_string(t));
        }
      }
    }
  }
};

struct Panel {
  TimeGrid grid;
  int K = 0;
  std::vector<RegionSeries> regions;
  std::vector<SubjectPanel> subjects;

  int region_index(const std::string& id) const {
    for (std::size_t r = 0; r < regions.size(); ++r)
      if (regions[r].region_id == id) return static_cast<int>(r);
    throw structural_error("unresolved region id: " + id);
  }

  void validate() const {
    grid.validate();
    if (K < 1) throw validation_error("panel must have K >= 1 outcome categories");
    if (regions.empty()) throw validation_error("panel has no regions");
    for (const auto& r : regions) r.validate(grid.horizon);
    for (const auto& s : subjects) {
      region_index(s.region_id);  // throws structural_error if unresolved
      s.validate(grid.horizon, K);
    }
  }
};

// A_t = 1 iff the relative percentage change drops to or below -threshold:
// "exceeds" is read as >= in magnitude, stable across the 40..50 sensitivity grid.
inline std::vector<int> binarize_intervention(const std::vector<double>& relative_change,
                                              double threshold) {
  if (!(threshold > 0.0)) throw validation_error("binarize threshold must be > 0");
  std::vector<int> out(relative_change.size());
  for (std::size_t i = 0; i < relative_change.size(); ++i) {
    double v = relative_change[i];
    if (std::isnan(v)) throw validation_error("NaN relative change at index " + std::to_string(i));
    out[i] = (v <= -threshold) ? 1 : 0;
  }
  return out;
}

// One row per (subject, t) with derived consumer-history features and the
// joined regional columns. Rows are laid out subject-major: row = i*T + (t-1).
struct CovariateFrame {
  int n_subjects = 0;
  int T = 0;
  int K = 0;
  std::vector<std::string> names;
  Eigen::MatrixXd cols;            // (n*T) x names.size()
  std::vector<int> region_of;      // per subject
  std::vector<char> visit;         // per row
  Eigen::MatrixXd y;               // (n*T) x K, NaN at non-visits
  std::unordered_map<std::string, int> index;

  Eigen::Index rows() const { return static_cast<Eigen::Index>(n_subjects) * T; }
  Eigen::Index row(int subject, int t) const {
    return static_cast<Eigen::Index>(subject) * T + (t - 1);
  }

  int column(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw structural_error("missing feature column: " + name);
    return it->second;
  }

  bool has_column(const std::string& name) const { return index.count(name) > 0; }

  double at(Eigen::Index r, int col) const { return cols(r, col); }
};

namespace detail {

// Rolling per-subject history state used both here and by the simulator;
// everything is a function of visits strictly before the current t.
struct HistoryState {
  double e_short = 0.0;            // fraction of zero categories at most recent visit
  double total_sum = 0.0;          // running sum of per-visit total spend (incl. t = 0)
  int visit_count = 0;             // number of visits so far (incl. t = 0)
  Eigen::VectorXd yplus;           // last positive value per category

  void init(const Eigen::VectorXd& y0) {
    e_short = 0.0;                 // y0 is all-positive by invariant
    total_sum = y0.sum();
    visit_count = 1;
    yplus = y0;
  }

  double e_long() const { return std::log(total_sum / visit_count); }

  void absorb_visit(const Eigen::Ref<const Eigen::VectorXd>& y) {
    int zeros = 0;
    for (Eigen::Index k = 0; k < y.size(); ++k) {
      if (y(k) == 0.0)
        ++zeros;
      else
        yplus(k) = y(k);
    }
    e_short = static_cast<double>(zeros) / static_cast<double>(y.size());
    total_sum += y.sum();
    ++visit_count;
  }
};

}  // namespace detail

// Derived covariate construction. E_Short and E_Long use the most recent
// visit strictly before t; both initialize from the t=0 state (y0 positive,
// so E_Short starts at 0 and E_Long at log of y0's total).
inline CovariateFrame build_features(const Panel& panel) {
  panel.validate();
  const int T = panel.grid.horizon;
  const int K = panel.K;
  const int n = static_cast<int>(panel.subjects.size());

  CovariateFrame frame;
  frame.n_subjects = n;
  frame.T = T;
  frame.K = K;

  const auto& region_cov_names = panel.regions.empty() ? std::vector<std::string>{}
                                                       : panel.regions.front().covariate_names;
  for (const auto& rg : panel.regions)
    if (rg.covariate_names != region_cov_names)
      throw validation_error("regions carry inconsistent covariate columns");

  frame.names.push_back("a");
  for (const auto& c : region_cov_names) frame.names.push_back(c);
  frame.names.push_back("e_short");
  frame.names.push_back("e_long");
  for (int k = 1; k <= K; ++k) frame.names.push_back("yplus_" + std::to_string(k));
  for (int k = 1; k <= K; ++k) frame.names.push_back("log_yplus_" + std::to_string(k));
  const auto& baseline_names = panel.subjects.empty() ? std::vector<std::string>{}
                                                      : panel.subjects.front().baseline_names;
  for (const auto& b : baseline_names) frame.names.push_back(b);
  for (std::size_t j = 0; j < frame.names.size(); ++j)
    frame.index[frame.names[j]] = static_cast<int>(j);

  frame.cols.resize(frame.rows(), static_cast<Eigen::Index>(frame.names.size()));
  frame.visit.assign(frame.rows(), 0);
  frame.y.setConstant(frame.rows(), K, kMissing);
  frame.region_of.resize(n);

  const int ncov = static_cast<int>(region_cov_names.size());
  const int col_a = 0;
  const int col_e_short = 1 + ncov;
  const int col_e_long = col_e_short + 1;
  const int col_yplus = col_e_long + 1;
  const int col_log_yplus = col_yplus + K;
  const int col_baseline = col_log_yplus + K;

  for (int i = 0; i < n; ++i) {
    const auto& subj = panel.subjects[i];
    if (subj.baseline_names != baseline_names)
      throw validation_error("subjects carry inconsistent baseline columns");
    const int r = panel.region_index(subj.region_id);
    frame.region_of[i] = r;
    const auto& region = panel.regions[r];

    detail::HistoryState hist;
    hist.init(subj.y0);

    for (int t = 1; t <= T; ++t) {
      const Eigen::Index row = frame.row(i, t);
      frame.cols(row, col_a) = static_cast<double>(region.a[t - 1]);
      for (int c = 0; c < ncov; ++c) frame.cols(row, 1 + c) = region.covariates(t - 1, c);
      frame.cols(row, col_e_short) = hist.e_short;
      frame.cols(row, col_e_long) = hist.e_long();
      for (int k = 0; k < K; ++k) {
        frame.cols(row, col_yplus + k) = hist.yplus(k);
        frame.cols(row, col_log_yplus + k) = std::log(hist.yplus(k));
      }
      for (Eigen::Index b = 0; b < subj.baseline.size(); ++b)
        frame.cols(row, col_baseline + b) = subj.baseline(b);

      if (subj.visit[t - 1] == 1) {
        frame.visit[row] = 1;
        frame.y.row(row) = subj.outcomes.row(t - 1);
        hist.absorb_visit(subj.outcomes.row(t - 1).transpose());
      }
    }
  }
  return frame;
}

// ---------------------------------------------------------------------------
// CSV panel schema: regions.csv (region_id, t, a, <covariates...>) and
// subjects.csv (subject_id, region_id, t, visit, y_1..y_K, y0_1..y0_K,
// <baseline...>); y_k cells are empty when visit = 0.
// ---------------------------------------------------------------------------

inline void write_panel_csv(const Panel& panel, const std::string& regions_path,
                            const std::string& subjects_path) {
  const int T = panel.grid.horizon;
  const int K = panel.K;

  std::string out = "region_id,t,a";
  const auto& cov_names = panel.regions.front().covariate_names;
  for (const auto& c : cov_names) out += "," + c;
  out += "\n";
  for (const auto& rg : panel.regions) {
    for (int t = 1; t <= T; ++t) {
      out += rg.region_id + "," + std::to_string(t) + "," + std::to_string(rg.a[t - 1]);
      for (Eigen::Index c = 0; c < rg.covariates.cols(); ++c)
        out += "," + format_double(rg.covariates(t - 1, c));
      out += "\n";
    }
  }
  write_text_file(regions_path, out);

  std::string s = "subject_id,region_id,t,visit";
  for (int k = 1; k <= K; ++k) s += ",y_" + std::to_string(k);
  for (int k = 1; k <= K; ++k) s += ",y0_" + std::to_string(k);
  const auto& base_names = panel.subjects.empty() ? std::vector<std::string>{}
                                                  : panel.subjects.front().baseline_names;
  for (const auto& b : base_names) s += "," + b;
  s += "\n";
  for (const auto& subj : panel.subjects) {
    for (int t = 1; t <= T; ++t) {
      s += subj.subject_id + "," + subj.region_id + "," + std::to_string(t) + "," +
           std::to_string(subj.visit[t - 1]);
      for (int k = 0; k < K; ++k) {
        s += ",";
        double y = subj.outcomes(t - 1, k);
        if (!is_missing(y)) s += format_double(y);
      }
      for (int k = 0; k < K; ++k) s += "," + format_double(subj.y0(k));
      for (Eigen::Index b = 0; b < subj.baseline.size(); ++b)
        s += "," + format_double(subj.baseline(b));
      s += "\n";
    }
  }
  write_text_file(subjects_path, s);
}

inline Panel read_panel_csv(const std::string& regions_path, const std::string& subjects_path) {
  CsvTable rt = read_csv(regions_path);
  CsvTable st = read_csv(subjects_path);

  Panel panel;

  const int r_id = rt.require_column("region_id", regions_path);
  const int r_t = rt.require_column("t", regions_path);
  const int r_a = rt.require_column("a", regions_path);
  std::vector<int> cov_cols;
  std::vector<std::string> cov_names;
  for (std::size_t j = 0; j < rt.header.size(); ++j) {
    if (static_cast<int>(j) == r_id || static_cast<int>(j) == r_t || static_cast<int>(j) == r_a)
      continue;
    cov_cols.push_back(static_cast<int>(j));
    cov_names.push_back(rt.header[j]);
  }

  int T = 0;
  for (const auto& row : rt.rows)
    T = std::max(T, static_cast<int>(parse_long(row[r_t], regions_path)));
  panel.grid.horizon = T;

  std::unordered_map<std::string, int> region_pos;
  for (const auto& row : rt.rows) {
    const std::string& id = row[r_id];
    if (!region_pos.count(id)) {
      region_pos[id] = static_cast<int>(panel.regions.size());
      RegionSeries rg;
      rg.region_id = id;
      rg.covariate_names = cov_names;
      rg.a.assign(T, -1);
      rg.covariates.setConstant(T, static_cast<Eigen::Index>(cov_names.size()), kMissing);
      panel.regions.push_back(std::move(rg));
    }
    auto& rg = panel.regions[region_pos[id]];
    int t = static_cast<int>(parse_long(row[r_t], regions_path));
    if (t < 1 || t > T) throw validation_error("region row with t out of range in " + regions_path);
    rg.a[t - 1] = static_cast<int>(parse_long(row[r_a], regions_path));
    for (std::size_t c = 0; c < cov_cols.size(); ++c)
      rg.covariates(t - 1, static_cast<Eigen::Index>(c)) = parse_double(row[cov_cols[c]], regions_path);
  }
  for (const auto& rg : panel.regions)
    for (int t = 1; t <= T; ++t)
      if (rg.a[t - 1] < 0)
        throw validation_error("region " + rg.region_id + " missing row for t=" + std::to_string(t));

  const int s_id = st.require_column("subject_id", subjects_path);
  const int s_rid = st.require_column("region_id", subjects_path);
  const int s_t = st.require_column("t", subjects_path);
  const int s_v = st.require_column("visit", subjects_path);
  int K = 0;
  while (st.column("y_" + std::to_string(K + 1)) >= 0) ++K;
  if (K == 0) throw structural_error("subjects.csv has no y_1 column");
  panel.K = K;
  std::vector<int> y_cols(K), y0_cols(K);
  for (int k = 0; k < K; ++k) {
    y_cols[k] = st.require_column("y_" + std::to_string(k + 1), subjects_path);
    y0_cols[k] = st.require_column("y0_" + std::to_string(k + 1), subjects_path);
  }
  std::vector<int> base_cols;
  std::vector<std::string> base_names;
  for (std::size_t j = 0; j < st.header.size(); ++j) {
    const std::string& h = st.header[j];
    if (h == "subject_id" || h == "region_id" || h == "t" || h == "visit") continue;
    bool is_y = false;
    for (int k = 0; k < K; ++k)
      if (static_cast<int>(j) == y_cols[k] || static_cast<int>(j) == y0_cols[k]) is_y = true;
    if (is_y) continue;
    base_cols.push_back(static_cast<int>(j));
    base_names.push_back(h);
  }

  std::unordered_map<std::string, int> subj_pos;
  for (const auto& row : st.rows) {
    const std::string& id = row[s_id];
    if (!subj_pos.count(id)) {
      subj_pos[id] = static_cast<int>(panel.subjects.size());
      SubjectPanel sp;
      sp.subject_id = id;
      sp.region_id = row[s_rid];
      sp.baseline_names = base_names;
      sp.baseline.resize(static_cast<Eigen::Index>(base_cols.size()));
      for (std::size_t b = 0; b < base_cols.size(); ++b)
        sp.baseline(static_cast<Eigen::Index>(b)) = parse_double(row[base_cols[b]], subjects_path);
      sp.visit.assign(T, 0);
      sp.outcomes.setConstant(T, K, kMissing);
      sp.y0.resize(K);
      for (int k = 0; k < K; ++k) sp.y0(k) = parse_double(row[y0_cols[k]], subjects_path);
      panel.subjects.push_back(std::move(sp));
    }
    auto& sp = panel.subjects[subj_pos[id]];
    int t = static_cast<int>(parse_long(row[s_t], subjects_path));
    if (t < 1 || t > T) throw validation_error("subject row with t out of range in " + subjects_path);
    int dn = static_cast<int>(parse_long(row[s_v], subjects_path));
    sp.visit[t - 1] = dn;
    for (int k = 0; k < K; ++k) {
      const std::string& cell = row[y_cols[k]];
      if (dn == 1) {
        sp.outcomes(t - 1, k) = parse_double(cell, subjects_path);
      } else if (!cell.empty()) {
        throw validation_error("outcome cell present without visit in " + subjects_path);
      }
    }
  }

  panel.validate();
  return panel;
}

}  // namespace snmm
