#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace snmm {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: config_error -> 2, structural/validation/positivity -> 3,
// numerical/calibration -> 4.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent configuration (unknown keys, bad shapes).
struct config_error : error {
  using error::error;
};

// A reference that cannot be resolved (missing region, missing feature).
struct structural_error : error {
  using error::error;
};

// Data violating a type invariant (negative outcome, NaN where forbidden).
struct validation_error : error {
  using error::error;
};

// Assumption diagnostics (positivity: intervention has a single level).
struct positivity_error : error {
  using error::error;
};

// Simulation settings that cannot produce a valid generating process
// (non-PSD covariance, excessive probability clamping).
struct calibration_error : error {
  using error::error;
};

// Solver or fitter failure (non-convergence, singular system, overflow).
struct numerical_error : error {
  using error::error;
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

enum class log_level : int { error = 0, warn = 1, info = 2, debug = 3 };

inline log_level& global_log_level() {
  static log_level lvl = [] {
    const char* env = std::getenv("SNMM_LOG");
    if (!env) return log_level::warn;
    std::string s(env);
    if (s == "error") return log_level::error;
    if (s == "warn") return log_level::warn;
    if (s == "info") return log_level::info;
    if (s == "debug") return log_level::debug;
    return log_level::warn;
  }();
  return lvl;
}

inline void log_message(log_level lvl, const std::string& msg) {
  if (static_cast<int>(lvl) > static_cast<int>(global_log_level())) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::fprintf(stderr, "[snmm %s] %s\n", names[static_cast<int>(lvl)], msg.c_str());
}

inline void log_warn(const std::string& msg) { log_message(log_level::warn, msg); }
inline void log_info(const std::string& msg) { log_message(log_level::info, msg); }
inline void log_debug(const std::string& msg) { log_message(log_level::debug, msg); }

}  // namespace snmm
