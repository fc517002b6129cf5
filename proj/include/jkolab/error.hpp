#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace jkolab {

enum class ErrorCode {
  invalid_argument,
  grid_mismatch,
  unbalanced,
  instance_too_large,
  nonconvergence,
  kernel_underflow,
  degenerate_map,
  map_not_orientation_preserving,
  degenerate_potential,
  positivity_lost,
  positivity_violated,
  threshold_undefined,
  no_admissible_pairs,
  io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::grid_mismatch: return "grid mismatch";
    case ErrorCode::unbalanced: return "unbalanced";
    case ErrorCode::instance_too_large: return "instance too large";
    case ErrorCode::nonconvergence: return "non-convergence";
    case ErrorCode::kernel_underflow: return "kernel underflow";
    case ErrorCode::degenerate_map: return "degenerate map";
    case ErrorCode::map_not_orientation_preserving: return "map not orientation-preserving";
    case ErrorCode::degenerate_potential: return "degenerate potential";
    case ErrorCode::positivity_lost: return "positivity lost";
    case ErrorCode::positivity_violated: return "positivity (pos) violated";
    case ErrorCode::threshold_undefined: return "threshold undefined";
    case ErrorCode::no_admissible_pairs: return "no admissible pairs";
    case ErrorCode::io: return "i/o error";
  }
  return "unknown error";
}

/// Every failure raised by the library. The message always starts with the
/// canonical name of the code so callers can match on text as well.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail, double residual = std::nan(""))
      : std::runtime_error(compose(code, detail)), code_(code), residual_(residual) {}

  ErrorCode code() const noexcept { return code_; }
  /// Last measured residual for solver failures, NaN otherwise.
  double residual() const noexcept { return residual_; }
  std::optional<int> step() const noexcept { return step_; }

  /// Same error, tagged with the JKO step that raised it.
  Error at_step(int k) const {
    Error e(code_, std::string(what()).substr(to_string(code_).size() + 2) +
                       " (step " + std::to_string(k) + ")",
            residual_);
    e.step_ = k;
    return e;
  }

 private:
  static std::string compose(ErrorCode code, const std::string& detail) {
    std::string s(to_string(code));
    s += ": ";
    s += detail;
    return s;
  }

  ErrorCode code_;
  double residual_;
  std::optional<int> step_;
};

inline void require(bool cond, ErrorCode code, const std::string& detail) {
  if (!cond) throw Error(code, detail);
}

}  // namespace jkolab
