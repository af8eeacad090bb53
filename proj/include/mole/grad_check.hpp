#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "mole/autodiff.hpp"
#include "mole/params.hpp"

namespace mole {

/// Builds a scalar loss on `tape` from the parameters in `store`.
using LossFn = std::function<ad::Var(ad::Tape& tape, ParamStore& store)>;

/// Denominator floor of the relative error. Central differences in float64
/// carry roughly eps_machine·|loss|/eps of noise (≈2e-11 at eps = 1e-5), so
/// smaller gradients are compared in absolute terms against this floor.
inline constexpr double kGradCheckFloor = 1e-6;

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries_below_floor = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Compares reverse-mode gradients with central differences
/// (f(θ+eps) − f(θ−eps)) / (2·eps) for every scalar in `store`. The relative
/// error of one entry is |g_ad − g_fd| / max(kGradCheckFloor, |g_ad| + |g_fd|).
/// Parameter values are restored and gradients zeroed on return.
GradCheckReport grad_check(const LossFn& loss_fn, ParamStore& store, double eps = 1e-5);

}  // namespace mole
