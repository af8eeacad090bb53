#include "mole/grad_check.hpp"

#include <cmath>
#include <string>

#include <fmt/core.h>

#include "mole/errors.hpp"

namespace mole {

namespace {

double evaluate(const LossFn& loss_fn, ParamStore& store, const std::string& name, std::size_t index) {
  ad::Tape tape;
  const ad::Var loss = loss_fn(tape, store);
  const double v = loss.value()[0];
  if (!std::isfinite(v)) {
    throw NumericalError(fmt::format("grad_check: non-finite loss while perturbing '{}[{}]'", name, index));
  }
  return v;
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss_fn, ParamStore& store, double eps) {
  if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
  store.zero_grad();
  {
    ad::Tape tape;
    const ad::Var loss = loss_fn(tape, store);
    if (loss.value().size() != 1) throw ShapeError("grad_check: loss must be 1x1");
    if (!std::isfinite(loss.value()[0])) {
      std::string names;
      for (const auto& [name, param] : store) names += (names.empty() ? "" : ", ") + name;
      throw NumericalError(fmt::format(
          "grad_check: non-finite loss at the evaluation point (parameters: {})", names));
    }
    tape.backward(loss);
  }

  GradCheckReport report;
  for (auto& [name, param] : store) {
    const Tensor2 analytic = param.grad;
    for (std::size_t i = 0; i < param.value.size(); ++i) {
      const double saved = param.value[i];
      double up = 0.0;
      double down = 0.0;
      try {
        param.value[i] = saved + eps;
        up = evaluate(loss_fn, store, name, i);
        param.value[i] = saved - eps;
        down = evaluate(loss_fn, store, name, i);
      } catch (...) {
        param.value[i] = saved;
        store.zero_grad();
        throw;
      }
      param.value[i] = saved;

      const double numeric = (up - down) / (2.0 * eps);
      const double ga = analytic[i];
      const double scale = std::abs(ga) + std::abs(numeric);
      const double rel = std::abs(ga - numeric) / std::max(kGradCheckFloor, scale);
      ++report.entries_checked;
      report.max_abs_error = std::max(report.max_abs_error, std::abs(ga - numeric));
      if (scale < kGradCheckFloor) ++report.entries_below_floor;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = std::max(rel, report.max_rel_error);
        report.worst_param = name;
        report.worst_index = i;
        report.worst_analytic = ga;
        report.worst_numeric = numeric;
      }
    }
  }
  store.zero_grad();
  return report;
}

}  // namespace mole
