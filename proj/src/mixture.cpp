#include "mole/mixture.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include <fmt/core.h>

#include "mole/errors.hpp"

namespace mole::gate {

namespace {

std::string lowercase(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return out;
}

Rng64& require_rng(Rng64* rng, const char* why) {
  if (rng == nullptr) throw ConfigError(fmt::format("{} needs a random stream", why));
  return *rng;
}

}  // namespace

std::string_view to_string(GatingMode mode) {
  switch (mode) {
    case GatingMode::time_in: return "TimeIn";
    case GatingMode::random_in: return "RandomIn";
    case GatingMode::random_out: return "RandomOut";
  }
  return "TimeIn";
}

GatingMode parse_gating_mode(std::string_view text) {
  const std::string lower = lowercase(text);
  if (lower == "timein" || lower == "time_in") return GatingMode::time_in;
  if (lower == "randomin" || lower == "random_in") return GatingMode::random_in;
  if (lower == "randomout" || lower == "random_out") return GatingMode::random_out;
  throw ConfigError(
      fmt::format("unknown gating_mode '{}' (expected TimeIn, RandomIn or RandomOut)", text));
}

std::string_view to_string(DropoutGranularity g) {
  return g == DropoutGranularity::entry ? "entry" : "head";
}

DropoutGranularity parse_dropout_granularity(std::string_view text) {
  const std::string lower = lowercase(text);
  if (lower == "entry") return DropoutGranularity::entry;
  if (lower == "head") return DropoutGranularity::head;
  throw ConfigError(fmt::format("unknown dropout_granularity '{}' (expected entry or head)", text));
}

void GatingConfig::validate() const {
  if (!(head_dropout >= 0.0 && head_dropout < 1.0)) {
    throw ConfigError(fmt::format("head_dropout must lie in [0, 1), got {}", head_dropout));
  }
}

std::size_t mixing_param_count(const MixingSpec& spec) {
  const std::size_t w = spec.width();
  return spec.mark_len * w + w + w * w + w;
}

void init_mixing_params(const MixingSpec& spec, ParamStore& store, std::uint64_t seed) {
  if (spec.mark_len == 0 || spec.width() == 0) throw ConfigError("mixing spec: empty dimensions");
  const std::size_t w = spec.width();
  auto add = [&](const char* name, std::size_t fan_in, std::size_t rows, std::size_t cols) {
    Rng64 rng = Rng64::derive(seed, std::string("init/") + name);
    store.add(name, uniform_init(fan_in, rows, cols, rng));
  };
  add(names::kFc1Weight, spec.mark_len, spec.mark_len, w);
  add(names::kFc1Bias, spec.mark_len, 1, w);
  add(names::kFc2Weight, w, w, w);
  add(names::kFc2Bias, w, 1, w);
}

bool GateWeights::on_simplex(double tol) const {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double total = 0.0;
    for (double v : w.row(r)) {
      if (!(v >= 0.0)) return false;
      total += v;
    }
    if (std::abs(total - 1.0) > tol) return false;
  }
  return true;
}

ad::Var mixing_weights(ad::Tape& tape, ad::Var marks, ParamStore& store, const MixingSpec& spec) {
  if (marks.cols() != spec.mark_len) {
    throw ShapeError(fmt::format("mixing net expects {} mark features, got {}", spec.mark_len,
                                 marks.cols()));
  }
  ad::Var hidden = ad::relu(ad::linear(marks, tape.param(store, names::kFc1Weight),
                                       tape.param(store, names::kFc1Bias)));
  ad::Var logits = ad::linear(hidden, tape.param(store, names::kFc2Weight),
                              tape.param(store, names::kFc2Bias));
  // Row b of logits is [ch0 heads | ch1 heads | ...]; one row per channel.
  return ad::softmax_rows(ad::reshape(logits, marks.rows() * spec.channels, spec.heads));
}

GateWeights mixing_weights(const data::MarkVector& mark, ParamStore& store,
                           const MixingSpec& spec) {
  ad::Tape tape;
  ad::Var m = tape.constant(Tensor2(1, mark.features.size(), mark.features));
  return GateWeights{mixing_weights(tape, m, store, spec).value()};
}

Tensor2 dropout_mask(std::size_t rows, std::size_t heads, double rate, Rng64& rng,
                     DropoutGranularity granularity) {
  Tensor2 mask(rows, heads, 1.0);
  if (rate <= 0.0) return mask;
  if (granularity == DropoutGranularity::head) {
    std::vector<double> keep(heads);
    bool any = false;
    for (double& k : keep) {
      k = rng.uniform() < rate ? 0.0 : 1.0;
      any = any || k > 0.0;
    }
    if (!any) return mask;
    for (std::size_t r = 0; r < rows; ++r) std::copy(keep.begin(), keep.end(), mask.row(r).begin());
    return mask;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = mask.row(r);
    bool any = false;
    for (double& k : row) {
      k = rng.uniform() < rate ? 0.0 : 1.0;
      any = any || k > 0.0;
    }
    if (!any) std::fill(row.begin(), row.end(), 1.0);
  }
  return mask;
}

ad::Var apply_dropout_mask(ad::Var weights, const Tensor2& mask) {
  require_same_shape(weights.value(), mask, "apply_dropout_mask");
  ad::Tape& tape = *weights.tape();
  // denominator = row_sum(masked) on rows with drops, exactly 1 elsewhere
  Tensor2 select(mask.rows(), 1, 0.0);
  Tensor2 offset(mask.rows(), 1, 1.0);
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    const auto row = mask.row(r);
    if (std::any_of(row.begin(), row.end(), [](double k) { return k == 0.0; })) {
      select(r, 0) = 1.0;
      offset(r, 0) = 0.0;
    }
  }
  ad::Var masked = ad::mul(weights, tape.constant(mask));
  ad::Var denom = ad::add(ad::mul(ad::row_sum(masked), tape.constant(std::move(select))),
                          tape.constant(std::move(offset)));
  return ad::div(masked, ad::broadcast_cols(denom, mask.cols()));
}

GateWeights head_dropout(const GateWeights& weights, double rate, Rng64& rng, bool training,
                         DropoutGranularity granularity) {
  if (!training || rate <= 0.0) return weights;
  const Tensor2 mask = dropout_mask(weights.w.rows(), weights.w.cols(), rate, rng, granularity);
  ad::Tape tape;
  return GateWeights{apply_dropout_mask(tape.constant(weights.w), mask).value()};
}

ad::Var combine(const experts::HeadOutputs& heads, ad::Var weights) {
  if (weights.cols() != heads.heads || weights.rows() != heads.stacked.rows()) {
    throw ShapeError(fmt::format("combine: weights {} for {} heads of {} rows",
                                 weights.value().shape_string(), heads.heads,
                                 heads.stacked.rows()));
  }
  ad::Var total;
  for (std::size_t i = 0; i < heads.heads; ++i) {
    ad::Var w_i = ad::broadcast_cols(ad::slice_cols(weights, i, 1), heads.pred_len);
    ad::Var term = ad::mul(w_i, heads.head(i));
    total = i == 0 ? term : ad::add(total, term);
  }
  return total;
}

Tensor2 combine(std::span<const Tensor2> heads, const GateWeights& weights) {
  if (heads.empty()) throw ShapeError("combine: no heads");
  const Tensor2& first = heads.front();
  if (weights.w.rows() != first.rows() || weights.w.cols() != heads.size()) {
    throw ShapeError(fmt::format("combine: weights {} for {} heads of {}",
                                 weights.w.shape_string(), heads.size(), first.shape_string()));
  }
  for (const Tensor2& h : heads) require_same_shape(h, first, "combine");
  ad::Tape tape;
  // Stack heads column-wise to reuse the graph path.
  Tensor2 stacked(first.rows(), first.cols() * heads.size());
  for (std::size_t i = 0; i < heads.size(); ++i) {
    for (std::size_t r = 0; r < first.rows(); ++r) {
      std::copy(heads[i].row(r).begin(), heads[i].row(r).end(),
                stacked.row(r).begin() + static_cast<std::ptrdiff_t>(i * first.cols()));
    }
  }
  experts::HeadOutputs ho{tape.constant(std::move(stacked)), heads.size(), first.cols()};
  return combine(ho, tape.constant(weights.w)).value();
}

void MoleSpec::validate() const {
  expert.validate();
  gating.validate();
  if (mark_len == 0) throw ConfigError("mark_len must be >= 1");
}

std::size_t model_param_count(const MoleSpec& spec) {
  std::size_t total = experts::expert_param_count(spec.expert);
  if (spec.gated()) total += mixing_param_count(spec.mixing());
  return total;
}

void init_model_params(const MoleSpec& spec, ParamStore& store, std::uint64_t seed) {
  spec.validate();
  experts::init_expert_params(spec.expert, store, seed);
  if (spec.gated()) init_mixing_params(spec.mixing(), store, seed);
}

ad::Var gate_weights(ad::Tape& tape, ad::Var marks, ParamStore& store, const MoleSpec& spec,
                     Rng64* rng, bool training) {
  const MixingSpec mix = spec.mixing();
  const std::size_t rows = marks.rows() * mix.channels;
  ad::Var w;
  switch (spec.gating.mode) {
    case GatingMode::time_in:
      w = mixing_weights(tape, marks, store, mix);
      break;
    case GatingMode::random_in: {
      Rng64& r = require_rng(rng, "RandomIn gating");
      Tensor2 noise(marks.rows(), marks.cols());
      for (double& v : noise.data()) v = r.uniform(-0.5, 0.5);
      w = mixing_weights(tape, tape.constant(std::move(noise)), store, mix);
      break;
    }
    case GatingMode::random_out: {
      Rng64& r = require_rng(rng, "RandomOut gating");
      Tensor2 raw(rows, mix.heads);
      for (std::size_t i = 0; i < rows; ++i) {
        auto row = raw.row(i);
        double total = 0.0;
        for (double& v : row) {
          v = r.uniform();
          total += v;
        }
        if (total > 0.0) {
          for (double& v : row) v /= total;
        } else {
          std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(mix.heads));
        }
      }
      return tape.constant(std::move(raw));
    }
  }
  if (training && spec.gating.head_dropout > 0.0) {
    Rng64& r = require_rng(rng, "head dropout");
    w = apply_dropout_mask(
        w, dropout_mask(rows, mix.heads, spec.gating.head_dropout, r, spec.gating.granularity));
  }
  return w;
}

ad::Var mole_forward(ad::Tape& tape, ad::Var x, ad::Var marks, ParamStore& store,
                     const MoleSpec& spec, Rng64* rng, bool training) {
  const experts::ExpertOutput out = experts::expert_forward(tape, x, store, spec.expert);
  if (!spec.gated()) return experts::postprocess(out.heads.head(0), out);
  if (marks.rows() * spec.expert.channels != x.rows()) {
    throw ShapeError(fmt::format("mole_forward: {} mark rows for {} input rows", marks.rows(),
                                 x.rows()));
  }
  ad::Var w = gate_weights(tape, marks, store, spec, rng, training);
  return experts::postprocess(combine(out.heads, w), out);
}

}  // namespace mole::gate
