#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

#include "mole/autodiff.hpp"
#include "mole/calendar.hpp"
#include "mole/experts.hpp"
#include "mole/params.hpp"
#include "mole/rng.hpp"

namespace mole::gate {

/// What feeds the head weights: the real first-timestamp embedding
/// (time_in), uniform noise in the embedding's range (random_in), or random
/// simplex weights that bypass the mixing network (random_out).
enum class GatingMode { time_in, random_in, random_out };

/// entry: each (channel, head) weight dropped independently.
/// head: one keep/drop decision per head, shared by the whole batch.
enum class DropoutGranularity { entry, head };

std::string_view to_string(GatingMode mode);
GatingMode parse_gating_mode(std::string_view text);
std::string_view to_string(DropoutGranularity g);
DropoutGranularity parse_dropout_granularity(std::string_view text);

struct GatingConfig {
  GatingMode mode = GatingMode::time_in;
  double head_dropout = 0.0;  // r in [0, 1)
  DropoutGranularity granularity = DropoutGranularity::entry;

  void validate() const;
};

/// Two-layer MLP t → c·n → c·n with ReLU between the layers.
struct MixingSpec {
  std::size_t mark_len = 4;
  std::size_t channels = 1;
  std::size_t heads = 2;

  std::size_t width() const noexcept { return channels * heads; }
};

namespace names {
inline constexpr const char* kFc1Weight = "gate.fc1.weight";
inline constexpr const char* kFc1Bias = "gate.fc1.bias";
inline constexpr const char* kFc2Weight = "gate.fc2.weight";
inline constexpr const char* kFc2Bias = "gate.fc2.bias";
}  // namespace names

/// t·cn + cn + cn² + cn.
std::size_t mixing_param_count(const MixingSpec& spec);
void init_mixing_params(const MixingSpec& spec, ParamStore& store, std::uint64_t seed);

/// channels × heads, each row nonnegative and summing to 1.
struct GateWeights {
  Tensor2 w;

  bool on_simplex(double tol = 1e-6) const;
};

/// marks (B × t) → softmax over heads of reshape(fc2(relu(fc1(marks)))),
/// one row per (sample, channel): (B·c) × n.
ad::Var mixing_weights(ad::Tape& tape, ad::Var marks, ParamStore& store, const MixingSpec& spec);
GateWeights mixing_weights(const data::MarkVector& mark, ParamStore& store, const MixingSpec& spec);

/// Keep-mask (1 kept, 0 dropped) for a rows × heads weight matrix. A row
/// with every head dropped is restored to all ones.
Tensor2 dropout_mask(std::size_t rows, std::size_t heads, double rate, Rng64& rng,
                     DropoutGranularity granularity);

/// Zeroes dropped weights and renormalises each affected row to sum 1.
/// Rows without drops pass through unchanged.
ad::Var apply_dropout_mask(ad::Var weights, const Tensor2& mask);

/// Identity at inference or r = 0; otherwise samples a mask and applies it.
GateWeights head_dropout(const GateWeights& weights, double rate, Rng64& rng, bool training,
                         DropoutGranularity granularity = DropoutGranularity::entry);

/// Σ_i W[:, i] ⊗ Y_i with (a ⊗ B)_jk = a_j·B_jk, before postprocessing.
ad::Var combine(const experts::HeadOutputs& heads, ad::Var weights);
Tensor2 combine(std::span<const Tensor2> heads, const GateWeights& weights);

/// Expert plus (for heads ≥ 2) the mixing layer.
struct MoleSpec {
  experts::ExpertSpec expert;
  std::size_t mark_len = 4;
  GatingConfig gating;

  MixingSpec mixing() const noexcept { return {mark_len, expert.channels, expert.heads}; }
  bool gated() const noexcept { return expert.heads > 1; }
  void validate() const;
};

/// Expert parameters plus the mixing network when heads ≥ 2.
std::size_t model_param_count(const MoleSpec& spec);
void init_model_params(const MoleSpec& spec, ParamStore& store, std::uint64_t seed);

/// Head weights for a batch under the configured gating mode, including
/// head dropout when training. `rng` is required for random_in, random_out
/// and for training with r > 0.
ad::Var gate_weights(ad::Tape& tape, ad::Var marks, ParamStore& store, const MoleSpec& spec,
                     Rng64* rng, bool training);

/// Full forecast Z = P(Σ_i W[:, i] ⊗ H_i(X)) for a batch: x is (B·c) × s,
/// marks is B × t (first input timestamp of each sample). Single-head specs
/// skip gating and return the plain expert forecast.
ad::Var mole_forward(ad::Tape& tape, ad::Var x, ad::Var marks, ParamStore& store,
                     const MoleSpec& spec, Rng64* rng, bool training);

}  // namespace mole::gate
