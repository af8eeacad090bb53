#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>

#include "mole/autodiff.hpp"
#include "mole/params.hpp"
#include "mole/tensor.hpp"

namespace mole::experts {

enum class ExpertKind { dlinear, rlinear, rmlp };

std::string_view to_string(ExpertKind kind);
/// Accepts "dlinear", "rlinear", "rmlp" (case-insensitive).
ExpertKind parse_expert_kind(std::string_view text);

/// Shape of a linear-centric forecaster with `heads` output blocks. Heads
/// share every layer except the final linear map(s), which are widened from
/// pred_len to heads·pred_len outputs.
struct ExpertSpec {
  ExpertKind kind = ExpertKind::dlinear;
  std::size_t channels = 1;
  std::size_t seq_len = 336;
  std::size_t pred_len = 96;
  std::size_t heads = 1;
  std::size_t mlp_hidden = 512;  // rmlp
  std::size_t ma_kernel = 25;    // dlinear

  void validate() const;
};

// Parameter names. Linear weights are (in × out), biases (1 × out), RevIN
// affine terms (channels × 1).
namespace names {
inline constexpr const char* kLinearWeight = "expert.linear.weight";
inline constexpr const char* kLinearBias = "expert.linear.bias";
inline constexpr const char* kTrendWeight = "expert.trend.weight";
inline constexpr const char* kTrendBias = "expert.trend.bias";
inline constexpr const char* kSeasonalWeight = "expert.seasonal.weight";
inline constexpr const char* kSeasonalBias = "expert.seasonal.bias";
inline constexpr const char* kMlpFc1Weight = "expert.mlp.fc1.weight";
inline constexpr const char* kMlpFc1Bias = "expert.mlp.fc1.bias";
inline constexpr const char* kMlpFc2Weight = "expert.mlp.fc2.weight";
inline constexpr const char* kMlpFc2Bias = "expert.mlp.fc2.bias";
inline constexpr const char* kRevinGamma = "revin.gamma";
inline constexpr const char* kRevinBeta = "revin.beta";
}  // namespace names

/// Closed-form number of scalars owned by the expert (no mixing network).
std::size_t expert_param_count(const ExpertSpec& spec);

/// Adds the expert's parameters to `store`. Linear layers are uniform
/// ±1/√fan_in (weights and biases), each drawn from its own stream
/// derived from (seed, parameter name); RevIN starts at γ = 1, β = 0.
void init_expert_params(const ExpertSpec& spec, ParamStore& store, std::uint64_t seed);

// --- series decomposition -------------------------------------------------

/// Centered moving average along each row with replicate padding of
/// (kernel−1)/2 on both ends. Kernel must be odd.
Tensor2 moving_average(const Tensor2& x, std::size_t kernel);

struct Decomposition {
  Tensor2 seasonal;
  Tensor2 trend;
};

Decomposition decompose(const Tensor2& x, std::size_t kernel);

/// Differentiable moving_average.
ad::Var moving_average(ad::Var x, std::size_t kernel);

// --- reversible instance normalisation -------------------------------------

inline constexpr double kRevinEps = 1e-5;
inline constexpr double kRevinGammaFloor = 1e-8;

/// Per-row statistics captured by normalize, plus the affine terms tiled to
/// one row per (sample, channel). All members are R × 1.
struct RevinState {
  ad::Var mean;
  ad::Var stdev;
  ad::Var gamma;
  ad::Var beta;
};

struct Normalized {
  ad::Var x;
  RevinState state;
};

/// x (R × s, R = batch·channels) → γ⊙(x−μ)/√(σ²+eps) + β with μ, σ² the
/// population moments of each row. `gamma`/`beta` are channels × 1.
Normalized revin_normalize(ad::Var x, ad::Var gamma, ad::Var beta);
/// Exact inverse using the captured μ, σ: (z−β)/γ·σ + μ. |γ| below
/// kRevinGammaFloor is replaced by the floor (and logged).
ad::Var revin_denormalize(ad::Var z, const RevinState& state);

// --- forward passes --------------------------------------------------------

/// Candidate forecasts of all heads, stacked column-wise: head i occupies
/// columns [i·pred_len, (i+1)·pred_len) of `stacked` (R × heads·pred_len).
struct HeadOutputs {
  ad::Var stacked;
  std::size_t heads = 1;
  std::size_t pred_len = 0;

  ad::Var head(std::size_t i) const;
};

/// Heads are emitted before postprocessing; `revin` is set for
/// rlinear/rmlp and consumed by `postprocess` after mixing.
struct ExpertOutput {
  HeadOutputs heads;
  std::optional<RevinState> revin;
};

/// x is (batch·channels) × seq_len with channels fastest.
ExpertOutput dlinear_forward(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec);
ExpertOutput rlinear_forward(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec);
ExpertOutput rmlp_forward(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec);
ExpertOutput expert_forward(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec);

/// Postprocessing layer: RevIN denormalisation for rlinear/rmlp, identity
/// for dlinear.
ad::Var postprocess(ad::Var mixed, const ExpertOutput& out);

/// Complete single-head forecast: postprocess(head 0). Requires heads == 1.
ad::Var expert_predict(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec);

// --- parameter files ------------------------------------------------------

/// Binary layout: "MOLE1", then per entry in name order: u32 name length,
/// UTF-8 name, u32 rows, u32 cols, rows·cols f64. All little-endian.
void save_params(const ParamStore& store, const std::filesystem::path& path);
ParamStore load_params(const std::filesystem::path& path);

}  // namespace mole::experts
