#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mole/experts.hpp"
#include "mole/mixture.hpp"
#include "mole/train.hpp"

namespace mole::run {

/// One experiment. JSON field names match the member names; unknown fields
/// are rejected.
struct ExperimentConfig {
  std::string dataset = "toy";  // CSV path or "toy"
  std::string family = "auto";  // auto | ett | other
  experts::ExpertKind model = experts::ExpertKind::dlinear;
  std::size_t seq_len = 336;
  std::size_t pred_len = 96;
  std::size_t n_heads = 1;
  double lr0 = 0.005;
  double head_dropout = 0.0;
  gate::GatingMode gating_mode = gate::GatingMode::time_in;
  gate::DropoutGranularity dropout_granularity = gate::DropoutGranularity::entry;
  std::uint64_t seed = 2021;
  std::size_t batch_size = 8;
  std::size_t epochs_max = 20;
  std::size_t patience = 3;
  train::LrSchedule lr_schedule = train::LrSchedule::halving;
  std::size_t mlp_hidden = 512;
  std::size_t ma_kernel = 25;
  std::size_t toy_hours = 2 * 365 * 24;
  double toy_sigma = 0.1;
  std::uint64_t toy_seed = 2021;

  static ExperimentConfig from_json(const nlohmann::json& doc);
  /// Gating fields are left out when n_heads == 1.
  nlohmann::json to_json() const;
  void validate() const;

  /// "toy" or the file stem of the dataset path.
  std::string dataset_name() const;
  data::SplitFamily split_family() const;
  train::TrainConfig train_config() const;
  /// Display name, e.g. "DLinear" or "MoLE-DLinear".
  std::string model_name() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

/// Loads or generates the series, splits it, fits the scaler on the train
/// targets and standardises every channel.
struct PreparedData {
  train::DataBundle bundle;
  data::ChannelScaler scaler;
};

PreparedData prepare_data(const ExperimentConfig& config);

gate::MoleSpec model_spec(const ExperimentConfig& config, const data::RawDataset& data);

struct TrainedModel {
  gate::MoleSpec spec;
  ParamStore store;
  train::FitReport report;
};

/// init (seeded) + fit. Deterministic for a fixed (config, data).
TrainedModel run_experiment(const ExperimentConfig& config, const train::DataBundle& bundle);

// --- commands --------------------------------------------------------------

/// Writes report.json and model.bin into `out_dir`.
train::FitReport cmd_train(const ExperimentConfig& config, const std::filesystem::path& out_dir);

struct EvalReport {
  train::EvalResult val;
  train::EvalResult test;
  nlohmann::json to_json() const;
};

/// Re-evaluates a saved model on the val and test splits.
EvalReport cmd_eval(const ExperimentConfig& config, const std::filesystem::path& model_path);

/// Cartesian grid over hyperparameter axes. Values are applied on top of the
/// base config in the order lr0, n_heads, head_dropout, batch_size,
/// gating_mode (the last axis varies fastest).
struct GridAxes {
  std::vector<double> lr0;
  std::vector<std::size_t> n_heads;
  std::vector<double> head_dropout;
  std::vector<std::size_t> batch_size;
  std::vector<gate::GatingMode> gating_mode;

  /// lr0 {0.005, 0.01, 0.05}, n {2..6}, r {0, 0.2}.
  static GridAxes paper_defaults();
  static GridAxes from_json(const nlohmann::json& doc);
  std::vector<ExperimentConfig> expand(const ExperimentConfig& base) const;
};

struct GridCell {
  ExperimentConfig config;
  train::FitReport report;
};

struct GridResult {
  std::uint64_t seed = 0;
  std::vector<GridCell> cells;
  std::size_t selected = 0;

  const GridCell& best() const { return cells.at(selected); }
  nlohmann::json to_json() const;
};

/// Index of the minimum validation MSE; the first one wins ties.
std::size_t select_min_val(const std::vector<GridCell>& cells);

/// Runs every config for every seed on up to `jobs` threads. Results keep
/// config order. A failing cell aborts with its config in the message.
std::vector<GridResult> run_grid(const std::vector<ExperimentConfig>& configs,
                                 const std::vector<std::uint64_t>& seeds, std::size_t jobs);

inline constexpr const char* kSummaryHeader =
    "seed,model,dataset,pred_len,n_heads,lr0,dropout,gating,val_mse,test_mse";

/// One row per seed plus a final `mean` row.
std::string summary_csv(const std::vector<GridResult>& results);

/// Writes grid_seed<seed>.json per seed and summary.csv.
std::vector<GridResult> cmd_grid(const ExperimentConfig& base, const GridAxes& axes,
                                 const std::vector<std::uint64_t>& seeds, std::size_t jobs,
                                 const std::filesystem::path& out_dir);

struct AblationMode {
  gate::GatingMode gating = gate::GatingMode::time_in;
  double head_dropout = 0.0;
};

struct AblationPlan {
  std::vector<std::size_t> lengths{6, 88, 170, 254, 336};
  std::size_t pred_len = 100;
  std::vector<AblationMode> modes;  // default: 3 gating modes × {0, 0.2}
  /// Per-cell selection grid; empty axes mean a single fit per cell.
  GridAxes axes;

  static AblationPlan defaults();
  static AblationPlan from_json(const nlohmann::json& doc);
};

struct AblationRow {
  std::size_t seq_len = 0;
  AblationMode mode;
  std::vector<GridResult> per_seed;
  double val_mse = 0.0;   // mean of selected cells over seeds
  double test_mse = 0.0;  // mean of selected cells over seeds
};

inline constexpr const char* kAblationHeader =
    "seq_len,pred_len,gating,dropout,seeds,n_heads,lr0,val_mse,test_mse";

std::string ablation_csv(const std::vector<AblationRow>& rows, std::size_t pred_len);

/// Writes ablation.csv; one row per (length, mode).
std::vector<AblationRow> cmd_ablate_length(const ExperimentConfig& base, const AblationPlan& plan,
                                           const std::vector<std::uint64_t>& seeds,
                                           std::size_t jobs, const std::filesystem::path& out_dir);

struct ParamsQuery {
  experts::ExpertKind model = experts::ExpertKind::dlinear;
  std::size_t channels = 7;
  std::size_t seq_len = 336;
  std::size_t pred_len = 336;
  std::size_t heads_min = 1;
  std::size_t heads_max = 6;
  std::size_t mark_len = 4;
  std::size_t mlp_hidden = 512;
};

struct ParamsRow {
  experts::ExpertKind model;
  std::size_t heads;
  std::size_t count;
};

std::vector<ParamsRow> cmd_params(const ParamsQuery& query);

struct ReferenceCount {
  experts::ExpertKind model;
  std::size_t heads;
  std::size_t expected;
};

/// Published totals for c=7, s=p=336, t=4, hidden 512, heads 1..6.
const std::vector<ReferenceCount>& reference_counts();

struct CheckLine {
  ReferenceCount ref;
  std::size_t actual;
  bool ok() const noexcept { return actual == ref.expected; }
};

std::vector<CheckLine> check_reference_counts();

struct ToySettings {
  std::uint64_t seed = 2021;
  double sigma = 0.1;
  std::size_t hours = 2 * 365 * 24;
  std::size_t seq_len = 24;
  std::size_t pred_len = 24;
  std::size_t batch_size = 128;
  double lr0 = 0.005;
  std::size_t heads = 2;
  double head_dropout = 0.0;
  gate::DropoutGranularity dropout_granularity = gate::DropoutGranularity::entry;
  std::size_t epochs_max = 20;
  std::size_t patience = 3;
  train::LrSchedule lr_schedule = train::LrSchedule::halving;
};

struct GateTraceRow {
  std::string timestamp;
  std::size_t weekday;
  std::vector<double> weights;
};

struct BoundaryRow {
  std::size_t step;
  std::string timestamp;
  double truth;
  std::optional<double> single;
  std::optional<double> mole;
};

struct ToyResult {
  train::FitReport single;
  train::FitReport mole;
  double single_test_mse_raw = 0.0;  // original units
  double mole_test_mse_raw = 0.0;
  std::vector<GateTraceRow> gate_trace;  // 336 hourly rows from a Monday
  std::vector<BoundaryRow> boundary;     // input Thu 04:00 .. forecast to Sat 03:00

  nlohmann::json to_json() const;
};

/// Single-head RLinear against 2-head MoLE-RLinear on the regime-switching
/// toy series. With an out_dir writes toy_report.json, gate_trace.csv and
/// boundary.csv.
ToyResult cmd_toy(const ToySettings& settings, const std::optional<std::filesystem::path>& out_dir);

/// "2021,2022" → {2021, 2022}. Throws ConfigError on malformed input.
std::vector<std::uint64_t> parse_seeds(const std::string& text);

/// 0 success, 1 config error, 2 data error, 3 numerical failure.
int exit_code_for(const std::exception& e);

}  // namespace mole::run
