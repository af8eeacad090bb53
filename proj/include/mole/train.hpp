#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mole/dataset.hpp"
#include "mole/mixture.hpp"
#include "mole/params.hpp"

namespace mole::train {

/// halving: lr0 · 0.5^(epoch−1). constant: lr0 every epoch.
enum class LrSchedule { halving, constant };

std::string_view to_string(LrSchedule schedule);
LrSchedule parse_lr_schedule(std::string_view text);

struct TrainConfig {
  std::size_t batch_size = 8;
  double lr0 = 0.005;
  std::size_t epochs_max = 20;
  /// Epochs without validation improvement before stopping; 0 disables
  /// early stopping.
  std::size_t patience = 3;
  std::uint64_t seed = 2021;
  LrSchedule schedule = LrSchedule::halving;

  void validate() const;
  double lr(std::size_t epoch) const;
};

/// Means over every element (channels × horizon × samples).
double mse(const Tensor2& prediction, const Tensor2& truth);
double mae(const Tensor2& prediction, const Tensor2& truth);

/// lr0 · 0.5^(epoch−1), epoch counted from 1.
double lr_at(std::size_t epoch, double lr0);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moments are keyed by parameter name and mirror the
/// store's shapes.
class Adam {
 public:
  explicit Adam(const ParamStore& store, AdamOptions options = {});

  /// Applies one update from the accumulated gradients, then zeroes them.
  /// Throws NumericalError naming the first parameter with a non-finite
  /// gradient (the store is left untouched in that case).
  void step(ParamStore& store, double lr);
  std::size_t steps() const noexcept { return step_; }

 private:
  struct Moments {
    Tensor2 m;
    Tensor2 v;
  };
  AdamOptions options_;
  std::map<std::string, Moments, std::less<>> moments_;
  std::size_t step_ = 0;
};

/// Datasets standardised in place, with windows for each split.
struct DataBundle {
  data::RawDataset data;
  Tensor2 marks;
  data::Splits splits;
  data::WindowSet train;
  data::WindowSet val;
  data::WindowSet test;

  /// `raw` must already be standardised.
  static DataBundle make(data::RawDataset raw, const data::Splits& splits, std::size_t seq_len,
                         std::size_t pred_len);
};

struct EvalResult {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t samples = 0;
  std::vector<double> batch_ms;
};

/// Chronological evaluation in batches (final partial batch kept). `rng`
/// feeds random gating modes and may be null for TimeIn.
EvalResult evaluate(const gate::MoleSpec& spec, ParamStore& store, const data::RawDataset& data,
                    const Tensor2& marks, const data::WindowSet& windows, std::size_t batch_size,
                    Rng64* rng);

struct EpochRecord {
  double train_mse = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;
};

struct TimingSummary {
  double mean_ms = 0.0;
  double q1_ms = 0.0;
  double median_ms = 0.0;
  double q3_ms = 0.0;
  std::size_t samples = 0;

  static TimingSummary of(std::vector<double> ms);
};

struct FitReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based
  double best_val_mse = std::numeric_limits<double>::infinity();
  double test_mse = 0.0;
  double test_mae = 0.0;
  TimingSummary train_timing;
  TimingSummary infer_timing;
  std::size_t param_count = 0;

  /// {"config", "epochs", "best_epoch", "test_mse", "test_mae",
  ///  "train_ms_per_iter", "infer_ms_per_iter", "param_count", ...}
  nlohmann::json to_json(const nlohmann::json& config) const;
};

/// Observer for tests and progress output; called after each epoch.
using EpochHook = std::function<void(std::size_t epoch, const EpochRecord& record)>;

/// Trains `store` in place and leaves it at the best-validation epoch.
/// Train batches are reshuffled each epoch and the final partial batch is
/// dropped. Test metrics are computed once, after restoring the best
/// parameters. Throws NumericalError on a non-finite loss.
FitReport fit(const TrainConfig& config, const gate::MoleSpec& spec, ParamStore& store,
              const DataBundle& bundle, const EpochHook& on_epoch = {});

/// Closed-form parameter total: expert + mixing network (heads ≥ 2 only).
std::size_t param_count(const experts::ExpertSpec& spec, std::size_t mark_len);

}  // namespace mole::train
