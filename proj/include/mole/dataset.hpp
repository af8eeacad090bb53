#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mole/calendar.hpp"
#include "mole/tensor.hpp"

namespace mole::data {

/// Regularly spaced multivariate series: `values` is channels × timesteps.
struct RawDataset {
  std::vector<DateTime> timestamps;
  std::vector<std::string> channel_names;
  Tensor2 values;
  Granularity granularity = Granularity::hourly;

  std::size_t channels() const noexcept { return values.rows(); }
  std::size_t length() const noexcept { return values.cols(); }
};

/// Reads `date,<ch1>,<ch2>,...` with dates as `YYYY-MM-DD HH:MM:SS`.
/// Throws DataError on irregular spacing or non-numeric cells; messages name
/// the 1-based file line and column.
RawDataset load_csv(const std::filesystem::path& path);
void write_csv(const RawDataset& data, const std::filesystem::path& path);

enum class SplitFamily { ett, other };
enum class SplitRole { train, val, test };

/// Target range [begin, end) of one split. Input windows may reach
/// `lookback_extension` steps before `begin`.
struct SplitView {
  SplitRole role = SplitRole::train;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t lookback_extension = 0;

  std::size_t size() const noexcept { return end - begin; }
};

struct Splits {
  SplitView train;
  SplitView val;
  SplitView test;
};

/// Chronological split: 6:2:2 for `ett`, 7:1:2 otherwise, floor arithmetic
/// with the remainder going to test. Val and test may draw their first
/// inputs from the tail of the preceding split. Throws DataError when a
/// split cannot host one (seq_len, pred_len) window.
Splits split(std::size_t length, SplitFamily family, std::size_t seq_len, std::size_t pred_len);

/// Per-channel standardisation fitted on the train targets.
struct ChannelScaler {
  std::vector<double> mean;
  std::vector<double> std;

  Tensor2 apply(const Tensor2& values) const;
  Tensor2 invert(const Tensor2& values) const;
};

inline constexpr double kScalerStdFloor = 1e-8;

ChannelScaler fit_scaler(const RawDataset& raw, const SplitView& train);

/// One (input, target) pair.
struct WindowSample {
  Tensor2 x;  // channels × seq_len
  MarkVector x_mark_first;
  Tensor2 y;  // channels × pred_len
};

/// Sliding windows over one split, one per admissible target start,
/// in chronological order.
class WindowSet {
 public:
  WindowSet(const SplitView& view, std::size_t seq_len, std::size_t pred_len);

  std::size_t size() const noexcept { return count_; }
  std::size_t seq_len() const noexcept { return seq_len_; }
  std::size_t pred_len() const noexcept { return pred_len_; }
  const SplitView& view() const noexcept { return view_; }

  /// Index of the first input step of sample `i`.
  std::size_t input_start(std::size_t i) const { return first_target_ + i - seq_len_; }
  /// Index of the first target step of sample `i`.
  std::size_t target_start(std::size_t i) const { return first_target_ + i; }

  WindowSample sample(const RawDataset& data, std::size_t i) const;

 private:
  SplitView view_;
  std::size_t seq_len_;
  std::size_t pred_len_;
  std::size_t first_target_;
  std::size_t count_;
};

/// Number of windows; zero when the view cannot host one.
std::size_t window_count(const SplitView& view, std::size_t seq_len, std::size_t pred_len);

/// Mark features of every timestamp (length × t), computed once.
Tensor2 mark_table(const RawDataset& data);

/// Windows stacked with channels fastest: row b·c + ch of `x` is channel ch
/// of sample b.
struct Batch {
  Tensor2 x;      // (B·c) × s
  Tensor2 marks;  // B × t
  Tensor2 y;      // (B·c) × p
  std::size_t size = 0;
};

Batch assemble_batch(const RawDataset& data, const Tensor2& marks, const WindowSet& windows,
                     std::span<const std::size_t> indices);

/// Noise-free regime-switching signal at global hour t (t = 0 is Monday
/// 00:00): 6·sin(2πt/24)+20 on Monday–Thursday, 6·sin(2πt/12)+20 on
/// Friday–Sunday.
double toy_signal(std::int64_t hour);

/// Hourly single-channel toy series of `num_hours` points starting Monday
/// 2024-01-01 00:00 with N(0, sigma²) noise.
RawDataset toy_generate(std::size_t num_hours, double sigma, std::uint64_t seed);

}  // namespace mole::data
