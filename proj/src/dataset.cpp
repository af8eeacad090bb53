#include "mole/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <fmt/core.h>

#include "mole/errors.hpp"
#include "mole/rng.hpp"

namespace mole::data {

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

}  // namespace

RawDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open dataset '{}'", path.string()));

  std::string line;
  if (!std::getline(in, line)) throw DataError(fmt::format("'{}' is empty", path.string()));
  const auto header = split_commas(trim(line));
  if (header.size() < 2 || trim(header[0]) != "date") {
    throw DataError(fmt::format("'{}': header must be 'date,<ch1>,...'", path.string()));
  }

  RawDataset out;
  for (std::size_t i = 1; i < header.size(); ++i) out.channel_names.emplace_back(trim(header[i]));
  const std::size_t channels = out.channel_names.size();

  std::vector<std::vector<double>> columns(channels);
  std::size_t line_no = 1;
  std::int64_t step = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view row = trim(line);
    if (row.empty()) continue;
    const auto cells = split_commas(row);
    const std::size_t row_index = out.timestamps.size();
    if (cells.size() != channels + 1) {
      throw DataError(fmt::format("row {} (line {}): expected {} cells, found {}", row_index,
                                  line_no, channels + 1, cells.size()));
    }
    DateTime when;
    try {
      when = DateTime::parse(trim(cells[0]));
    } catch (const DataError& e) {
      throw DataError(fmt::format("row {} (line {}), column 'date': {}", row_index, line_no,
                                  e.what()));
    }
    if (!out.timestamps.empty()) {
      const std::int64_t delta = when.epoch_seconds() - out.timestamps.back().epoch_seconds();
      if (out.timestamps.size() == 1) {
        step = delta;
        out.granularity = granularity_from_step(step);
      } else if (delta != step) {
        throw DataError(fmt::format("irregular spacing at row {} (line {}): step {} s, expected {} s",
                                    row_index, line_no, delta, step));
      }
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const std::string_view cell = trim(cells[c + 1]);
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw DataError(fmt::format("non-numeric cell at row {} (line {}), column '{}': '{}'",
                                    row_index, line_no, out.channel_names[c], cell));
      }
      columns[c].push_back(v);
    }
    out.timestamps.push_back(when);
  }
  if (out.timestamps.size() < 2) {
    throw DataError(fmt::format("'{}' needs at least two rows to infer the sampling step",
                                path.string()));
  }

  const std::size_t length = out.timestamps.size();
  out.values = Tensor2(channels, length);
  for (std::size_t c = 0; c < channels; ++c) {
    std::copy(columns[c].begin(), columns[c].end(), out.values.row(c).begin());
  }
  return out;
}

void write_csv(const RawDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out << "date";
  for (const auto& name : data.channel_names) out << ',' << name;
  out << '\n';
  for (std::size_t t = 0; t < data.length(); ++t) {
    out << data.timestamps[t].to_string();
    for (std::size_t c = 0; c < data.channels(); ++c) out << ',' << fmt::format("{}", data.values(c, t));
    out << '\n';
  }
}

Splits split(std::size_t length, SplitFamily family, std::size_t seq_len, std::size_t pred_len) {
  const std::size_t train_part = family == SplitFamily::ett ? 6 : 7;
  const std::size_t val_part = family == SplitFamily::ett ? 2 : 1;
  const std::size_t train_len = length * train_part / 10;
  const std::size_t val_len = length * val_part / 10;

  Splits s;
  s.train = {SplitRole::train, 0, train_len, 0};
  s.val = {SplitRole::val, train_len, train_len + val_len, seq_len};
  s.test = {SplitRole::test, train_len + val_len, length, seq_len};

  for (const SplitView* v : {&s.train, &s.val, &s.test}) {
    if (window_count(*v, seq_len, pred_len) == 0) {
      static constexpr const char* names[] = {"train", "val", "test"};
      throw DataError(fmt::format("{} split [{}, {}) of a length-{} series cannot host a window "
                                  "with seq_len={} pred_len={}",
                                  names[static_cast<int>(v->role)], v->begin, v->end, length,
                                  seq_len, pred_len));
    }
  }
  return s;
}

ChannelScaler fit_scaler(const RawDataset& raw, const SplitView& train) {
  if (train.size() == 0) throw DataError("fit_scaler: empty train range");
  ChannelScaler scaler;
  const double n = static_cast<double>(train.size());
  for (std::size_t c = 0; c < raw.channels(); ++c) {
    const auto row = raw.values.row(c).subspan(train.begin, train.size());
    double sum = 0.0;
    for (double v : row) sum += v;
    const double mean = sum / n;
    double ss = 0.0;
    for (double v : row) ss += (v - mean) * (v - mean);
    scaler.mean.push_back(mean);
    scaler.std.push_back(std::max(kScalerStdFloor, std::sqrt(ss / n)));
  }
  return scaler;
}

Tensor2 ChannelScaler::apply(const Tensor2& values) const {
  if (values.rows() != mean.size()) throw ShapeError("ChannelScaler::apply: channel mismatch");
  Tensor2 out(values.rows(), values.cols());
  for (std::size_t c = 0; c < values.rows(); ++c) {
    for (std::size_t t = 0; t < values.cols(); ++t) out(c, t) = (values(c, t) - mean[c]) / std[c];
  }
  return out;
}

Tensor2 ChannelScaler::invert(const Tensor2& values) const {
  if (values.rows() != mean.size()) throw ShapeError("ChannelScaler::invert: channel mismatch");
  Tensor2 out(values.rows(), values.cols());
  for (std::size_t c = 0; c < values.rows(); ++c) {
    for (std::size_t t = 0; t < values.cols(); ++t) out(c, t) = values(c, t) * std[c] + mean[c];
  }
  return out;
}

namespace {

// Earliest target start: the input may reach back lookback_extension steps
// before the split, but never before index 0.
std::size_t first_target_of(const SplitView& view, std::size_t seq_len) {
  const std::size_t warmup = seq_len > view.lookback_extension ? seq_len - view.lookback_extension : 0;
  return std::max(view.begin + warmup, seq_len);
}

}  // namespace

std::size_t window_count(const SplitView& view, std::size_t seq_len, std::size_t pred_len) {
  if (seq_len == 0 || pred_len == 0 || view.end < view.begin) return 0;
  const std::size_t first_target = first_target_of(view, seq_len);
  if (first_target + pred_len > view.end) return 0;
  return view.end - pred_len + 1 - first_target;
}

WindowSet::WindowSet(const SplitView& view, std::size_t seq_len, std::size_t pred_len)
    : view_(view), seq_len_(seq_len), pred_len_(pred_len), first_target_(0), count_(0) {
  count_ = window_count(view, seq_len, pred_len);
  if (count_ == 0) {
    throw DataError(fmt::format("split [{}, {}) with lookback {} yields no (s={}, p={}) windows",
                                view.begin, view.end, view.lookback_extension, seq_len, pred_len));
  }
  first_target_ = first_target_of(view, seq_len);
}

WindowSample WindowSet::sample(const RawDataset& data, std::size_t i) const {
  if (i >= count_) throw ShapeError(fmt::format("window {} out of range ({})", i, count_));
  const std::size_t in0 = input_start(i);
  const std::size_t out0 = target_start(i);
  WindowSample s{Tensor2(data.channels(), seq_len_), {}, Tensor2(data.channels(), pred_len_)};
  for (std::size_t c = 0; c < data.channels(); ++c) {
    const auto row = data.values.row(c);
    std::copy_n(row.begin() + static_cast<std::ptrdiff_t>(in0), seq_len_, s.x.row(c).begin());
    std::copy_n(row.begin() + static_cast<std::ptrdiff_t>(out0), pred_len_, s.y.row(c).begin());
  }
  s.x_mark_first = mark_features(data.timestamps[in0], data.granularity);
  return s;
}

Tensor2 mark_table(const RawDataset& data) {
  const std::size_t t = mark_length(data.granularity);
  Tensor2 out(data.length(), t);
  for (std::size_t i = 0; i < data.length(); ++i) {
    const MarkVector m = mark_features(data.timestamps[i], data.granularity);
    std::copy(m.features.begin(), m.features.end(), out.row(i).begin());
  }
  return out;
}

Batch assemble_batch(const RawDataset& data, const Tensor2& marks, const WindowSet& windows,
                     std::span<const std::size_t> indices) {
  const std::size_t c = data.channels();
  const std::size_t s = windows.seq_len();
  const std::size_t p = windows.pred_len();
  Batch batch{Tensor2(indices.size() * c, s), Tensor2(indices.size(), marks.cols()),
              Tensor2(indices.size() * c, p), indices.size()};
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t in0 = windows.input_start(indices[b]);
    const std::size_t out0 = windows.target_start(indices[b]);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const auto row = data.values.row(ch);
      std::copy_n(row.begin() + static_cast<std::ptrdiff_t>(in0), s, batch.x.row(b * c + ch).begin());
      std::copy_n(row.begin() + static_cast<std::ptrdiff_t>(out0), p, batch.y.row(b * c + ch).begin());
    }
    const auto m = marks.row(in0);
    std::copy(m.begin(), m.end(), batch.marks.row(b).begin());
  }
  return batch;
}

double toy_signal(std::int64_t hour) {
  const std::int64_t day_of_week = (hour / 24) % 7;
  const double t = static_cast<double>(hour);
  const double period = day_of_week < 4 ? 24.0 : 12.0;
  return 6.0 * std::sin(2.0 * std::numbers::pi * t / period) + 20.0;
}

RawDataset toy_generate(std::size_t num_hours, double sigma, std::uint64_t seed) {
  if (num_hours == 0) throw ConfigError("toy_generate: num_hours must be >= 1");
  if (!(sigma >= 0.0)) throw ConfigError(fmt::format("toy_generate: negative sigma {}", sigma));
  RawDataset out;
  out.channel_names = {"value"};
  out.granularity = Granularity::hourly;
  out.values = Tensor2(1, num_hours);
  out.timestamps.reserve(num_hours);
  const std::int64_t origin = DateTime{2024, 1, 1, 0, 0, 0}.epoch_seconds();  // a Monday
  Rng64 noise = Rng64::derive(seed, "toy-noise");
  for (std::size_t t = 0; t < num_hours; ++t) {
    const auto hour = static_cast<std::int64_t>(t);
    out.timestamps.push_back(DateTime::from_epoch_seconds(origin + hour * 3600));
    out.values(0, t) = toy_signal(hour) + gaussian(noise, 0.0, sigma);
  }
  return out;
}

}  // namespace mole::data
