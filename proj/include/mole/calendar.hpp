#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mole::data {

/// Civil date-time without time zone, second resolution.
struct DateTime {
  int year = 1970;
  int month = 1;  // 1..12
  int day = 1;    // 1..31
  int hour = 0;
  int minute = 0;
  int second = 0;

  /// Parses exactly `YYYY-MM-DD HH:MM:SS`; throws DataError otherwise.
  static DateTime parse(std::string_view text);
  static DateTime from_epoch_seconds(std::int64_t seconds);

  std::int64_t epoch_seconds() const;
  std::string to_string() const;
  /// Monday = 0 … Sunday = 6.
  int weekday() const;
  /// 1-based ordinal day within the year.
  int day_of_year() const;

  friend bool operator==(const DateTime&, const DateTime&) = default;
};

enum class Granularity { minutes10, minutes15, hourly };

std::int64_t step_seconds(Granularity g);
/// Maps a sampling step in seconds to a granularity; throws DataError for
/// unsupported steps.
Granularity granularity_from_step(std::int64_t seconds);
std::string_view to_string(Granularity g);

/// Calendar features of one timestamp, each in [−0.5, 0.5]. Hourly data uses
/// [hour, weekday, day of month, day of year]; sub-hourly data prepends the
/// minute.
struct MarkVector {
  std::vector<double> features;
};

std::size_t mark_length(Granularity g);
MarkVector mark_features(const DateTime& when, Granularity g);

}  // namespace mole::data
