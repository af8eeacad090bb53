#include "mole/calendar.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>

#include <fmt/core.h>

#include "mole/errors.hpp"

namespace mole::data {

namespace {

using std::chrono::days;
using std::chrono::sys_days;
using std::chrono::year_month_day;

int parse_field(std::string_view text, std::size_t pos, std::size_t len) {
  int value = 0;
  const char* first = text.data() + pos;
  const char* last = first + len;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last) {
    throw DataError(fmt::format("malformed datetime '{}'", text));
  }
  return value;
}

year_month_day ymd_of(const DateTime& dt) {
  return year_month_day{std::chrono::year{dt.year}, std::chrono::month{static_cast<unsigned>(dt.month)},
                        std::chrono::day{static_cast<unsigned>(dt.day)}};
}

}  // namespace

DateTime DateTime::parse(std::string_view text) {
  if (text.size() != 19 || text[4] != '-' || text[7] != '-' || text[10] != ' ' ||
      text[13] != ':' || text[16] != ':') {
    throw DataError(fmt::format("expected 'YYYY-MM-DD HH:MM:SS', got '{}'", text));
  }
  DateTime dt;
  dt.year = parse_field(text, 0, 4);
  dt.month = parse_field(text, 5, 2);
  dt.day = parse_field(text, 8, 2);
  dt.hour = parse_field(text, 11, 2);
  dt.minute = parse_field(text, 14, 2);
  dt.second = parse_field(text, 17, 2);
  if (!ymd_of(dt).ok() || dt.hour > 23 || dt.minute > 59 || dt.second > 59) {
    throw DataError(fmt::format("invalid calendar datetime '{}'", text));
  }
  return dt;
}

DateTime DateTime::from_epoch_seconds(std::int64_t seconds) {
  std::int64_t day_count = seconds / 86400;
  std::int64_t rem = seconds % 86400;
  if (rem < 0) {
    rem += 86400;
    --day_count;
  }
  const year_month_day ymd{sys_days{days{day_count}}};
  DateTime dt;
  dt.year = static_cast<int>(ymd.year());
  dt.month = static_cast<int>(static_cast<unsigned>(ymd.month()));
  dt.day = static_cast<int>(static_cast<unsigned>(ymd.day()));
  dt.hour = static_cast<int>(rem / 3600);
  dt.minute = static_cast<int>((rem % 3600) / 60);
  dt.second = static_cast<int>(rem % 60);
  return dt;
}

std::int64_t DateTime::epoch_seconds() const {
  const auto d = sys_days{ymd_of(*this)}.time_since_epoch().count();
  return static_cast<std::int64_t>(d) * 86400 + hour * 3600 + minute * 60 + second;
}

std::string DateTime::to_string() const {
  return fmt::format("{:04}-{:02}-{:02} {:02}:{:02}:{:02}", year, month, day, hour, minute,
                     second);
}

int DateTime::weekday() const {
  // iso_encoding: Monday = 1 … Sunday = 7
  return static_cast<int>(std::chrono::weekday{sys_days{ymd_of(*this)}}.iso_encoding()) - 1;
}

int DateTime::day_of_year() const {
  const auto jan1 = sys_days{std::chrono::year{year} / 1 / 1};
  return static_cast<int>((sys_days{ymd_of(*this)} - jan1).count()) + 1;
}

std::int64_t step_seconds(Granularity g) {
  switch (g) {
    case Granularity::minutes10: return 600;
    case Granularity::minutes15: return 900;
    case Granularity::hourly: return 3600;
  }
  return 3600;
}

Granularity granularity_from_step(std::int64_t seconds) {
  switch (seconds) {
    case 600: return Granularity::minutes10;
    case 900: return Granularity::minutes15;
    case 3600: return Granularity::hourly;
    default:
      throw DataError(fmt::format("unsupported sampling step of {} s (expected 10min, 15min or 1h)",
                                  seconds));
  }
}

std::string_view to_string(Granularity g) {
  switch (g) {
    case Granularity::minutes10: return "10min";
    case Granularity::minutes15: return "15min";
    case Granularity::hourly: return "hourly";
  }
  return "hourly";
}

std::size_t mark_length(Granularity g) { return g == Granularity::hourly ? 4 : 5; }

MarkVector mark_features(const DateTime& when, Granularity g) {
  MarkVector mark;
  mark.features.reserve(mark_length(g));
  if (g != Granularity::hourly) mark.features.push_back(when.minute / 59.0 - 0.5);
  mark.features.push_back(when.hour / 23.0 - 0.5);
  mark.features.push_back(when.weekday() / 6.0 - 0.5);
  mark.features.push_back((when.day - 1) / 30.0 - 0.5);
  // Leap-year day 366 uses the same 365 denominator; clamp keeps it in range.
  mark.features.push_back(std::min(0.5, (when.day_of_year() - 1) / 365.0 - 0.5));
  return mark;
}

}  // namespace mole::data
