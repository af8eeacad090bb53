#include "mole/log.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>

namespace mole::log {

namespace {
std::atomic<Level> g_level{Level::warn};
std::mutex g_mutex;
}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void write(Level lvl, std::string_view message) {
  if (lvl < g_level.load()) return;
  static constexpr const char* tags[] = {"debug", "info", "warning", "error"};
  std::lock_guard lock(g_mutex);
  std::fprintf(stderr, "[mole] %s: %.*s\n", tags[static_cast<int>(lvl)],
               static_cast<int>(message.size()), message.data());
}

}  // namespace mole::log
