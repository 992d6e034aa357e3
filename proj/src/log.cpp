#include "trackletmr/log.hpp"

#include <cstdlib>
#include <mutex>

namespace tmr {

namespace {

LogLevel parse_env_level() {
  const char* raw = std::getenv("TRACKLET_MR_LOG");
  if (!raw) return LogLevel::Info;
  const std::string value(raw);
  if (value == "error") return LogLevel::Error;
  if (value == "debug") return LogLevel::Debug;
  return LogLevel::Info;
}

LogLevel g_level = parse_env_level();
std::mutex g_mutex;

}  // namespace

LogLevel log_level() { return g_level; }

void set_log_level(LogLevel level) { g_level = level; }

void log_line(LogLevel level, const std::string& msg) {
  static const char* names[] = {"error", "info", "debug"};
  std::lock_guard<std::mutex> lock(g_mutex);
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

}  // namespace tmr
