#pragma once

#include <iostream>
#include <sstream>
#include <string>

namespace tmr {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Level comes from TRACKLET_MR_LOG (error|info|debug), default info.
LogLevel log_level();
void set_log_level(LogLevel level);
void log_line(LogLevel level, const std::string& msg);

}  // namespace tmr

#define TMR_LOG_ERROR(msg)                          \
  do {                                              \
    std::ostringstream tmr_log_os;                  \
    tmr_log_os << msg;                              \
    ::tmr::log_line(::tmr::LogLevel::Error, tmr_log_os.str()); \
  } while (0)

#define TMR_LOG_INFO(msg)                           \
  do {                                              \
    if (::tmr::log_level() >= ::tmr::LogLevel::Info) {  \
      std::ostringstream tmr_log_os;                \
      tmr_log_os << msg;                            \
      ::tmr::log_line(::tmr::LogLevel::Info, tmr_log_os.str()); \
    }                                               \
  } while (0)

#define TMR_LOG_DEBUG(msg)                          \
  do {                                              \
    if (::tmr::log_level() >= ::tmr::LogLevel::Debug) { \
      std::ostringstream tmr_log_os;                \
      tmr_log_os << msg;                            \
      ::tmr::log_line(::tmr::LogLevel::Debug, tmr_log_os.str()); \
    }                                               \
  } while (0)
