#pragma once

#include <cstdarg>

namespace protsi {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level comes from the PROTSI_LOG environment variable (error|info|debug),
// read once on first use. Default is error.
LogLevel log_level();

void log_message(LogLevel level, const char* fmt, ...);

#define PROTSI_LOG_ERROR(...) ::protsi::log_message(::protsi::LogLevel::error, __VA_ARGS__)
#define PROTSI_LOG_INFO(...) ::protsi::log_message(::protsi::LogLevel::info, __VA_ARGS__)
#define PROTSI_LOG_DEBUG(...) ::protsi::log_message(::protsi::LogLevel::debug, __VA_ARGS__)

}  // namespace protsi
