#pragma once

// JSON-lines logging to stderr with a process-wide level.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <mutex>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "metaper/error.hpp"

namespace metaper {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3, kOff = 4 };

inline std::atomic<LogLevel>& log_level_ref() {
  static std::atomic<LogLevel> level{LogLevel::kWarn};
  return level;
}

inline void set_log_level(LogLevel level) { log_level_ref().store(level); }
inline LogLevel log_level() { return log_level_ref().load(); }

inline LogLevel parse_log_level(std::string_view s) {
  if (s == "debug") return LogLevel::kDebug;
  if (s == "info") return LogLevel::kInfo;
  if (s == "warn") return LogLevel::kWarn;
  if (s == "error") return LogLevel::kError;
  if (s == "off") return LogLevel::kOff;
  throw Error(ErrorCode::kInvalidArgument, "unknown log level '" + std::string(s) + "'");
}

inline std::string_view log_level_name(LogLevel level) {
  switch (level) {
    case LogLevel::kDebug: return "debug";
    case LogLevel::kInfo: return "info";
    case LogLevel::kWarn: return "warn";
    case LogLevel::kError: return "error";
    case LogLevel::kOff: return "off";
  }
  return "off";
}

inline void log_event(LogLevel level, std::string_view message,
                      nlohmann::json fields = nlohmann::json::object()) {
  if (level < log_level() || level == LogLevel::kOff) return;
  static std::mutex mu;
  nlohmann::json line = nlohmann::json::object();
  line["ts"] = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
  line["level"] = log_level_name(level);
  line["msg"] = message;
  if (fields.is_object()) {
    for (auto& [k, v] : fields.items()) line[k] = v;
  }
  const auto text = line.dump() + "\n";
  std::lock_guard lock(mu);
  std::fputs(text.c_str(), stderr);
}

inline void log_debug(std::string_view m, nlohmann::json f = nlohmann::json::object()) { log_event(LogLevel::kDebug, m, std::move(f)); }
inline void log_info(std::string_view m, nlohmann::json f = nlohmann::json::object()) { log_event(LogLevel::kInfo, m, std::move(f)); }
inline void log_warn(std::string_view m, nlohmann::json f = nlohmann::json::object()) { log_event(LogLevel::kWarn, m, std::move(f)); }
inline void log_error(std::string_view m, nlohmann::json f = nlohmann::json::object()) { log_event(LogLevel::kError, m, std::move(f)); }

}  // namespace metaper
