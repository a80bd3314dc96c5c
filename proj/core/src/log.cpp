#include "ace/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <string_view>

#include "ace/error.hpp"

namespace ace::log {
namespace {

spdlog::logger& logger() {
  static auto instance = [] {
    auto l = spdlog::stderr_logger_st("ace");
    l->set_pattern("[%Y-%m-%d %H:%M:%S.%e] [%l] %v");
    l->set_level(spdlog::level::warn);
    return l;
  }();
  return *instance;
}

spdlog::level::level_enum to_spd(Level level) {
  switch (level) {
    case Level::debug: return spdlog::level::debug;
    case Level::info: return spdlog::level::info;
    case Level::warn: return spdlog::level::warn;
    case Level::error: return spdlog::level::err;
    case Level::off: return spdlog::level::off;
  }
  return spdlog::level::warn;
}

}  // namespace

void configure_from_env() {
  const char* env = std::getenv("ACE_LOG");
  if (env == nullptr || *env == '\0') {
    set_level(Level::warn);
    return;
  }
  const std::string_view v(env);
  if (v == "debug") set_level(Level::debug);
  else if (v == "info") set_level(Level::info);
  else if (v == "warn") set_level(Level::warn);
  else if (v == "error") set_level(Level::error);
  else if (v == "off") set_level(Level::off);
  else throw ParameterError("ACE_LOG must be one of debug, info, warn, error, off (got '" + std::string(v) + "')");
}

void set_level(Level level) { logger().set_level(to_spd(level)); }

Level level() {
  switch (logger().level()) {
    case spdlog::level::trace:
    case spdlog::level::debug: return Level::debug;
    case spdlog::level::info: return Level::info;
    case spdlog::level::warn: return Level::warn;
    case spdlog::level::err:
    case spdlog::level::critical: return Level::error;
    default: return Level::off;
  }
}

void debug(const std::string& message) { logger().debug(message); }
void info(const std::string& message) { logger().info(message); }
void warn(const std::string& message) { logger().warn(message); }
void error(const std::string& message) { logger().error(message); }

}  // namespace ace::log
