#pragma once

#include <string>

namespace ace::log {

enum class Level { debug, info, warn, error, off };

// Reads ACE_LOG (debug, info, warn, error, off; default warn). Messages go to
// stderr.
void configure_from_env();
void set_level(Level level);
Level level();

void debug(const std::string& message);
void info(const std::string& message);
void warn(const std::string& message);
void error(const std::string& message);

}  // namespace ace::log
