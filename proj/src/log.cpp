// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/log.hpp"

#include <cstdlib>
#include <memory>

#include <spdlog/sinks/stdout_sinks.h>

namespace xtal2dos {

spdlog::logger& logger() {
  static const std::shared_ptr<spdlog::logger> instance = [] {
    auto sink = std::make_shared<spdlog::sinks::stderr_sink_mt>();
    auto log = std::make_shared<spdlog::logger>("xtal2dos", sink);
    log->set_pattern("[%l] %v");
    log->set_level(spdlog::level::warn);
    if (const char* env = std::getenv("XTAL2DOS_LOG")) log->set_level(spdlog::level::from_str(env));
    return log;
  }();
  return *instance;
}

}  // namespace xtal2dos
