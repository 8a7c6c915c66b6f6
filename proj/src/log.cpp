#include "gapfill/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>

namespace gapfill {

std::shared_ptr<spdlog::logger> logger() {
  static auto instance = [] {
    auto l = std::make_shared<spdlog::logger>("gapfill",
                                              std::make_shared<spdlog::sinks::stderr_sink_mt>());
    l->set_pattern("[%Y-%m-%d %H:%M:%S.%e] [%l] %v");
    return l;
  }();
  return instance;
}

}  // namespace gapfill
