#pragma once

#include <spdlog/spdlog.h>

#include <memory>

namespace gapfill {

/// Process-wide logger writing line-oriented messages to stderr.
std::shared_ptr<spdlog::logger> logger();

}  // namespace gapfill
