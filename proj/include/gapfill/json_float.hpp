#pragma once

#include <charconv>
#include <string>

#include <json.hpp>

namespace gapfill {

/// JSON number whose printed form is the shortest decimal that round-trips
/// to `v` as a float.
template <typename Json = nlohmann::json>
Json float_to_json(float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  double d = 0.0;
  std::from_chars(buf, res.ptr, d);
  return Json(d);
}

template <typename Json>
float json_to_float(const Json& j) {
  return static_cast<float>(j.template get<double>());
}

}  // namespace gapfill
