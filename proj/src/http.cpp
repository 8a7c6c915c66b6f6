#include "gapfill/http.hpp"

#include <cstdlib>

#include <httplib.h>

#include "gapfill/error.hpp"

namespace gapfill {

UrlParts split_url(std::string_view url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) {
    throw ConfigError("endpoint URL must include a scheme: " + std::string(url));
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string_view::npos) return {std::string(url), "/"};
  return {std::string(url.substr(0, path_start)), std::string(url.substr(path_start))};
}

HttpResponse post_json(std::string_view url, const std::string& body,
                       const std::string& bearer_token, std::chrono::milliseconds timeout) {
  const auto parts = split_url(url);
  httplib::Client client(parts.origin);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  httplib::Headers headers;
  if (!bearer_token.empty()) headers.emplace("Authorization", "Bearer " + bearer_token);
  auto res = client.Post(parts.path, headers, body, "application/json");
  if (!res) {
    throw TransportError("POST " + parts.origin + parts.path + " failed: " +
                         httplib::to_string(res.error()));
  }
  return {res->status, res->body};
}

std::string api_key_from_env(const std::string& var_name) {
  if (var_name.empty()) return {};
  const char* v = std::getenv(var_name.c_str());
  return v ? std::string(v) : std::string();
}

}  // namespace gapfill
