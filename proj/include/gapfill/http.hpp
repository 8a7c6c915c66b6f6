#pragma once

#include <chrono>
#include <string>
#include <string_view>

namespace gapfill {

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// Splits "http://host:port/path" into the origin and the request path.
struct UrlParts {
  std::string origin;
  std::string path;
};
UrlParts split_url(std::string_view url);

/// POSTs a JSON body. `bearer_token` is sent as an Authorization header when
/// non-empty. Throws TransportError when no response is received; non-2xx
/// statuses are returned to the caller.
HttpResponse post_json(std::string_view url, const std::string& body,
                       const std::string& bearer_token, std::chrono::milliseconds timeout);

/// Reads the API key from the named environment variable; empty if unset.
std::string api_key_from_env(const std::string& var_name);

}  // namespace gapfill
