#include "cesrec/http.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "cesrec/error.hpp"

namespace cesrec {

namespace {

struct SplitUrl {
  std::string origin;
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos)
    throw Error(ErrorCode::invalid_argument, fmt::format("endpoint url '{}' lacks a scheme", url));
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace

nlohmann::json post_json(const HttpEndpoint& endpoint, const nlohmann::json& body) {
  const auto [origin, path] = split_url(endpoint.url);
  httplib::Headers headers;
  if (!endpoint.token_env.empty())
    if (const char* token = std::getenv(endpoint.token_env.c_str()); token && *token)
      headers.emplace("Authorization", std::string("Bearer ") + token);
  const std::string payload = body.dump();
  const int attempts = std::max(1, endpoint.max_attempts);
  std::string last_error;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0) {
      const auto wait = std::chrono::milliseconds(endpoint.backoff_ms * (1 << (attempt - 1)));
      spdlog::warn("retrying {} in {} ms ({})", endpoint.url, wait.count(), last_error);
      std::this_thread::sleep_for(wait);
    }
    httplib::Client client(origin);
    client.set_connection_timeout(endpoint.timeout_s, 0);
    client.set_read_timeout(endpoint.timeout_s, 0);
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = fmt::format("HTTP {}", res->status);
      continue;
    }
    if (res->status != 200)
      throw Error(ErrorCode::backend,
                  fmt::format("{} answered HTTP {}: {}", endpoint.url, res->status, res->body));
    auto parsed = nlohmann::json::parse(res->body, nullptr, false);
    if (parsed.is_discarded())
      throw Error(ErrorCode::backend, fmt::format("{} returned malformed JSON", endpoint.url));
    return parsed;
  }
  throw Error(ErrorCode::backend, fmt::format("{} failed after {} attempt(s): {}", endpoint.url,
                                              attempts, last_error));
}

}  // namespace cesrec
