#pragma once

#include <string>

#include <nlohmann/json.hpp>

namespace cesrec {

// A JSON-over-HTTP endpoint. The bearer token, if any, is read from the
// environment variable `token_env` at call time.
struct HttpEndpoint {
  std::string url;  // http://host[:port]/path
  std::string token_env;
  int timeout_s = 60;
  int max_attempts = 3;
  int backoff_ms = 250;  // doubled after every failed attempt
};

// POSTs `body` and returns the parsed JSON reply. Connection failures, 5xx
// and 429 are retried with exponential backoff; other failures throw
// Error(backend) immediately.
nlohmann::json post_json(const HttpEndpoint& endpoint, const nlohmann::json& body);

}  // namespace cesrec
