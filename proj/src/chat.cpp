#include "cesrec/chat.hpp"

#include <fmt/format.h>

#include "cesrec/error.hpp"

namespace cesrec {

HttpEndpoint chat_endpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("url"))
    throw Error(ErrorCode::invalid_argument, "remote backends need chat.url in the configuration");
  HttpEndpoint e;
  e.url = j["url"].get<std::string>();
  e.token_env = j.value("token_env", std::string("CESREC_CHAT_TOKEN"));
  e.timeout_s = j.value("timeout_s", e.timeout_s);
  e.max_attempts = j.value("max_attempts", e.max_attempts);
  return e;
}

ChatOptions chat_options_from_json(const nlohmann::json& j) {
  ChatOptions o;
  if (!j.is_object()) return o;
  o.temperature = j.value("temperature", o.temperature);
  o.max_tokens = j.value("max_tokens", o.max_tokens);
  return o;
}

HttpChatClient::HttpChatClient(HttpEndpoint endpoint) : endpoint_(std::move(endpoint)) {
  if (endpoint_.token_env.empty()) endpoint_.token_env = "CESREC_CHAT_TOKEN";
}

std::string HttpChatClient::complete(const std::vector<ChatMessage>& messages,
                                     const ChatOptions& options) {
  nlohmann::json body;
  body["messages"] = nlohmann::json::array();
  for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  body["temperature"] = options.temperature;
  body["max_tokens"] = options.max_tokens;
  const auto reply = post_json(endpoint_, body);
  if (!reply.contains("text") || !reply["text"].is_string())
    throw Error(ErrorCode::backend, fmt::format("{} reply lacks a 'text' string", endpoint_.url));
  return reply["text"].get<std::string>();
}

std::string render_messages(const std::vector<ChatMessage>& messages) {
  std::string out;
  for (const auto& m : messages) {
    if (!out.empty()) out += '\n';
    out += m.role;
    out += ": ";
    out += m.content;
  }
  return out;
}

}  // namespace cesrec
