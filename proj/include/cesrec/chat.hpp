#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cesrec/http.hpp"

namespace cesrec {

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatOptions {
  double temperature = 0.0;
  int max_tokens = 512;
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string identity() const = 0;
  virtual std::string complete(const std::vector<ChatMessage>& messages, const ChatOptions& options) = 0;
};

// POST {"messages": [{"role", "content"}], "temperature", "max_tokens"} -> {"text"}.
class HttpChatClient final : public ChatClient {
 public:
  explicit HttpChatClient(HttpEndpoint endpoint);
  std::string identity() const override { return "remote-chat/" + endpoint_.url; }
  std::string complete(const std::vector<ChatMessage>& messages, const ChatOptions& options) override;

 private:
  HttpEndpoint endpoint_;
};

// {"url", "token_env", "timeout_s", "max_attempts", "temperature",
// "max_tokens"}; url is required.
HttpEndpoint chat_endpoint_from_json(const nlohmann::json& j);
ChatOptions chat_options_from_json(const nlohmann::json& j);

// Flattens messages as "role: content" lines; used for trace records.
std::string render_messages(const std::vector<ChatMessage>& messages);

}  // namespace cesrec
