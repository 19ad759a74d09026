#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "cesrec/constructor.hpp"
#include "cesrec/data.hpp"
#include "cesrec/embedding_table.hpp"
#include "cesrec/eval.hpp"
#include "cesrec/srs.hpp"

namespace cesrec {

struct ServiceConfig {
  // Sessions are mirrored to <store_dir>/<id>.json; empty keeps them in memory.
  std::filesystem::path store_dir;
  std::chrono::seconds ttl = std::chrono::hours(24);
  LoopConfig loop;  // defaults; "config" in the create body overrides fields
  std::size_t top_k = 10;
  std::size_t min_history = 2;
  // Unix seconds; replaceable for tests.
  std::function<std::int64_t()> now;
};

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

// The interactive loop behind HTTP-shaped handlers. Components are borrowed,
// read-only and must outlive the service. Handlers never throw.
class SessionService {
 public:
  SessionService(const Catalog& catalog, const SrsModel& srs, const EmbeddingTable& hybrid,
                 const PseudoConstructor& constructor, ServiceConfig config,
                 const Dataset* users = nullptr);
  ~SessionService();
  SessionService(const SessionService&) = delete;
  SessionService& operator=(const SessionService&) = delete;

  // {"history": [ids]} or {"user_id": id}, plus optional "config" overrides.
  ServiceResponse create_session(const nlohmann::json& body);
  ServiceResponse recommendations(const std::string& session_id);
  // {"text": "..."} or {"dislike": ..., "prefer": ...}; each side is
  // {"attribute", "value"} or "attribute=value".
  ServiceResponse submit_feedback(const std::string& session_id, const nlohmann::json& body);
  ServiceResponse get_trace(const std::string& session_id);
  ServiceResponse delete_session(const std::string& session_id);

  std::size_t purge_expired();
  std::size_t session_count() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Routes: POST /sessions, GET /sessions/{id}/recommendations,
// POST /sessions/{id}/feedback, GET /sessions/{id}/trace,
// DELETE /sessions/{id}, GET /health.
class HttpServer {
 public:
  explicit HttpServer(SessionService& service);
  ~HttpServer();

  // Port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cesrec
