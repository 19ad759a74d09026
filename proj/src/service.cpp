#include "cesrec/service.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <unordered_set>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "cesrec/error.hpp"
#include "cesrec/feedback.hpp"

namespace cesrec {

using nlohmann::json;

namespace {

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return 400;
    case ErrorCode::not_found: return 404;
    case ErrorCode::conflict: return 409;
    case ErrorCode::backend: return 502;
    default: return 500;
  }
}

ServiceResponse error_response(int status, std::string code, std::string message, json details = json::array()) {
  return {status, {{"code", std::move(code)}, {"message", std::move(message)}, {"details", std::move(details)}}};
}

ServiceResponse error_response(const Error& e) {
  return error_response(http_status(e.code()), to_string(e.code()), e.what(), e.details());
}

std::string new_session_id() {
  static std::mutex m;
  static std::mt19937_64 rng(std::random_device{}());
  std::lock_guard lock(m);
  return fmt::format("{:016x}{:016x}", rng(), rng());
}

bool valid_session_id(const std::string& id) {
  return !id.empty() && id.size() <= 64 &&
         std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)); });
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

json item_json(const Item& item) {
  json attrs = json::object();
  for (const auto& [k, v] : item.attributes) attrs[k] = v;
  return {{"item_id", item.id.str()}, {"title", item.title}, {"attributes", attrs}};
}

}  // namespace

struct SessionService::Impl {
  struct Session {
    std::string id;
    std::string user_id;
    json config;  // snapshot, immutable
    LoopConfig loop;
    std::int64_t created_at = 0;
    std::atomic<std::int64_t> updated_at{0};
    std::unique_ptr<LoopSession> session;
    std::shared_mutex mutex;
  };

  const Catalog& catalog;
  const SrsModel& srs;
  const EmbeddingTable& hybrid;
  const PseudoConstructor& constructor;
  ServiceConfig config;
  const Dataset* users;
  Components components;

  mutable std::mutex map_mutex;
  std::map<std::string, std::shared_ptr<Session>> sessions;

  Impl(const Catalog& c, const SrsModel& s, const EmbeddingTable& h, const PseudoConstructor& k, ServiceConfig cfg,
       const Dataset* u)
      : catalog(c), srs(s), hybrid(h), constructor(k), config(std::move(cfg)), users(u),
        components{c, s, h, k, nullptr} {
    if (!config.now)
      config.now = [] {
        return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
            .count();
      };
    if (config.top_k == 0) throw Error(ErrorCode::invalid_argument, "top_k must be at least 1");
    if (!config.store_dir.empty()) {
      std::filesystem::create_directories(config.store_dir);
      load_store();
    }
  }

  bool remote() const { return constructor.config().kind == ConstructorKind::remote_chat; }

  // Candidates exclude the original history and everything currently in the
  // sequence.
  Ranker make_ranker(std::vector<ItemId> history) const {
    return [this, history = std::move(history)](std::span<const ItemId> seq) {
      std::unordered_set<ItemId> seen(history.begin(), history.end());
      seen.insert(seq.begin(), seq.end());
      std::vector<ItemId> candidates;
      candidates.reserve(catalog.size());
      for (const auto& item : catalog.items())
        if (!seen.contains(item.id)) candidates.push_back(item.id);
      if (candidates.empty()) throw Error(ErrorCode::invalid_argument, "no catalog item left to recommend");
      return score_items(srs, seq, candidates, std::nullopt);
    };
  }

  std::filesystem::path store_path(const std::string& id) const { return config.store_dir / (id + ".json"); }

  void persist(const Session& s) const {
    if (config.store_dir.empty()) return;
    json rounds = json::array();
    TraceJsonOptions opts;
    opts.include_timings = true;
    opts.top_n = SIZE_MAX;
    for (const auto& r : s.session->trace().rounds) rounds.push_back(to_json(r, opts));
    const json record = {{"session_id", s.id},         {"user_id", s.user_id},
                         {"config", s.config},         {"created_at", s.created_at},
                         {"updated_at", s.updated_at.load()}, {"rounds", rounds}};
    const auto path = store_path(s.id);
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error(ErrorCode::io, fmt::format("cannot write session store {}", tmp));
      out << record.dump() << '\n';
    }
    std::filesystem::rename(tmp, path);
  }

  void load_store() {
    const auto now = config.now();
    std::size_t loaded = 0;
    for (const auto& entry : std::filesystem::directory_iterator(config.store_dir)) {
      if (entry.path().extension() != ".json") continue;
      try {
        std::ifstream in(entry.path());
        const json record = json::parse(in);
        auto s = std::make_shared<Session>();
        s->id = record.at("session_id").get<std::string>();
        s->user_id = record.value("user_id", "");
        s->config = record.at("config");
        s->loop = s->config.at("loop").get<LoopConfig>();
        s->created_at = record.at("created_at").get<std::int64_t>();
        s->updated_at = record.at("updated_at").get<std::int64_t>();
        if (now - s->updated_at > config.ttl.count()) {
          std::filesystem::remove(entry.path());
          continue;
        }
        SessionTrace trace;
        trace.user_id = s->user_id;
        for (const auto& r : record.at("rounds")) trace.rounds.push_back(round_from_json(r));
        auto history = trace.rounds.at(0).input;
        s->session = std::make_unique<LoopSession>(components, s->loop, make_ranker(std::move(history)),
                                                   std::move(trace));
        sessions[s->id] = std::move(s);
        ++loaded;
      } catch (const std::exception& e) {
        spdlog::warn("skipping unreadable session record {}: {}", entry.path().string(), e.what());
      }
    }
    if (loaded) spdlog::info("restored {} sessions from {}", loaded, config.store_dir.string());
  }

  std::shared_ptr<Session> find(const std::string& id) {
    std::lock_guard lock(map_mutex);
    auto it = sessions.find(id);
    if (it == sessions.end()) return nullptr;
    if (config.now() - it->second->updated_at > config.ttl.count()) {
      drop_locked(id);
      return nullptr;
    }
    return it->second;
  }

  void drop_locked(const std::string& id) {
    sessions.erase(id);
    if (!config.store_dir.empty()) {
      std::error_code ec;
      std::filesystem::remove(store_path(id), ec);
    }
  }

  json recommendations_json(const Session& s) const {
    const auto& rounds = s.session->trace().rounds;
    const auto& current = rounds.back().ranking;
    const RankedResult* previous = rounds.size() > 1 ? &rounds[rounds.size() - 2].ranking : nullptr;
    json recs = json::array();
    for (std::size_t i = 0; i < current.ranking.size() && i < config.top_k; ++i) {
      const auto& scored = current.ranking[i];
      json r = item_json(catalog.at(scored.item));
      r["rank"] = i + 1;
      r["score"] = scored.score;
      r["rank_delta"] = nullptr;
      if (previous)
        if (auto prev = previous->rank_of(scored.item))
          r["rank_delta"] = static_cast<std::int64_t>(*prev) - static_cast<std::int64_t>(i + 1);
      recs.push_back(std::move(r));
    }
    json seq = json::array();
    for (const auto& id : s.session->sequence()) seq.push_back(item_json(catalog.at(id)));
    return {{"session_id", s.id},
            {"round", s.session->rounds_done()},
            {"recommendations", recs},
            {"sequence", seq}};
  }

  AttributeValue resolve_attribute(const json& side) const {
    std::string attribute, value;
    if (side.is_string()) {
      const auto text = side.get<std::string>();
      const auto eq = text.find('=');
      if (eq == std::string::npos)
        throw Error(ErrorCode::invalid_argument, fmt::format("expected attribute=value, got '{}'", text));
      attribute = text.substr(0, eq);
      value = text.substr(eq + 1);
    } else if (side.is_object()) {
      attribute = side.value("attribute", "");
      value = side.value("value", "");
    } else {
      throw Error(ErrorCode::invalid_argument, "feedback side must be an object or attribute=value");
    }
    const auto vocab = catalog.vocabulary();
    auto it = vocab.find(attribute);
    if (it == vocab.end()) it = vocab.find(lower(attribute));
    if (it == vocab.end())
      throw Error(ErrorCode::invalid_argument, fmt::format("unknown attribute '{}'", attribute), {attribute});
    for (const auto& v : it->second)
      if (lower(v) == lower(value)) return {it->first, v};
    throw Error(ErrorCode::invalid_argument, fmt::format("unknown {} value '{}'", it->first, value), {value});
  }

  Feedback parse_body(const json& body) const {
    if (!body.is_object()) throw Error(ErrorCode::invalid_argument, "feedback body must be an object");
    if (body.contains("text")) {
      const auto text = body["text"].get<std::string>();
      if (text.find_first_not_of(" \t\r\n") == std::string::npos)
        throw Error(ErrorCode::invalid_argument, "feedback text is empty");
      if (auto parsed = parse_feedback_text(text, catalog)) return *parsed;
      if (remote()) {
        Feedback raw;
        raw.raw_text = text;
        return raw;
      }
      throw Error(ErrorCode::invalid_argument,
                  "feedback names no known attribute value; raw feedback requires remote backend", {text});
    }
    std::optional<AttributeValue> dislike, prefer;
    if (body.contains("dislike") && !body["dislike"].is_null()) dislike = resolve_attribute(body["dislike"]);
    if (body.contains("prefer") && !body["prefer"].is_null()) prefer = resolve_attribute(body["prefer"]);
    if (!dislike && !prefer) throw Error(ErrorCode::invalid_argument, "feedback needs text, dislike or prefer");
    return structured_feedback(dislike, prefer);
  }

  ServiceResponse create(const json& body) {
    if (!body.is_object()) throw Error(ErrorCode::invalid_argument, "request body must be an object");
    std::vector<ItemId> history;
    std::string user_id;
    if (body.contains("history")) {
      std::vector<std::string> unknown;
      for (const auto& v : body["history"]) {
        ItemId id(v.is_string() ? v.get<std::string>() : v.dump());
        if (!catalog.contains(id)) unknown.push_back(id.str());
        history.push_back(std::move(id));
      }
      if (!unknown.empty())
        throw Error(ErrorCode::invalid_argument, fmt::format("{} history items are not in the catalog", unknown.size()),
                    unknown);
    } else if (body.contains("user_id")) {
      user_id = body["user_id"].get<std::string>();
      const auto* seq = users ? users->find_user(user_id) : nullptr;
      if (!seq) throw Error(ErrorCode::not_found, fmt::format("unknown user '{}'", user_id), {user_id});
      history = seq->item_ids();
    } else {
      throw Error(ErrorCode::invalid_argument, "body needs \"history\" or \"user_id\"");
    }
    if (history.size() < config.min_history)
      throw Error(ErrorCode::invalid_argument,
                  fmt::format("history needs at least {} items, got {}", config.min_history, history.size()));
    if (std::unordered_set<ItemId>(history.begin(), history.end()).size() != history.size())
      throw Error(ErrorCode::invalid_argument, "history contains duplicate items");

    json loop_json = config.loop;
    if (body.contains("config")) {
      if (!body["config"].is_object()) throw Error(ErrorCode::invalid_argument, "\"config\" must be an object");
      loop_json.update(body["config"]);
    }
    auto s = std::make_shared<Session>();
    s->id = new_session_id();
    s->user_id = user_id;
    s->loop = loop_json.get<LoopConfig>();
    s->config = {{"loop", json(s->loop)},
                 {"constructor", to_string(constructor.config().kind)},
                 {"max_replacements", constructor.config().max_replacements},
                 {"top_k", config.top_k}};
    s->created_at = config.now();
    s->updated_at = s->created_at;
    s->session = std::make_unique<LoopSession>(components, s->loop, history, make_ranker(history), std::nullopt,
                                               user_id);
    persist(*s);
    json out = recommendations_json(*s);
    {
      std::lock_guard lock(map_mutex);
      sessions[s->id] = s;
    }
    return {201, {{"session_id", s->id}, {"config", s->config}, {"round0", std::move(out)}}};
  }

  ServiceResponse feedback(const std::string& id, const json& body) {
    auto s = find(id);
    if (!s) throw Error(ErrorCode::not_found, fmt::format("unknown session '{}'", id), {id});
    std::unique_lock lock(s->mutex, std::try_to_lock);
    if (!lock.owns_lock())
      throw Error(ErrorCode::conflict, "another request is updating this session", {id});
    const Feedback fb = parse_body(body);
    const auto& rec = s->session->step(fb, "user");
    s->updated_at = config.now();
    persist(*s);
    if (rec.failed) {
      const auto code = rec.error_code.value_or(ErrorCode::backend);
      return error_response(http_status(code), to_string(code), rec.error, json{{"round", rec.round}});
    }
    json out = recommendations_json(*s);
    json masked = json::array();
    for (std::size_t i = 0; i < rec.masking->masked_positions.size(); ++i) {
      const auto pos = rec.masking->masked_positions[i];
      json m = item_json(catalog.at(rec.input[pos]));
      m["position"] = pos;
      m["score"] = rec.masking->report_scores[pos];
      masked.push_back(std::move(m));
    }
    json diff = json::array();
    for (auto pos : rec.pseudo->replaced_positions()) {
      diff.push_back({{"position", pos},
                      {"old", item_json(catalog.at(rec.pseudo->provenance[pos].old_item))},
                      {"new", item_json(catalog.at(rec.pseudo->items[pos]))}});
    }
    out["feedback"] = *rec.feedback;
    out["masking"] = {{"similarity", to_string(rec.masking->fn)}, {"masked", masked}};
    out["diff"] = diff;
    out["backend"] = rec.pseudo->backend;
    out["warnings"] = rec.pseudo->warnings;
    return {200, out};
  }

  ServiceResponse trace(const std::string& id) {
    auto s = find(id);
    if (!s) throw Error(ErrorCode::not_found, fmt::format("unknown session '{}'", id), {id});
    std::shared_lock lock(s->mutex);
    TraceJsonOptions opts;
    opts.include_timings = true;
    opts.top_n = config.top_k;
    json rounds = json::array();
    for (const auto& r : s->session->trace().rounds) rounds.push_back(to_json(r, opts));
    return {200, {{"session_id", s->id}, {"config", s->config}, {"rounds", rounds}}};
  }

  ServiceResponse recommendations(const std::string& id) {
    auto s = find(id);
    if (!s) throw Error(ErrorCode::not_found, fmt::format("unknown session '{}'", id), {id});
    std::shared_lock lock(s->mutex);
    return {200, recommendations_json(*s)};
  }

  ServiceResponse remove(const std::string& id) {
    auto s = find(id);
    if (!s) throw Error(ErrorCode::not_found, fmt::format("unknown session '{}'", id), {id});
    std::unique_lock lock(s->mutex, std::try_to_lock);
    if (!lock.owns_lock())
      throw Error(ErrorCode::conflict, "another request is updating this session", {id});
    std::lock_guard map_lock(map_mutex);
    drop_locked(id);
    return {200, {{"session_id", id}, {"deleted", true}}};
  }

  std::size_t purge() {
    std::lock_guard lock(map_mutex);
    const auto now = config.now();
    std::vector<std::string> expired;
    for (const auto& [id, s] : sessions)
      if (now - s->updated_at > config.ttl.count()) expired.push_back(id);
    for (const auto& id : expired) drop_locked(id);
    return expired.size();
  }
};

SessionService::SessionService(const Catalog& catalog, const SrsModel& srs, const EmbeddingTable& hybrid,
                               const PseudoConstructor& constructor, ServiceConfig config, const Dataset* users)
    : impl_(std::make_unique<Impl>(catalog, srs, hybrid, constructor, std::move(config), users)) {}

SessionService::~SessionService() = default;

namespace {

template <typename F>
ServiceResponse guarded(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    return error_response(e);
  } catch (const json::exception& e) {
    return error_response(400, "invalid_argument", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

}  // namespace

ServiceResponse SessionService::create_session(const json& body) {
  return guarded([&] {
    impl_->purge();
    return impl_->create(body);
  });
}

ServiceResponse SessionService::recommendations(const std::string& id) {
  return guarded([&] { return impl_->recommendations(id); });
}

ServiceResponse SessionService::submit_feedback(const std::string& id, const json& body) {
  return guarded([&] { return impl_->feedback(id, body); });
}

ServiceResponse SessionService::get_trace(const std::string& id) {
  return guarded([&] { return impl_->trace(id); });
}

ServiceResponse SessionService::delete_session(const std::string& id) {
  return guarded([&] { return impl_->remove(id); });
}

std::size_t SessionService::purge_expired() { return impl_->purge(); }

std::size_t SessionService::session_count() const {
  std::lock_guard lock(impl_->map_mutex);
  return impl_->sessions.size();
}

// ---------------------------------------------------------------------------
// HTTP binding

struct HttpServer::Impl {
  SessionService& service;
  httplib::Server server;

  explicit Impl(SessionService& s) : service(s) {
    auto reply = [](httplib::Response& res, const ServiceResponse& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    auto parse = [](const httplib::Request& req, json& out) -> std::optional<ServiceResponse> {
      if (req.body.empty()) {
        out = json::object();
        return std::nullopt;
      }
      out = json::parse(req.body, nullptr, false);
      if (out.is_discarded()) return error_response(400, "invalid_argument", "request body is not valid JSON");
      return std::nullopt;
    };
    auto checked_id = [](const std::string& id) -> std::optional<ServiceResponse> {
      if (valid_session_id(id)) return std::nullopt;
      return error_response(404, "not_found", fmt::format("unknown session '{}'", id), json::array({id}));
    };

    server.Get("/health", [reply](const httplib::Request&, httplib::Response& res) {
      reply(res, {200, {{"status", "ok"}}});
    });
    server.Post("/sessions", [this, reply, parse](const httplib::Request& req, httplib::Response& res) {
      json body;
      if (auto err = parse(req, body)) return reply(res, *err);
      reply(res, service.create_session(body));
    });
    server.Get(R"(/sessions/([^/]+)/recommendations)",
               [this, reply, checked_id](const httplib::Request& req, httplib::Response& res) {
                 const std::string id = req.matches[1];
                 if (auto err = checked_id(id)) return reply(res, *err);
                 reply(res, service.recommendations(id));
               });
    server.Post(R"(/sessions/([^/]+)/feedback)",
                [this, reply, parse, checked_id](const httplib::Request& req, httplib::Response& res) {
                  const std::string id = req.matches[1];
                  if (auto err = checked_id(id)) return reply(res, *err);
                  json body;
                  if (auto err = parse(req, body)) return reply(res, *err);
                  reply(res, service.submit_feedback(id, body));
                });
    server.Get(R"(/sessions/([^/]+)/trace)",
               [this, reply, checked_id](const httplib::Request& req, httplib::Response& res) {
                 const std::string id = req.matches[1];
                 if (auto err = checked_id(id)) return reply(res, *err);
                 reply(res, service.get_trace(id));
               });
    server.Delete(R"(/sessions/([^/]+))", [this, reply, checked_id](const httplib::Request& req,
                                                                    httplib::Response& res) {
      const std::string id = req.matches[1];
      if (auto err = checked_id(id)) return reply(res, *err);
      reply(res, service.delete_session(id));
    });
    server.set_error_handler([reply](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      if (res.status == 404) reply(res, error_response(404, "not_found", fmt::format("no route for {}", req.path)));
    });
  }
};

HttpServer::HttpServer(SessionService& service) : impl_(std::make_unique<Impl>(service)) {}
HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error(ErrorCode::io, fmt::format("cannot bind {}:{}", host, port));
  return bound;
}

void HttpServer::listen() {
  impl_->server.listen_after_bind();
}

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace cesrec
