#include "cesrec/cesrec.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <nlohmann/json.hpp>

#include "cesrec/alignment.hpp"
#include "cesrec/chat.hpp"
#include "cesrec/constructor.hpp"
#include "cesrec/data.hpp"
#include "cesrec/error.hpp"
#include "cesrec/eval.hpp"
#include "cesrec/semantic.hpp"
#include "cesrec/service.hpp"
#include "cesrec/srs.hpp"

using nlohmann::json;

struct cesrec_dataset {
  cesrec::Dataset dataset;
};

struct cesrec_service {
  cesrec::Dataset dataset;
  std::unique_ptr<cesrec::SrsModel> srs;
  std::unique_ptr<cesrec::EmbeddingTable> hybrid;
  std::unique_ptr<cesrec::ChatClient> chat;
  std::unique_ptr<cesrec::EmbeddingProvider> title_provider;
  std::unique_ptr<cesrec::TitleMatcher> matcher;
  std::unique_ptr<cesrec::PseudoConstructor> constructor;
  std::unique_ptr<cesrec::SessionService> service;
  std::unique_ptr<cesrec::HttpServer> http;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_details = "[]";

cesrec_status to_status(cesrec::ErrorCode code) {
  using cesrec::ErrorCode;
  switch (code) {
    case ErrorCode::invalid_argument: return CESREC_INVALID_ARGUMENT;
    case ErrorCode::io: return CESREC_IO;
    case ErrorCode::format: return CESREC_FORMAT;
    case ErrorCode::not_found: return CESREC_NOT_FOUND;
    case ErrorCode::numeric: return CESREC_NUMERIC;
    case ErrorCode::backend: return CESREC_BACKEND;
    case ErrorCode::conflict: return CESREC_CONFLICT;
  }
  return CESREC_INTERNAL;
}

cesrec_status fail(cesrec_status status, std::string message, json details = json::array()) {
  g_error = std::move(message);
  g_details = details.dump();
  return status;
}

template <typename F>
cesrec_status guard(F&& f) {
  g_error.clear();
  g_details = "[]";
  try {
    f();
    return CESREC_OK;
  } catch (const cesrec::Error& e) {
    return fail(to_status(e.code()), e.what(), e.details());
  } catch (const json::exception& e) {
    return fail(CESREC_INVALID_ARGUMENT, fmt::format("invalid JSON argument: {}", e.what()));
  } catch (const std::bad_alloc&) {
    return fail(CESREC_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(CESREC_INTERNAL, e.what());
  }
}

void require(const void* p, const char* name) {
  if (!p) throw cesrec::Error(cesrec::ErrorCode::invalid_argument, fmt::format("{} must not be NULL", name));
}

json parse_json(const char* text, json fallback = json::object()) {
  if (!text || !*text) return fallback;
  return json::parse(text);
}

void put_string(char** out, const std::string& s) {
  if (!out) return;
  char* buf = static_cast<char*>(std::malloc(s.size() + 1));
  if (!buf) throw std::bad_alloc();
  std::memcpy(buf, s.c_str(), s.size() + 1);
  *out = buf;
}

std::vector<cesrec::ItemId> ids_from_json(const json& j) {
  std::vector<cesrec::ItemId> ids;
  for (const auto& v : j) ids.emplace_back(v.is_string() ? v.get<std::string>() : v.dump());
  return ids;
}

cesrec::ExperimentConfig experiment_from_json(const json& j) { return j.get<cesrec::ExperimentConfig>(); }

}  // namespace

extern "C" {

const char* cesrec_version(void) { return "0.1.0"; }

const char* cesrec_status_name(cesrec_status status) {
  switch (status) {
    case CESREC_OK: return "ok";
    case CESREC_INVALID_ARGUMENT: return "invalid_argument";
    case CESREC_IO: return "io";
    case CESREC_FORMAT: return "format";
    case CESREC_NOT_FOUND: return "not_found";
    case CESREC_NUMERIC: return "numeric";
    case CESREC_BACKEND: return "backend";
    case CESREC_CONFLICT: return "conflict";
    case CESREC_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* cesrec_last_error(void) { return g_error.c_str(); }
const char* cesrec_last_error_details(void) { return g_details.c_str(); }
void cesrec_string_free(char* s) { std::free(s); }

cesrec_status cesrec_set_log_level(const char* level) {
  return guard([&] {
    require(level, "level");
    const auto parsed = spdlog::level::from_str(level);
    if (parsed == spdlog::level::off && std::strcmp(level, "off") != 0)
      throw cesrec::Error(cesrec::ErrorCode::invalid_argument, fmt::format("unknown log level '{}'", level));
    spdlog::set_level(parsed);
  });
}

// ---- data ------------------------------------------------------------------

cesrec_status cesrec_dataset_load_movielens(const char* ratings_path, const char* movies_path,
                                            cesrec_dataset** out) {
  return guard([&] {
    require(ratings_path, "ratings_path");
    require(movies_path, "movies_path");
    require(out, "out");
    *out = new cesrec_dataset{cesrec::load_movielens(ratings_path, movies_path)};
  });
}

cesrec_status cesrec_dataset_load_amazon(const char* reviews_path, const char* metadata_path, cesrec_dataset** out) {
  return guard([&] {
    require(reviews_path, "reviews_path");
    require(metadata_path, "metadata_path");
    require(out, "out");
    *out = new cesrec_dataset{cesrec::load_amazon(reviews_path, metadata_path)};
  });
}

cesrec_status cesrec_dataset_load_store(const char* path, cesrec_dataset** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new cesrec_dataset{cesrec::load_store(path)};
  });
}

cesrec_status cesrec_dataset_synthetic(const char* kind, const char* config_json, cesrec_dataset** out) {
  return guard([&] {
    require(kind, "kind");
    require(out, "out");
    const json cfg = parse_json(config_json);
    const std::string k = kind;
    if (k == "preference-shift") {
      cesrec::PreferenceShiftConfig c;
      c.users = cfg.value("users", c.users);
      c.genres = cfg.value("genres", c.genres);
      c.directors = cfg.value("directors", c.directors);
      c.items_per_cell = cfg.value("items_per_cell", c.items_per_cell);
      c.min_history = cfg.value("min_history", c.min_history);
      c.max_history = cfg.value("max_history", c.max_history);
      c.mixed_user_share = cfg.value("mixed_user_share", c.mixed_user_share);
      c.secondary_rate = cfg.value("secondary_rate", c.secondary_rate);
      c.inject_outlier = cfg.value("inject_outlier", c.inject_outlier);
      c.seed = cfg.value("seed", c.seed);
      *out = new cesrec_dataset{cesrec::make_preference_shift_dataset(c)};
    } else if (k == "cycle") {
      cesrec::CycleConfig c;
      c.items = cfg.value("items", c.items);
      c.users = cfg.value("users", c.users);
      c.min_length = cfg.value("min_length", c.min_length);
      c.max_length = cfg.value("max_length", c.max_length);
      c.filler_items = cfg.value("filler_items", c.filler_items);
      c.seed = cfg.value("seed", c.seed);
      *out = new cesrec_dataset{cesrec::make_cycle_dataset(c)};
    } else if (k == "case-study") {
      auto fx = cesrec::make_case_study_fixture(cfg.value("training_users", std::size_t{800}),
                                                cfg.value("seed", std::uint64_t{5}));
      *out = new cesrec_dataset{std::move(fx.dataset)};
    } else {
      throw cesrec::Error(cesrec::ErrorCode::invalid_argument,
                          fmt::format("unknown synthetic dataset '{}' (preference-shift, cycle, case-study)", k));
    }
  });
}

cesrec_status cesrec_dataset_save_store(const cesrec_dataset* dataset, const char* path) {
  return guard([&] {
    require(dataset, "dataset");
    require(path, "path");
    cesrec::save_store(dataset->dataset, path);
  });
}

cesrec_status cesrec_dataset_summary(const cesrec_dataset* dataset, char** json_out) {
  return guard([&] {
    require(dataset, "dataset");
    const auto& d = dataset->dataset;
    std::size_t placeholders = 0;
    for (const auto& item : d.catalog.items()) placeholders += item.placeholder;
    const json j = {{"items", d.catalog.size()},
                    {"users", d.sequences.size()},
                    {"events", d.event_count()},
                    {"schema", d.catalog.attribute_schema()},
                    {"report",
                     {{"skipped_lines", d.report.skipped_lines},
                      {"unknown_item_events", d.report.unknown_item_events},
                      {"placeholder_items", placeholders},
                      {"warnings", d.report.warnings}}}};
    put_string(json_out, j.dump());
  });
}

cesrec_status cesrec_dataset_sample_candidates(const cesrec_dataset* dataset, const char* user_id,
                                               size_t candidate_size, uint64_t seed, char** json_out) {
  return guard([&] {
    require(dataset, "dataset");
    require(user_id, "user_id");
    const auto* seq = dataset->dataset.find_user(user_id);
    if (!seq) throw cesrec::Error(cesrec::ErrorCode::not_found, fmt::format("unknown user '{}'", user_id), {user_id});
    const auto history = seq->item_ids();
    if (history.empty()) throw cesrec::Error(cesrec::ErrorCode::invalid_argument, "user has no interactions");
    const auto set = cesrec::sample_candidates(history, dataset->dataset.catalog, history.back(), candidate_size, seed);
    json ids = json::array();
    for (const auto& id : set.candidates) ids.push_back(id.str());
    put_string(json_out, json{{"candidates", ids}, {"target_index", set.target_index}, {"seed", set.seed}}.dump());
  });
}

void cesrec_dataset_free(cesrec_dataset* dataset) { delete dataset; }

// ---- semantic ----------------------------------------------------------------

cesrec_status cesrec_embed_catalog(const cesrec_dataset* dataset, const char* provider_json, const char* cache_path,
                                   const char* out_path, char** stats_json) {
  return guard([&] {
    require(dataset, "dataset");
    require(out_path, "out_path");
    auto provider = cesrec::make_embedding_provider(parse_json(provider_json, json{{"kind", "mock-attribute"}}));
    cesrec::EmbedStats stats;
    const auto table = cache_path && *cache_path
                           ? cesrec::embed_catalog(dataset->dataset.catalog, *provider, cache_path, &stats)
                           : cesrec::embed_catalog(dataset->dataset.catalog, *provider);
    if (!(cache_path && *cache_path)) stats.texts_embedded = table.size();
    cesrec::save_embedding_table(table, out_path);
    put_string(stats_json, json{{"rows", table.size()},
                                {"dim", table.dim()},
                                {"provider", provider->identity()},
                                {"provider_calls", stats.provider_calls},
                                {"texts_embedded", stats.texts_embedded},
                                {"cache_hits", stats.cache_hits},
                                {"corrupt_entries", stats.corrupt_entries}}
                               .dump());
  });
}

// ---- srs -----------------------------------------------------------------------

cesrec_status cesrec_train_srs(const cesrec_dataset* dataset, const char* config_json, const char* out_path,
                               char** summary_json) {
  return guard([&] {
    require(dataset, "dataset");
    require(out_path, "out_path");
    const json cfg = parse_json(config_json);
    const auto config = cfg.get<cesrec::SrsConfig>();
    const auto min_length = cfg.value("min_length", cesrec::kDefaultMinLength);
    const auto triples = cesrec::leave_one_out_split(dataset->dataset.sequences, min_length);
    json losses = json::array();
    cesrec::SrsTrainHooks hooks;
    hooks.on_epoch = [&](std::size_t epoch, double loss) {
      losses.push_back(loss);
      spdlog::debug("epoch {} loss {:.5f}", epoch, loss);
    };
    const auto model = cesrec::train_srs(triples, dataset->dataset.catalog, config, hooks);
    cesrec::save_srs(model, out_path);
    put_string(summary_json, json{{"users", triples.size()}, {"epochs", losses.size()}, {"loss_curve", losses},
                                  {"config", model.config()}}
                                 .dump());
  });
}

cesrec_status cesrec_srs_rank(const char* checkpoint_path, const char* sequence_json, const char* candidates_json,
                              size_t top_n, char** json_out) {
  return guard([&] {
    require(checkpoint_path, "checkpoint_path");
    require(sequence_json, "sequence_json");
    const auto model = cesrec::load_srs(checkpoint_path);
    const auto sequence = ids_from_json(json::parse(sequence_json));
    std::vector<cesrec::ItemId> candidates;
    if (candidates_json && *candidates_json) {
      candidates = ids_from_json(json::parse(candidates_json));
    } else {
      std::unordered_set<cesrec::ItemId> seen(sequence.begin(), sequence.end());
      for (const auto& id : model.vocabulary())
        if (!seen.contains(id)) candidates.push_back(id);
    }
    const auto ranked = cesrec::score_items(model, sequence, candidates, std::nullopt);
    json out = json::array();
    for (std::size_t i = 0; i < ranked.ranking.size() && (top_n == 0 || i < top_n); ++i)
      out.push_back({{"item", ranked.ranking[i].item.str()}, {"score", ranked.ranking[i].score}});
    put_string(json_out, out.dump());
  });
}

// ---- adapter -------------------------------------------------------------------

cesrec_status cesrec_train_adapter(const char* semantic_path, const char* srs_checkpoint, const char* hyper_json,
                                   const char* out_path, char** summary_json) {
  return guard([&] {
    require(semantic_path, "semantic_path");
    require(srs_checkpoint, "srs_checkpoint");
    require(out_path, "out_path");
    const auto semantic = cesrec::load_embedding_table(semantic_path);
    const auto collab = cesrec::export_collaborative_embeddings(cesrec::load_srs(srs_checkpoint));
    const auto hyper = experiment_from_json(json{{"adapter", parse_json(hyper_json)}}).adapter;
    const auto adapter = cesrec::train_adapter(semantic, collab, hyper);
    cesrec::save_adapter(adapter, out_path);
    const double initial = adapter.loss_curve.empty() ? 0.0 : adapter.loss_curve.front();
    put_string(summary_json, json{{"items", semantic.size()},
                                  {"input_dim", adapter.input_dim()},
                                  {"output_dim", adapter.output_dim()},
                                  {"epochs", adapter.epochs},
                                  {"initial_loss", initial},
                                  {"final_loss", adapter.final_loss()}}
                                 .dump());
  });
}

// ---- constructor ---------------------------------------------------------------

cesrec_status cesrec_generate_tuning(const cesrec_dataset* dataset, size_t per_user, uint64_t seed,
                                     const char* out_path, char** summary_json) {
  return guard([&] {
    require(dataset, "dataset");
    require(out_path, "out_path");
    const auto triples = cesrec::leave_one_out_split(dataset->dataset.sequences);
    const auto result = cesrec::generate_tuning_data(triples, dataset->dataset.catalog, per_user, seed);
    cesrec::write_tuning_jsonl(result.records, out_path);
    put_string(summary_json,
               json{{"records", result.records.size()}, {"skipped_users", result.skipped_users}}.dump());
  });
}

// ---- eval ----------------------------------------------------------------------

cesrec_status cesrec_run_eval(const cesrec_dataset* dataset, const char* experiment_json, const char* variants_csv,
                              const char* checkpoint_dir, const char* out_dir, int run_sweeps, char** report_json) {
  return guard([&] {
    require(dataset, "dataset");
    const auto config = experiment_from_json(parse_json(experiment_json));
    std::vector<std::string> variants;
    if (variants_csv && *variants_csv) {
      std::stringstream ss(variants_csv);
      for (std::string v; std::getline(ss, v, ',');)
        if (!v.empty()) variants.push_back(v);
    } else {
      variants = cesrec::kVariants;
    }
    for (const auto& v : variants) cesrec::variant_loop(v, config.loop);
    const auto exp = cesrec::prepare_experiment(dataset->dataset, config,
                                                checkpoint_dir ? std::filesystem::path(checkpoint_dir) : std::filesystem::path{});
    const std::filesystem::path out = out_dir ? out_dir : "";
    const auto results = cesrec::run_table(exp, variants, out);
    json reports = json::array();
    std::vector<cesrec::MetricReport> rows;
    for (const auto& r : results) {
      reports.push_back(r.report);
      rows.push_back(r.report);
    }
    json j = {{"reports", reports}, {"table", cesrec::render_table(rows)}, {"prepare_seconds", exp.prepare_seconds}};
    if (run_sweeps) {
      json sweeps = json::array();
      for (const auto& p : cesrec::run_sweeps(exp, out))
        sweeps.push_back({{"sweep", p.sweep}, {"point", p.point}, {"variant", p.variant}, {"report", p.report}});
      j["sweeps"] = sweeps;
    }
    put_string(report_json, j.dump());
  });
}

// ---- service -------------------------------------------------------------------

cesrec_status cesrec_service_create(const cesrec_dataset* dataset, const char* checkpoint_dir, const char* options_json,
                                    cesrec_service** out) {
  return guard([&] {
    require(dataset, "dataset");
    require(checkpoint_dir, "checkpoint_dir");
    require(out, "out");
    const json opts = parse_json(options_json);
    const std::filesystem::path dir = checkpoint_dir;
    auto s = std::make_unique<cesrec_service>();
    s->dataset = dataset->dataset;
    s->srs = std::make_unique<cesrec::SrsModel>(cesrec::load_srs(dir / "srs.ckpt"));
    const auto adapter = cesrec::load_adapter(dir / "adapter.ckpt");
    s->hybrid = std::make_unique<cesrec::EmbeddingTable>(
        cesrec::build_hybrid_table(adapter, cesrec::load_embedding_table(dir / "semantic.emb")));
    const std::unordered_set<cesrec::ItemId> srs_items(s->srs->vocabulary().begin(), s->srs->vocabulary().end());
    std::vector<std::string> missing;
    for (const auto& item : s->dataset.catalog.items())
      if (!s->hybrid->contains(item.id) || !srs_items.contains(item.id)) missing.push_back(item.id.str());
    if (!missing.empty())
      throw cesrec::Error(cesrec::ErrorCode::invalid_argument,
                          fmt::format("{} catalog items lack checkpoint embeddings", missing.size()), missing);

    cesrec::ConstructorConfig cc;
    cc.kind = cesrec::parse_constructor_kind(opts.value("constructor", std::string("rule-based")));
    cc.max_replacements = opts.value("max_replacements", cc.max_replacements);
    if (cc.kind == cesrec::ConstructorKind::remote_chat) {
      const json chat = opts.value("chat", json::object());
      cc.decoding = cesrec::chat_options_from_json(chat);
      s->chat = std::make_unique<cesrec::HttpChatClient>(cesrec::chat_endpoint_from_json(chat));
      s->title_provider = cesrec::make_embedding_provider(opts.value("title_provider", json{{"kind", "mock-hash"}}));
      s->matcher = std::make_unique<cesrec::TitleMatcher>(s->dataset.catalog, *s->title_provider);
    }
    s->constructor =
        std::make_unique<cesrec::PseudoConstructor>(cc, s->dataset.catalog, *s->hybrid, s->chat.get(), s->matcher.get());

    cesrec::ServiceConfig sc;
    sc.store_dir = opts.value("store_dir", std::string());
    sc.ttl = std::chrono::seconds(opts.value("ttl_s", std::int64_t{24 * 3600}));
    sc.top_k = opts.value("top_k", sc.top_k);
    if (opts.contains("loop")) sc.loop = opts["loop"].get<cesrec::LoopConfig>();
    s->service = std::make_unique<cesrec::SessionService>(s->dataset.catalog, *s->srs, *s->hybrid, *s->constructor,
                                                          sc, &s->dataset);
    *out = s.release();
  });
}

cesrec_status cesrec_service_handle(cesrec_service* service, const char* method, const char* path, const char* body,
                                    int* http_status, char** response_json) {
  return guard([&] {
    require(service, "service");
    require(method, "method");
    require(path, "path");
    const std::string m = method;
    std::string p = path;
    while (p.size() > 1 && p.back() == '/') p.pop_back();
    std::vector<std::string> parts;
    {
      std::stringstream ss(p);
      for (std::string part; std::getline(ss, part, '/');)
        if (!part.empty()) parts.push_back(part);
    }
    json payload = json::object();
    if (body && *body) {
      payload = json::parse(body, nullptr, false);
      if (payload.is_discarded())
        payload = nullptr;
    }
    cesrec::ServiceResponse r;
    auto& svc = *service->service;
    if (payload.is_null()) {
      r = {400, {{"code", "invalid_argument"}, {"message", "request body is not valid JSON"}, {"details", json::array()}}};
    } else if (parts.size() == 1 && parts[0] == "sessions" && m == "POST") {
      r = svc.create_session(payload);
    } else if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "recommendations" && m == "GET") {
      r = svc.recommendations(parts[1]);
    } else if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "feedback" && m == "POST") {
      r = svc.submit_feedback(parts[1], payload);
    } else if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "trace" && m == "GET") {
      r = svc.get_trace(parts[1]);
    } else if (parts.size() == 2 && parts[0] == "sessions" && m == "DELETE") {
      r = svc.delete_session(parts[1]);
    } else if (parts.size() == 1 && parts[0] == "health" && m == "GET") {
      r = {200, {{"status", "ok"}}};
    } else {
      r = {404, {{"code", "not_found"}, {"message", fmt::format("no route for {} {}", m, p)}, {"details", json::array()}}};
    }
    if (http_status) *http_status = r.status;
    put_string(response_json, r.body.dump());
  });
}

cesrec_status cesrec_service_bind(cesrec_service* service, const char* host, int port, int* bound_port) {
  return guard([&] {
    require(service, "service");
    if (!service->http) service->http = std::make_unique<cesrec::HttpServer>(*service->service);
    const int bound = service->http->bind(host ? host : "127.0.0.1", port);
    if (bound_port) *bound_port = bound;
  });
}

cesrec_status cesrec_service_listen(cesrec_service* service) {
  return guard([&] {
    require(service, "service");
    if (!service->http) throw cesrec::Error(cesrec::ErrorCode::invalid_argument, "call cesrec_service_bind first");
    service->http->listen();
  });
}

cesrec_status cesrec_service_stop(cesrec_service* service) {
  return guard([&] {
    require(service, "service");
    if (service->http) service->http->stop();
  });
}

void cesrec_service_free(cesrec_service* service) { delete service; }

}  // extern "C"
