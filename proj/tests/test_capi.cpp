#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <future>

#include <nlohmann/json.hpp>

#include "cesrec/cesrec.h"
#include "helpers.hpp"

using nlohmann::json;

namespace {

// Takes ownership of a library string.
std::string take(char* s) {
  std::string out = s ? s : "";
  cesrec_string_free(s);
  return out;
}

json take_json(char* s) { return json::parse(take(s)); }

struct Dataset {
  cesrec_dataset* p = nullptr;
  ~Dataset() { cesrec_dataset_free(p); }
};

struct Service {
  cesrec_service* p = nullptr;
  ~Service() { cesrec_service_free(p); }
};

const char* kSmallShift = R"({"users": 40, "genres": 4, "directors": 3, "seed": 5})";
const char* kSmallExperiment = R"({
  "seed": 3, "candidate_size": 30, "threads": 2,
  "srs": {"embed_dim": 8, "epochs": 3, "max_seq_len": 12, "batch_size": 64},
  "adapter": {"epochs": 5, "hidden_dim": 16}
})";

}  // namespace

TEST_CASE("status names and errors") {
  CHECK(std::string(cesrec_status_name(CESREC_OK)) == "ok");
  CHECK(std::string(cesrec_status_name(CESREC_NOT_FOUND)) == "not_found");
  CHECK_FALSE(std::string(cesrec_version()).empty());

  Dataset d;
  CHECK(cesrec_dataset_load_store("/nonexistent/store", &d.p) == CESREC_IO);
  CHECK(d.p == nullptr);
  CHECK_FALSE(std::string(cesrec_last_error()).empty());

  CHECK(cesrec_dataset_synthetic("mystery", nullptr, &d.p) == CESREC_INVALID_ARGUMENT);
  CHECK(cesrec_dataset_synthetic("cycle", "{broken", &d.p) == CESREC_INVALID_ARGUMENT);
  CHECK(cesrec_dataset_synthetic(nullptr, nullptr, &d.p) == CESREC_INVALID_ARGUMENT);
  CHECK(cesrec_set_log_level("loud") == CESREC_INVALID_ARGUMENT);
  CHECK(cesrec_set_log_level("warn") == CESREC_OK);
  CHECK(std::string(cesrec_last_error()).empty());
}

TEST_CASE("datasets through the C interface") {
  Dataset ml;
  REQUIRE(cesrec_dataset_load_movielens((testing::kFixtures / "movielens" / "ratings.dat").c_str(),
                                        (testing::kFixtures / "movielens" / "movies.dat").c_str(), &ml.p) == CESREC_OK);
  char* out = nullptr;
  REQUIRE(cesrec_dataset_summary(ml.p, &out) == CESREC_OK);
  const auto summary = take_json(out);
  CHECK(summary.at("users") == 3);
  CHECK(summary.at("events") == 12);

  testing::TempDir dir;
  REQUIRE(cesrec_dataset_save_store(ml.p, (dir / "store").c_str()) == CESREC_OK);
  Dataset back;
  REQUIRE(cesrec_dataset_load_store((dir / "store").c_str(), &back.p) == CESREC_OK);
  REQUIRE(cesrec_dataset_summary(back.p, &out) == CESREC_OK);
  CHECK(take_json(out) == summary);

  Dataset cyc;
  REQUIRE(cesrec_dataset_synthetic("cycle", R"({"items": 30, "users": 20})", &cyc.p) == CESREC_OK);
  REQUIRE(cesrec_dataset_summary(cyc.p, &out) == CESREC_OK);
  CHECK(take_json(out).at("items") == 30);

  CHECK(cesrec_dataset_sample_candidates(ml.p, "1", 5, 9, &out) == CESREC_INVALID_ARGUMENT);
  CHECK(std::string(cesrec_last_error()).find("catalog too small") != std::string::npos);
  REQUIRE(cesrec_dataset_sample_candidates(ml.p, "1", 3, 9, &out) == CESREC_OK);
  const auto cands = take_json(out);
  CHECK(cands.at("candidates").size() == 3);
  CHECK(cands.at("target_index").get<std::size_t>() < cands.at("candidates").size());
  CHECK(cesrec_dataset_sample_candidates(ml.p, "nobody", 5, 9, &out) == CESREC_NOT_FOUND);
  CHECK(json::parse(cesrec_last_error_details()) == json::array({"nobody"}));
}

TEST_CASE("training pipeline and service") {
  testing::TempDir dir;
  Dataset d;
  REQUIRE(cesrec_dataset_synthetic("preference-shift", kSmallShift, &d.p) == CESREC_OK);
  char* out = nullptr;

  REQUIRE(cesrec_embed_catalog(d.p, nullptr, (dir / "cache").c_str(), (dir / "semantic.emb").c_str(), &out) == CESREC_OK);
  const auto stats = take_json(out);
  CHECK(stats.at("provider_calls").get<int>() > 0);
  REQUIRE(cesrec_embed_catalog(d.p, nullptr, (dir / "cache").c_str(), (dir / "semantic2.emb").c_str(), &out) == CESREC_OK);
  const auto again = take_json(out);
  CHECK(again.at("provider_calls") == 0);
  CHECK(again.at("cache_hits") == stats.at("rows"));
  CHECK(testing::slurp(dir / "semantic.emb") == testing::slurp(dir / "semantic2.emb"));

  REQUIRE(cesrec_train_srs(d.p, R"({"embed_dim": 8, "epochs": 3, "max_seq_len": 12})", (dir / "srs.ckpt").c_str(), &out) ==
          CESREC_OK);
  CHECK(take_json(out).at("loss_curve").size() == 3);
  CHECK(cesrec_train_srs(d.p, R"({"embed_dim": 0})", (dir / "bad.ckpt").c_str(), &out) == CESREC_INVALID_ARGUMENT);

  REQUIRE(cesrec_srs_rank((dir / "srs.ckpt").c_str(), R"(["1", "2"])", nullptr, 4, &out) == CESREC_OK);
  const auto ranked = take_json(out);
  REQUIRE(ranked.size() == 4);
  for (const auto& r : ranked) CHECK((r.at("item") != "1" && r.at("item") != "2"));
  CHECK(cesrec_srs_rank((dir / "srs.ckpt").c_str(), R"(["no-such-item"])", nullptr, 4, &out) == CESREC_NOT_FOUND);

  REQUIRE(cesrec_train_adapter((dir / "semantic.emb").c_str(), (dir / "srs.ckpt").c_str(), R"({"epochs": 4})",
                               (dir / "adapter.ckpt").c_str(), &out) == CESREC_OK);
  const auto adapter = take_json(out);
  CHECK(adapter.at("final_loss").get<double>() < adapter.at("initial_loss").get<double>());

  REQUIRE(cesrec_generate_tuning(d.p, 1, 3, (dir / "tuning.jsonl").c_str(), &out) == CESREC_OK);
  CHECK(take_json(out).at("records").get<int>() > 0);

  REQUIRE(cesrec_run_eval(d.p, kSmallExperiment, "baseline,full", (dir / "ckpt").c_str(), (dir / "out").c_str(), 0,
                          &out) == CESREC_OK);
  const auto report = take_json(out);
  CHECK(report.at("reports").size() == 2);
  CHECK(std::filesystem::exists(dir / "out" / "report.jsonl"));
  CHECK(cesrec_run_eval(d.p, kSmallExperiment, "baseline,magic", nullptr, nullptr, 0, &out) == CESREC_INVALID_ARGUMENT);

  Service svc;
  REQUIRE(cesrec_service_create(d.p, (dir / "ckpt").c_str(), R"({"top_k": 3})", &svc.p) == CESREC_OK);
  int status = 0;
  REQUIRE(cesrec_service_handle(svc.p, "POST", "/sessions", R"({"history": ["1", "2", "3"]})", &status, &out) ==
          CESREC_OK);
  CHECK(status == 201);
  const auto created = take_json(out);
  const auto id = created.at("session_id").get<std::string>();
  CHECK(created.at("round0").at("recommendations").size() == 3);

  REQUIRE(cesrec_service_handle(svc.p, "GET", ("/sessions/" + id + "/trace").c_str(), nullptr, &status, &out) ==
          CESREC_OK);
  CHECK(status == 200);
  CHECK(take_json(out).at("rounds").size() == 1);
  REQUIRE(cesrec_service_handle(svc.p, "GET", "/elsewhere", nullptr, &status, &out) == CESREC_OK);
  CHECK(status == 404);
  take(out);
  REQUIRE(cesrec_service_handle(svc.p, "POST", "/sessions", "{nope", &status, &out) == CESREC_OK);
  CHECK(status == 400);
  take(out);
  REQUIRE(cesrec_service_handle(svc.p, "DELETE", ("/sessions/" + id).c_str(), nullptr, &status, &out) == CESREC_OK);
  CHECK(status == 200);
  take(out);

  int port = 0;
  REQUIRE(cesrec_service_bind(svc.p, "127.0.0.1", 0, &port) == CESREC_OK);
  CHECK(port > 0);
  auto loop = std::async(std::launch::async, [&] { return cesrec_service_listen(svc.p); });
  // A stop that lands before the listener starts is a no-op, so repeat it.
  do CHECK(cesrec_service_stop(svc.p) == CESREC_OK);
  while (loop.wait_for(std::chrono::milliseconds(20)) != std::future_status::ready);
  CHECK(loop.get() == CESREC_OK);

  Service missing;
  CHECK(cesrec_service_create(d.p, (dir / "nowhere").c_str(), nullptr, &missing.p) != CESREC_OK);
  CHECK(missing.p == nullptr);
}
