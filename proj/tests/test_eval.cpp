#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "cesrec/error.hpp"
#include "cesrec/eval.hpp"
#include "cesrec/semantic.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace cesrec;
using testing::id;

namespace {

RankedResult at_rank(std::size_t rank) {
  RankedResult r;
  r.target_rank = rank;
  return r;
}

// Scores candidates by cosine to the mean hybrid vector of the sequence.
struct ContentRanker {
  const EmbeddingTable& table;
  std::vector<ItemId> candidates;
  std::optional<ItemId> target;

  RankedResult operator()(std::span<const ItemId> seq) const {
    const Vector u = fuse_user(seq, table);
    const std::span<const double> us(u.data(), static_cast<std::size_t>(u.size()));
    std::vector<ScoredItem> scored;
    for (const auto& c : candidates) scored.push_back({c, similarity(table.row(c), us, SimilarityFn::cosine).raw});
    return rank_items(std::move(scored), target);
  }
};

// Three comedies and a stray drama watched, the next one is horror.
struct ShiftWorld {
  Catalog catalog = testing::genre_catalog({"Comedy", "Horror", "Drama"}, 8);
  EmbeddingTable hybrid;
  SrsModel srs;
  PseudoConstructor constructor;
  FeedbackSimulator simulator;
  std::vector<ItemId> history = testing::ids({"Comedy0", "Comedy1", "Drama0", "Comedy2"});
  ItemId target = id("Horror5");

  static std::vector<ItemId> vocab(const Catalog& c) {
    std::vector<ItemId> v;
    for (const auto& item : c.items()) v.push_back(item.id);
    return v;
  }
  static EmbeddingTable embed(const Catalog& c) {
    MockAttributeProvider p;
    return embed_catalog(c, p);
  }
  static SrsConfig tiny() {
    SrsConfig s;
    s.embed_dim = 4;
    return s;
  }

  ShiftWorld()
      : hybrid(embed(catalog)),
        srs(tiny(), vocab(catalog)),
        constructor(ConstructorConfig{}, catalog, hybrid),
        simulator(catalog, SimulatorMode::deterministic) {}

  Components components() const { return {catalog, srs, hybrid, constructor, &simulator}; }
  Ranker ranker() const {
    return ContentRanker{hybrid, testing::ids({"Horror5", "Comedy6", "Comedy7", "Drama1", "Drama2", "Drama3"}), target};
  }
};

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.dataset = "preference-shift";
  cfg.seed = 3;
  cfg.candidate_size = 40;
  cfg.srs.embed_dim = 8;
  cfg.srs.epochs = 4;
  cfg.srs.max_seq_len = 12;
  cfg.srs.batch_size = 64;
  cfg.adapter.epochs = 5;
  cfg.adapter.hidden_dim = 16;
  cfg.threads = 2;
  return cfg;
}

Dataset small_dataset() {
  PreferenceShiftConfig p;
  p.users = 40;
  p.genres = 4;
  p.directors = 3;
  return make_preference_shift_dataset(p);
}

}  // namespace

TEST_CASE("metrics against the brute-force oracle") {
  CHECK(hr_at_k(at_rank(1), 5) == 1.0);
  CHECK(ndcg_at_k(at_rank(1), 5) == 1.0);
  CHECK(hr_at_k(at_rank(3), 5) == 1.0);
  CHECK(ndcg_at_k(at_rank(3), 5) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(hr_at_k(at_rank(7), 5) == 0.0);
  CHECK(ndcg_at_k(at_rank(7), 5) == 0.0);

  std::mt19937_64 rng(200);
  for (int i = 0; i < 200; ++i) {
    const std::size_t rank = 1 + rng() % 100;
    for (std::size_t k : {5u, 10u}) {
      CHECK(hr_at_k(at_rank(rank), k) == oracle::hit_rate(rank, k));
      CHECK(ndcg_at_k(at_rank(rank), k) == oracle::ndcg(rank, k));
    }
    const auto m = MetricValues::of(at_rank(rank));
    CHECK(m.hr5 <= m.hr10);
    CHECK(m.ndcg5 <= m.ndcg10);
    CHECK(m.ndcg5 <= m.hr5);
    CHECK(m.ndcg10 <= m.hr10);
  }
  RankedResult none;
  CHECK_THROWS_AS(hr_at_k(none, 5), Error);
  CHECK(hr_at_k(at_rank(1), 0) == 0.0);
}

TEST_CASE("metric aggregation") {
  auto sum = MetricValues::of(at_rank(1));
  sum += MetricValues::of(at_rank(8));
  const auto mean = sum.scaled(0.5);
  CHECK(mean.hr5 == 0.5);
  CHECK(mean.hr10 == 1.0);
  CHECK(mean.ndcg10 == doctest::Approx((1.0 + oracle::ndcg(8, 10)) / 2));
}

TEST_CASE("loop session over a preference shift") {
  ShiftWorld w;
  LoopConfig cfg;
  cfg.accept_k = 1;
  LoopSession s(w.components(), cfg, w.history, w.ranker(), w.target, "viewer");
  const auto before = *s.trace().rounds[0].ranking.target_rank;

  const auto& r1 = s.step(structured_feedback(AttributeValue{"genre", "Comedy"}, AttributeValue{"genre", "Horror"}));
  REQUIRE_FALSE(r1.failed);
  CHECK(r1.masking->masked_positions == std::vector<std::size_t>{2});
  REQUIRE(r1.pseudo);
  CHECK(r1.pseudo->items.size() == w.history.size() - 1);
  const auto after = *r1.ranking.target_rank;
  CHECK(after < before);
  CHECK(s.rounds_done() == 1);

  s.step_simulated();
  s.step_simulated();
  const auto& trace = s.trace();
  CHECK(trace.rounds.size() == 4);
  CHECK(check_trace_chaining(trace));
  CHECK(*trace.rounds.back().ranking.target_rank <= after);
  for (std::size_t r = 1; r < trace.rounds.size(); ++r) CHECK(trace.rounds[r].round == r);
}

TEST_CASE("trace JSON round trip and restore") {
  ShiftWorld w;
  LoopSession s(w.components(), LoopConfig{}, w.history, w.ranker(), w.target, "viewer");
  s.step_simulated();
  s.step_simulated();
  TraceJsonOptions full;
  full.top_n = SIZE_MAX;
  SessionTrace copy;
  copy.user_id = "viewer";
  copy.target = w.target;
  for (const auto& r : s.trace().rounds) copy.rounds.push_back(round_from_json(to_json(r, full)));
  for (std::size_t i = 0; i < copy.rounds.size(); ++i)
    CHECK(to_json(copy.rounds[i], full) == to_json(s.trace().rounds[i], full));

  LoopSession resumed(w.components(), LoopConfig{}, w.ranker(), copy);
  CHECK(resumed.sequence() == s.sequence());
  CHECK(resumed.rounds_done() == 2);
  s.step_simulated();
  resumed.step_simulated();
  CHECK(to_json(resumed.trace().rounds.back(), full) == to_json(s.trace().rounds.back(), full));

  const auto jsonl = trace_to_jsonl(s.trace());
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == 4);
  CHECK(jsonl.find("masking_ms") == std::string::npos);

  auto broken = copy;
  broken.rounds[2].input.pop_back();
  CHECK_FALSE(check_trace_chaining(broken));
  CHECK_THROWS_AS(LoopSession(w.components(), LoopConfig{}, w.ranker(), broken), Error);
}

TEST_CASE("loop failure handling") {
  ShiftWorld w;
  LoopSession s(w.components(), LoopConfig{}, w.history, w.ranker(), w.target);
  SUBCASE("feedback without attributes fails the round") {
    Feedback raw;
    raw.raw_text = "something else";
    raw.polarity = Polarity::negative;
    const auto& r = s.step(raw);
    CHECK(r.failed);
    CHECK(r.error_code == ErrorCode::invalid_argument);
    CHECK(s.sequence() == w.history);
    CHECK(r.ranking.target_rank == s.trace().rounds[0].ranking.target_rank);
    CHECK(check_trace_chaining(s.trace()));
  }
  SUBCASE("no simulator configured") {
    Components c{w.catalog, w.srs, w.hybrid, w.constructor, nullptr};
    LoopSession bare(c, LoopConfig{}, w.history, w.ranker(), w.target);
    CHECK(bare.step_simulated().failed);
  }
}

TEST_CASE("variants") {
  const LoopConfig base;
  CHECK(variant_loop("baseline", base).rounds == 0);
  CHECK(variant_loop("no_dual_alignment", base).mask_k == 0);
  CHECK_FALSE(variant_loop("no_constructor", base).use_constructor);
  CHECK(variant_loop("full", base).mask_k == base.mask_k);
  CHECK_THROWS_AS(variant_loop("everything", base), Error);

  nlohmann::json j = base;
  CHECK(j.get<LoopConfig>().accept_k == base.accept_k);
}

TEST_CASE("synthetic generators") {
  CycleConfig cc;
  cc.items = 20;
  cc.users = 30;
  cc.filler_items = 5;
  const auto cycle = make_cycle_dataset(cc);
  CHECK(cycle.catalog.size() == 25);
  for (const auto& s : cycle.sequences) {
    const auto items = s.item_ids();
    CHECK(items.size() >= cc.min_length);
    CHECK(items.size() <= cc.max_length);
    for (std::size_t i = 1; i < items.size(); ++i)
      CHECK(std::stoul(items[i].str()) == (std::stoul(items[i - 1].str()) + 1) % cc.items);
  }

  const auto a = small_dataset();
  const auto b = small_dataset();
  REQUIRE(a.sequences.size() == 40);
  for (std::size_t u = 0; u < a.sequences.size(); ++u) CHECK(a.sequences[u].item_ids() == b.sequences[u].item_ids());

  const auto cs = make_case_study_fixture(20, 5);
  CHECK(cs.history.size() == 14);
  CHECK(cs.dataset.catalog.at(cs.target).title == "Halloween: H20");
  const auto* viewer = cs.dataset.find_user("case-study");
  REQUIRE(viewer);
  CHECK(viewer->item_ids().back() == cs.target);
}

TEST_CASE("experiment end to end at small scale") {
  const auto cfg = small_config();
  testing::TempDir dir;
  const auto exp = prepare_experiment(small_dataset(), cfg, dir / "ckpt");
  CHECK(std::filesystem::exists(dir / "ckpt" / "srs.ckpt"));
  CHECK(std::filesystem::exists(dir / "ckpt" / "adapter.ckpt"));
  REQUIRE(exp.triples.size() == exp.candidates.size());
  for (std::size_t u = 0; u < exp.triples.size(); ++u) {
    CHECK(exp.candidates[u].candidates.size() == cfg.candidate_size);
    CHECK(exp.candidates[u].target() == exp.triples[u].test_target);
  }

  const auto results = run_table(exp, kVariants, dir / "out");
  REQUIRE(results.size() == kVariants.size());
  for (const auto& r : results) {
    CHECK(r.report.n_users == exp.triples.size());
    CHECK(r.traces.size() == exp.triples.size());
    CHECK(r.report.config_fingerprint == config_fingerprint(cfg));
    const auto& m = r.report.metrics;
    CHECK(m.hr5 <= m.hr10);
    CHECK(m.ndcg5 <= m.ndcg10);
    for (const auto& t : r.traces) CHECK(check_trace_chaining(t));
  }
  CHECK(results[0].report.per_round.size() == 1);
  CHECK(results[1].report.per_round.size() == cfg.loop.rounds + 1);
  CHECK(results[1].report.per_round.front().hr5 == results[0].report.metrics.hr5);
  for (std::size_t r = 1; r < results[1].report.per_round_best.size(); ++r)
    CHECK(results[1].report.per_round_best[r].hr10 >= results[1].report.per_round_best[r - 1].hr10);
  for (const char* f : {"report.jsonl", "report.txt", "latency.json"}) CHECK(std::filesystem::exists(dir / "out" / f));
  CHECK(std::filesystem::exists(dir / "out" / "traces" / "full"));
  const auto table = testing::slurp(dir / "out" / "report.txt");
  for (const auto& v : kVariants) CHECK(table.find(v) != std::string::npos);

  SUBCASE("same seed reproduces reports and traces byte for byte") {
    const auto again = prepare_experiment(small_dataset(), cfg, dir / "ckpt2");
    run_table(again, kVariants, dir / "out2");
    CHECK(testing::slurp(dir / "out" / "report.jsonl") == testing::slurp(dir / "out2" / "report.jsonl"));
    for (const auto& e : std::filesystem::directory_iterator(dir / "out" / "traces" / "full"))
      CHECK(testing::slurp(e.path()) == testing::slurp(dir / "out2" / "traces" / "full" / e.path().filename()));
  }
  SUBCASE("checkpoints are reused") {
    const auto reused = prepare_experiment(small_dataset(), cfg, dir / "ckpt");
    CHECK(reused.srs->params().item_embedding.isApprox(exp.srs->params().item_embedding));
  }
  SUBCASE("sweeps") {
    const auto points = run_sweeps(exp, dir / "out");
    CHECK(std::filesystem::exists(dir / "out" / "sweeps.tsv"));
    std::set<std::string> sweeps;
    for (const auto& p : points) {
      sweeps.insert(p.sweep);
      CHECK(p.report.n_users > 0);
    }
    CHECK(sweeps == std::set<std::string>{"rounds", "mask_k", "length_bin"});
  }
}
