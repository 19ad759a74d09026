#include <doctest.h>

#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "cesrec/constructor.hpp"
#include "cesrec/error.hpp"
#include "cesrec/eval.hpp"
#include "cesrec/semantic.hpp"
#include "helpers.hpp"

using namespace cesrec;
using testing::id;

namespace {

EmbeddingTable attribute_table(const Catalog& c) {
  MockAttributeProvider provider;
  return embed_catalog(c, provider);
}

class FakeChat final : public ChatClient {
 public:
  std::function<std::string(const std::vector<ChatMessage>&)> reply;
  std::vector<std::vector<ChatMessage>> seen;
  std::string identity() const override { return "fake"; }
  std::string complete(const std::vector<ChatMessage>& m, const ChatOptions&) override {
    seen.push_back(m);
    return reply(m);
  }
};

std::size_t diff_count(std::span<const ItemId> a, std::span<const ItemId> b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

const AttributeValue comedy{"genre", "Comedy"};
const AttributeValue horror{"genre", "Horror"};

}  // namespace

TEST_CASE("polarity examples") {
  const auto fx = make_polarity_fixture();
  const auto hybrid = attribute_table(fx.catalog);

  SUBCASE("liking comedy swaps The Conjuring for Dogma") {
    const auto out = rule_based_construct(fx.sequence, structured_feedback(std::nullopt, comedy), fx.catalog, hybrid, 1);
    REQUIRE(out.replaced_positions().size() == 1);
    const auto pos = out.replaced_positions().front();
    CHECK(fx.catalog.at(fx.sequence[pos]).title == "The Conjuring");
    CHECK(fx.catalog.at(out.items[pos]).title == "Dogma");
    CHECK(out.provenance[pos].old_item == fx.sequence[pos]);
  }
  SUBCASE("disliking comedy swaps Bridesmaids for horror") {
    const auto out = rule_based_construct(fx.sequence, structured_feedback(comedy, std::nullopt), fx.catalog, hybrid, 1);
    REQUIRE(out.replaced_positions().size() == 1);
    const auto pos = out.replaced_positions().front();
    CHECK(fx.catalog.at(fx.sequence[pos]).title == "Bridesmaids");
    CHECK(fx.catalog.at(out.items[pos]).attributes.at("genre").contains("Horror"));
  }
}

TEST_CASE("case-study comedy is replaced by horror") {
  const auto fx = make_case_study_fixture(10, 5);
  const auto& c = fx.dataset.catalog;
  const auto hybrid = attribute_table(c);
  const auto out = rule_based_construct(fx.history, structured_feedback(comedy, horror), c, hybrid, 1);
  REQUIRE(out.replaced_positions().size() == 1);
  const auto pos = out.replaced_positions().front();
  CHECK(c.at(fx.history[pos]).title == "Cops and Robbersons");
  CHECK(c.at(out.items[pos]).attributes.at("genre").contains("Horror"));
  CHECK_FALSE(c.at(out.items[pos]).attributes.at("genre").contains("Comedy"));
}

TEST_CASE("rule-based edge cases") {
  Catalog c({"genre"});
  c.add(testing::make_item("a", "Alpha", {{"genre", "Horror"}}));
  c.add(testing::make_item("b", "Beta", {{"genre", "Horror"}}));
  c.add(testing::make_item("c", "Gamma", {{"genre", "Comedy"}}));
  c.add(testing::make_item("d", "Delta", {{"genre", "Comedy"}}));
  c.add(testing::make_item("e", "Epsilon", {{"genre", "Horror"}}));
  c.add(testing::make_item("f", "Zeta", {{"genre", "Drama"}}));
  const auto hybrid = attribute_table(c);
  const auto seq = testing::ids({"a", "b", "c"});

  SUBCASE("attribute no item carries leaves the sequence unchanged") {
    const auto out = rule_based_construct(seq, structured_feedback(AttributeValue{"genre", "Western"}, std::nullopt), c, hybrid, 1);
    CHECK(out.items == seq);
    CHECK(out.unchanged);
    REQUIRE(out.warnings.size() == 1);
    CHECK(out.warnings[0].find("Western") != std::string::npos);
  }
  SUBCASE("zero replacements is the identity") {
    const auto out = rule_based_construct(seq, structured_feedback(horror, comedy), c, hybrid, 0);
    CHECK(out.items == seq);
    CHECK(out.replaced_positions().empty());
  }
  SUBCASE("preference nobody outside the sequence carries") {
    const auto out = rule_based_construct(seq, structured_feedback(std::nullopt, AttributeValue{"genre", "Drama"}), c, hybrid, 5);
    CHECK(out.replaced_positions().size() == 1);
    CHECK(out.warnings.size() == 1);
    CHECK(out.warnings[0] == "replacement pool exhausted");
  }
  SUBCASE("the lower-similarity of two targets goes first") {
    const auto seq2 = testing::ids({"a", "b", "e", "c", "d"});
    const auto out = rule_based_construct(seq2, structured_feedback(comedy, std::nullopt), c, hybrid, 1);
    REQUIRE(out.replaced_positions().size() == 1);
    const Vector user = fuse_user(seq2, hybrid);
    const std::span<const double> u(user.data(), static_cast<std::size_t>(user.size()));
    const double sc = similarity(hybrid.row(id("c")), u, SimilarityFn::cosine).raw;
    const double sd = similarity(hybrid.row(id("d")), u, SimilarityFn::cosine).raw;
    const auto expected = sc <= sd ? std::size_t{3} : std::size_t{4};
    CHECK(out.replaced_positions().front() == expected);
    CHECK(out.items[expected] == id("f"));
  }
  SUBCASE("feedback without attributes is rejected") {
    Feedback raw;
    raw.raw_text = "not sure";
    raw.polarity = Polarity::negative;
    CHECK_THROWS_AS(rule_based_construct(seq, raw, c, hybrid, 1), Error);
    CHECK_THROWS_AS(rule_based_construct(std::vector<ItemId>{}, structured_feedback(horror, std::nullopt), c, hybrid, 1), Error);
  }
}

TEST_CASE("rule-based invariants over random inputs") {
  const auto c = testing::genre_catalog({"Horror", "Comedy", "Drama", "Action"}, 8);
  const auto hybrid = attribute_table(c);
  std::vector<ItemId> all;
  for (const auto& item : c.items()) all.push_back(item.id);
  const std::vector<std::string> genres{"Horror", "Comedy", "Drama", "Action", "Western"};
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto pool = all;
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t n = 1 + rng() % 12;
    const std::vector<ItemId> seq(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
    const AttributeValue dis{"genre", genres[rng() % genres.size()]};
    std::optional<AttributeValue> pref;
    if (rng() % 2) pref = AttributeValue{"genre", genres[rng() % 4]};
    if (pref && pref->value == dis.value) pref.reset();
    const auto fb = structured_feedback(dis, pref);
    const std::size_t max_r = rng() % 4;
    const auto out = rule_based_construct(seq, fb, c, hybrid, max_r);

    CHECK(out.items.size() == seq.size());
    CHECK(out.provenance.size() == seq.size());
    CHECK(out.replaced_positions().size() <= max_r);
    std::set<ItemId> distinct;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      CHECK(c.contains(out.items[i]));
      distinct.insert(out.items[i]);
      if (out.provenance[i].replaced) {
        CHECK(out.provenance[i].old_item == seq[i]);
        CHECK(c.at(seq[i]).attributes.at("genre").contains(dis.value));
        CHECK_FALSE(c.at(out.items[i]).attributes.at("genre").contains(dis.value));
        if (pref) CHECK(c.at(out.items[i]).attributes.at("genre").contains(pref->value));
      } else {
        CHECK(out.items[i] == seq[i]);
      }
    }
    CHECK(distinct.size() == seq.size());

    // A second pass over a rewritten sequence has nothing left to replace.
    if (!out.replaced_positions().empty() && out.replaced_positions().size() == max_r) {
      std::size_t remaining = 0;
      for (const auto& item : out.items) remaining += c.at(item).attributes.at("genre").contains(dis.value);
      if (remaining == 0) {
        const auto again = rule_based_construct(out.items, fb, c, hybrid, max_r);
        CHECK(again.items == out.items);
        CHECK(again.unchanged);
      }
    }
  }
}

TEST_CASE("pseudo sequence JSON round trip") {
  const auto fx = make_polarity_fixture();
  const auto hybrid = attribute_table(fx.catalog);
  auto out = rule_based_construct(fx.sequence, structured_feedback(comedy, horror), fx.catalog, hybrid, 2);
  out.round = 3;
  const auto back = pseudo_from_json(to_json(out));
  CHECK(back.items == out.items);
  CHECK(back.replaced_positions() == out.replaced_positions());
  CHECK(back.round == 3);
  CHECK(back.backend == "rule-based");
  CHECK(to_json(back) == to_json(out));
}

TEST_CASE("title matching") {
  const auto fx = make_polarity_fixture();
  MockHashProvider provider;
  TitleMatcher matcher(fx.catalog, provider);
  CHECK(normalize_title("  The  Conjuring! ") == normalize_title("the conjuring"));

  SUBCASE("exact titles") {
    const auto parsed = parse_llm_sequence("Dumb and Dumber | the hangover | It", matcher);
    REQUIRE(parsed.ok());
    CHECK(parsed.items == testing::ids({"1", "2", "10"}));
  }
  SUBCASE("prefix and quotes are ignored") {
    const auto parsed = parse_llm_sequence("Pseudo-interaction sequence: \"Dogma | Superbad\"", matcher);
    REQUIRE(parsed.ok());
    CHECK(parsed.items == testing::ids({"13", "11"}));
  }
  SUBCASE("typo resolves by embedding similarity") {
    const auto m = matcher.match("The Conjurng");
    REQUIRE(m);
    CHECK(fx.catalog.at(m->id).title == "The Conjuring");
    CHECK_FALSE(m->exact);
    CHECK(m->similarity >= 0.85);
  }
  SUBCASE("hallucinated title fails the parse") {
    const auto parsed = parse_llm_sequence("Dogma | Paddington in Space", matcher);
    CHECK_FALSE(parsed.ok());
    REQUIRE(parsed.unmatched.size() == 1);
    CHECK(parsed.unmatched[0] == "Paddington in Space");
  }
}

TEST_CASE("constructor prompt") {
  const auto fx = make_polarity_fixture();
  const auto messages = render_constructor_prompt(std::span(fx.sequence).first(2), fx.catalog, "I like comedy");
  REQUIRE(messages.size() == 1);
  CHECK(messages[0].content.starts_with(kConstructorInstruction));
  CHECK(messages[0].content.find("historical interaction sequence: Dumb and Dumber | The Hangover; user feedback: I like comedy.") !=
        std::string::npos);
  CHECK(parse_constructor_kind("remote-chat") == ConstructorKind::remote_chat);
  CHECK(std::string(to_string(ConstructorKind::rule_based)) == "rule-based");
  CHECK_THROWS_AS(parse_constructor_kind("llama"), Error);
}

TEST_CASE("remote constructor") {
  const auto fx = make_polarity_fixture();
  const auto& c = fx.catalog;
  const auto hybrid = attribute_table(c);
  MockHashProvider provider;
  TitleMatcher matcher(c, provider);
  FakeChat chat;
  ConstructorConfig cfg;
  cfg.kind = ConstructorKind::remote_chat;
  PseudoConstructor ctor(cfg, c, hybrid, &chat, &matcher);
  const auto fb = structured_feedback(comedy, horror);
  auto titles = [&](std::vector<ItemId> items) { return render_sequence(items, c); };

  SUBCASE("accepted reply") {
    auto edited = fx.sequence;
    edited[2] = id("14");  // Bridesmaids -> Sleepy Hollow
    chat.reply = [&](const auto&) { return titles(edited); };
    const auto out = ctor.construct(fx.sequence, fb);
    CHECK(out.backend == "remote-chat");
    CHECK_FALSE(out.fell_back);
    CHECK(out.items == edited);
    CHECK(out.replaced_positions() == std::vector<std::size_t>{2});
    CHECK(out.request.find(kConstructorInstruction) != std::string::npos);
    CHECK(out.response == titles(edited));
  }
  SUBCASE("hallucination falls back to rule-based") {
    chat.reply = [](const auto&) { return std::string("Made Up Movie | Dogma"); };
    const auto out = ctor.construct(fx.sequence, fb);
    CHECK(out.fell_back);
    CHECK(out.backend == "rule-based");
    CHECK(out.items == rule_based_construct(fx.sequence, fb, c, hybrid, 1).items);
    REQUIRE_FALSE(out.warnings.empty());
    CHECK(out.warnings[0].find("Made Up Movie") != std::string::npos);
    CHECK(out.response == "Made Up Movie | Dogma");
  }
  SUBCASE("wrong length falls back") {
    chat.reply = [&](const auto&) { return titles({fx.sequence[0], fx.sequence[1]}); };
    CHECK(ctor.construct(fx.sequence, fb).fell_back);
  }
  SUBCASE("backend error falls back") {
    chat.reply = [](const auto&) -> std::string { throw Error(ErrorCode::backend, "timeout"); };
    const auto out = ctor.construct(fx.sequence, fb);
    CHECK(out.fell_back);
    CHECK_FALSE(out.unchanged);
  }
  SUBCASE("fallback on raw-only feedback keeps the input") {
    chat.reply = [](const auto&) -> std::string { throw Error(ErrorCode::backend, "timeout"); };
    Feedback raw;
    raw.raw_text = "something scarier please";
    raw.polarity = Polarity::negative;
    const auto out = ctor.construct(fx.sequence, raw);
    CHECK(out.fell_back);
    CHECK(out.unchanged);
    CHECK(out.items == fx.sequence);
    CHECK(out.warnings.size() == 2);
  }
}

TEST_CASE("tuning data") {
  const auto c = testing::genre_catalog({"Horror", "Comedy", "Drama"}, 10);
  std::vector<InteractionSequence> seqs;
  std::mt19937_64 rng(9);
  std::vector<ItemId> all;
  for (const auto& item : c.items()) all.push_back(item.id);
  for (int u = 0; u < 40; ++u) {
    auto pool = all;
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(6 + u % 5);
    seqs.push_back(testing::make_sequence("u" + std::to_string(u), pool));
  }
  const auto triples = leave_one_out_split(seqs);
  MockHashProvider provider;
  TitleMatcher matcher(c, provider);

  SUBCASE("one position differs and parses back") {
    const auto result = generate_tuning_data(std::span(triples).first(1), c, 1, 4);
    REQUIRE(result.records.size() == 1);
    const auto& r = result.records[0];
    CHECK(r.instruction == kConstructorInstruction);
    const auto prefix = std::string("historical interaction sequence: ");
    REQUIRE(r.input.starts_with(prefix));
    const auto corrupted = parse_llm_sequence(r.input.substr(prefix.size(), r.input.find("; user feedback:") - prefix.size()), matcher);
    const auto original = parse_llm_sequence(r.output, matcher);
    REQUIRE(corrupted.ok());
    REQUIRE(original.ok());
    CHECK(original.items == triples[0].train.item_ids());
    REQUIRE(corrupted.items.size() == original.items.size());
    CHECK(diff_count(corrupted.items, original.items) == 1);
  }
  SUBCASE("volume bound and seed determinism") {
    const auto a = generate_tuning_data(triples, c, 2, 7);
    CHECK(a.records.size() <= 2 * triples.size());
    CHECK(a.records.size() + a.skipped_users > 0);
    testing::TempDir dir;
    write_tuning_jsonl(a.records, dir / "a.jsonl");
    write_tuning_jsonl(generate_tuning_data(triples, c, 2, 7).records, dir / "b.jsonl");
    CHECK(testing::slurp(dir / "a.jsonl") == testing::slurp(dir / "b.jsonl"));
    write_tuning_jsonl(generate_tuning_data(triples, c, 2, 8).records, dir / "c.jsonl");
    CHECK(testing::slurp(dir / "a.jsonl") != testing::slurp(dir / "c.jsonl"));
    std::size_t lines = 0;
    std::istringstream in(testing::slurp(dir / "a.jsonl"));
    for (std::string line; std::getline(in, line); ++lines) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.contains("instruction"));
      CHECK(parse_llm_sequence(j.at("output").get<std::string>(), matcher).ok());
    }
    CHECK(lines == a.records.size());
  }
  CHECK_THROWS_AS(generate_tuning_data(triples, c, 0, 1), Error);
}
