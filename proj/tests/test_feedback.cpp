#include <doctest.h>

#include <functional>

#include "cesrec/chat.hpp"
#include "cesrec/error.hpp"
#include "cesrec/feedback.hpp"
#include "helpers.hpp"

using namespace cesrec;
using testing::make_item;

namespace {

Catalog movies() {
  Catalog c({"genre", "director"});
  c.add(make_item("1", "Avatar", {{"genre", "Sci-Fi"}, {"director", "James Cameron"}}));
  c.add(make_item("2", "Inception", {{"genre", "Sci-Fi"}, {"director", "Christopher Nolan"}}));
  c.add(make_item("3", "Dumb and Dumber", {{"genre", "Comedy"}, {"director", "Peter Farrelly"}}));
  c.add(make_item("4", "Halloween: H20", {{"genre", "Horror"}, {"director", "Steve Miner"}}));
  c.add(make_item("5", "Scary Movie", {{"genre", "Comedy"}, {"genre", "Horror"}, {"director", "Keenen Ivory Wayans"}}));
  return c;
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

}  // namespace

TEST_CASE("deterministic simulator sentences") {
  const auto c = movies();
  SUBCASE("director differs") {
    const AttributeMap target{{"genre", {"Sci-Fi"}}, {"director", {"Christopher Nolan"}}};
    const auto f = simulate_feedback_deterministic(c.at(ItemId("1")), target, c.attribute_schema());
    CHECK(f.raw_text == "I don't like film directed by James Cameron; I prefer Christopher Nolan.");
    CHECK(f.polarity == Polarity::negative);
    CHECK(f.disliked == AttributeValue{"director", "James Cameron"});
    CHECK(f.preferred == AttributeValue{"director", "Christopher Nolan"});
  }
  SUBCASE("genre differs first") {
    const AttributeMap target = c.at(ItemId("4")).attributes;
    const auto f = simulate_feedback_deterministic(c.at(ItemId("3")), target, c.attribute_schema());
    CHECK(f.raw_text == "I don't like comedy; I prefer horror.");
  }
  SUBCASE("identical attributes give positive feedback") {
    const auto& item = c.at(ItemId("2"));
    const auto f = simulate_feedback_deterministic(item, item.attributes, c.attribute_schema());
    CHECK(f.polarity == Polarity::positive);
    CHECK_FALSE(f.disliked.has_value());
    CHECK(f.preferred == AttributeValue{"genre", "Sci-Fi"});
    CHECK_NOTHROW(f.validate());
  }
  SUBCASE("overlapping multi-valued genre is not a complaint") {
    const AttributeMap target{{"genre", {"Horror"}}, {"director", {"Steve Miner"}}};
    const auto f = simulate_feedback_deterministic(c.at(ItemId("5")), target, c.attribute_schema());
    CHECK(f.disliked == AttributeValue{"director", "Keenen Ivory Wayans"});
  }
  SUBCASE("pure function of its inputs") {
    const AttributeMap target = c.at(ItemId("4")).attributes;
    const auto a = simulate_feedback_deterministic(c.at(ItemId("1")), target, c.attribute_schema());
    const auto b = simulate_feedback_deterministic(c.at(ItemId("1")), target, c.attribute_schema());
    CHECK(nlohmann::json(a) == nlohmann::json(b));
  }
  CHECK_THROWS_AS(simulate_feedback_deterministic(c.at(ItemId("1")), {}, c.attribute_schema()), Error);
}

TEST_CASE("attribute priority") {
  const std::vector<std::string> schema{"year", "category", "director", "genre", "studio"};
  CHECK(attribute_priority(schema) == std::vector<std::string>{"genre", "director", "category", "year", "studio"});
  CHECK(attribute_phrase("director") == "film directed by ");
  CHECK(attribute_phrase("genre").empty());
  CHECK(render_value("genre", "Horror") == "horror");
  CHECK(render_value("director", "James Cameron") == "James Cameron");
}

TEST_CASE("feedback validation and JSON") {
  Feedback f;
  f.raw_text = "meh";
  f.polarity = Polarity::negative;
  CHECK_THROWS_AS(f.validate(), Error);
  CHECK_NOTHROW(f.validate(true));
  f.raw_text.clear();
  CHECK_THROWS_AS(f.validate(true), Error);

  const auto s = structured_feedback(AttributeValue{"genre", "Comedy"}, AttributeValue{"genre", "Horror"});
  const nlohmann::json j = s;
  const auto back = j.get<Feedback>();
  CHECK(back.disliked == s.disliked);
  CHECK(back.preferred == s.preferred);
  CHECK(back.raw_text == s.raw_text);
  CHECK(structured_feedback(std::nullopt, AttributeValue{"genre", "Comedy"}).raw_text == "I like comedy.");
  CHECK_THROWS_AS(structured_feedback(std::nullopt, std::nullopt), Error);
  CHECK_THROWS_AS(nlohmann::json({{"polarity", "sideways"}, {"raw_text", "x"}}).get<Feedback>(), Error);
}

TEST_CASE("text feedback parsing") {
  const auto c = movies();
  SUBCASE("dislike and preference") {
    const auto f = parse_feedback_text("I don't like comedy; I prefer horror.", c);
    REQUIRE(f);
    CHECK(f->polarity == Polarity::negative);
    CHECK(f->disliked == AttributeValue{"genre", "Comedy"});
    CHECK(f->preferred == AttributeValue{"genre", "Horror"});
  }
  SUBCASE("parser and structured form agree") {
    const auto s = structured_feedback(AttributeValue{"genre", "Comedy"}, AttributeValue{"genre", "Horror"});
    const auto f = parse_feedback_text(s.raw_text, c);
    REQUIRE(f);
    CHECK(f->disliked == s.disliked);
    CHECK(f->preferred == s.preferred);
  }
  SUBCASE("director phrase and plurals") {
    const auto f = parse_feedback_text("I don't like film directed by James Cameron; I prefer Christopher Nolan.", c);
    REQUIRE(f);
    CHECK(f->disliked == AttributeValue{"director", "James Cameron"});
    CHECK(f->preferred == AttributeValue{"director", "Christopher Nolan"});
    const auto g = parse_feedback_text("I like comedies", c);
    REQUIRE(g);
    CHECK(g->polarity == Polarity::positive);
    CHECK(g->preferred == AttributeValue{"genre", "Comedy"});
  }
  SUBCASE("unrecognized text") {
    CHECK_FALSE(parse_feedback_text("show me something else", c).has_value());
    CHECK_FALSE(parse_feedback_text("", c).has_value());
  }
}

TEST_CASE("simulator prompt never exposes the target item") {
  const auto c = movies();
  const auto& target = c.at(ItemId("4"));
  const auto messages = render_simulator_prompt(c.at(ItemId("3")), target.attributes, c.attribute_schema());
  const auto text = render_messages(messages);
  CHECK(text.find("Halloween") == std::string::npos);
  CHECK(text.find(target.id.str() + " ") == std::string::npos);
  CHECK(text.find("Horror") != std::string::npos);
  CHECK(text.find("Dumb and Dumber") != std::string::npos);
  CHECK(messages.front().role == "system");
}

TEST_CASE("remote simulator") {
  const auto c = movies();
  const auto& rec = c.at(ItemId("3"));
  const auto target = c.at(ItemId("4")).attributes;
  FakeChat chat;
  FeedbackSimulator sim(c, SimulatorMode::remote, &chat);

  SUBCASE("parsed reply") {
    chat.reply = [](const auto&) { return std::string("Too silly, I hate comedy. I'd rather watch horror."); };
    const auto r = sim.simulate(rec, target);
    CHECK_FALSE(r.fell_back);
    CHECK(r.feedback.disliked == AttributeValue{"genre", "Comedy"});
    CHECK(r.feedback.preferred == AttributeValue{"genre", "Horror"});
    CHECK(r.reply.find("silly") != std::string::npos);
    CHECK(r.prompt.find("Halloween") == std::string::npos);
  }
  SUBCASE("unparseable reply keeps the words") {
    chat.reply = [](const auto&) { return std::string("Not my thing."); };
    const auto r = sim.simulate(rec, target);
    CHECK_FALSE(r.warning.empty());
    CHECK(r.feedback.raw_text == "Not my thing.");
    CHECK(r.feedback.disliked == AttributeValue{"genre", "Comedy"});
  }
  SUBCASE("backend failure falls back") {
    chat.reply = [](const auto&) -> std::string { throw Error(ErrorCode::backend, "down"); };
    const auto r = sim.simulate(rec, target);
    CHECK(r.fell_back);
    CHECK(r.feedback.raw_text == "I don't like comedy; I prefer horror.");
  }
  CHECK_THROWS_AS(FeedbackSimulator(c, SimulatorMode::remote, nullptr), Error);
}

TEST_CASE("acceptance check") {
  RankedResult r;
  r.target_rank = 1;
  CHECK(check_acceptance(r, 5));
  r.target_rank = 6;
  CHECK_FALSE(check_acceptance(r, 5));
  CHECK(check_acceptance(r, 6));
  CHECK_THROWS_AS(check_acceptance(r, 0), Error);
  r.target_rank.reset();
  CHECK_THROWS_AS(check_acceptance(r, 5), Error);
}
