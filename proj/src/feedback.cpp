#include "cesrec/feedback.hpp"

#include <algorithm>
#include <cctype>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cesrec/error.hpp"

namespace cesrec {

using nlohmann::json;

const char* to_string(Polarity p) { return p == Polarity::negative ? "negative" : "positive"; }

void Feedback::validate(bool allow_raw) const {
  if (raw_text.empty()) throw Error(ErrorCode::invalid_argument, "feedback text is empty");
  if (allow_raw && is_raw()) return;
  if (polarity == Polarity::negative && !disliked)
    throw Error(ErrorCode::invalid_argument, "negative feedback without a disliked attribute");
  if (polarity == Polarity::positive && !preferred)
    throw Error(ErrorCode::invalid_argument, "positive feedback without a preferred attribute");
}

namespace {

json attr_json(const std::optional<AttributeValue>& a) {
  if (!a) return nullptr;
  return {{"attribute", a->attribute}, {"value", a->value}};
}

std::optional<AttributeValue> attr_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return AttributeValue{j.at("attribute").get<std::string>(), j.at("value").get<std::string>()};
}

}  // namespace

void to_json(json& j, const Feedback& f) {
  j = {{"polarity", to_string(f.polarity)},
       {"disliked", attr_json(f.disliked)},
       {"preferred", attr_json(f.preferred)},
       {"raw_text", f.raw_text}};
}

void from_json(const json& j, Feedback& f) {
  const auto p = j.at("polarity").get<std::string>();
  if (p != "negative" && p != "positive")
    throw Error(ErrorCode::invalid_argument, fmt::format("unknown polarity '{}'", p));
  f.polarity = p == "negative" ? Polarity::negative : Polarity::positive;
  f.disliked = attr_from(j.value("disliked", json(nullptr)));
  f.preferred = attr_from(j.value("preferred", json(nullptr)));
  f.raw_text = j.at("raw_text").get<std::string>();
}

std::vector<std::string> attribute_priority(std::span<const std::string> schema) {
  std::vector<std::string> out;
  for (const char* lead : {"genre", "director", "category"})
    if (std::find(schema.begin(), schema.end(), lead) != schema.end()) out.emplace_back(lead);
  for (const auto& a : schema)
    if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
  return out;
}

std::string attribute_phrase(std::string_view attribute) {
  if (attribute == "director") return "film directed by ";
  if (attribute == "genre" || attribute == "category") return "";
  return fmt::format("{} ", attribute);
}

std::string render_value(std::string_view attribute, std::string_view value) {
  std::string v(value);
  if (attribute == "genre")
    for (char& c : v) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return v;
}

Feedback structured_feedback(const std::optional<AttributeValue>& dislike,
                             const std::optional<AttributeValue>& prefer) {
  if (!dislike && !prefer)
    throw Error(ErrorCode::invalid_argument, "structured feedback needs a dislike or a preference");
  Feedback f;
  f.disliked = dislike;
  f.preferred = prefer;
  f.polarity = dislike ? Polarity::negative : Polarity::positive;
  if (dislike && prefer)
    f.raw_text = fmt::format("I don't like {}{}; I prefer {}.", attribute_phrase(dislike->attribute),
                             render_value(dislike->attribute, dislike->value),
                             render_value(prefer->attribute, prefer->value));
  else if (dislike)
    f.raw_text = fmt::format("I don't like {}{}.", attribute_phrase(dislike->attribute),
                             render_value(dislike->attribute, dislike->value));
  else
    f.raw_text = fmt::format("I like {}{}.", attribute_phrase(prefer->attribute),
                             render_value(prefer->attribute, prefer->value));
  return f;
}

Feedback simulate_feedback_deterministic(const Item& recommended, const AttributeMap& target,
                                         std::span<const std::string> schema) {
  if (target.empty()) throw Error(ErrorCode::invalid_argument, "target attributes are empty");
  std::vector<std::string> full(schema.begin(), schema.end());
  for (const auto& [name, values] : target)
    if (std::find(full.begin(), full.end(), name) == full.end()) full.push_back(name);
  const auto priority = attribute_priority(full);
  std::optional<AttributeValue> first_target;
  for (const auto& attr : priority) {
    auto t = target.find(attr);
    if (t == target.end() || t->second.empty()) continue;
    if (!first_target) first_target = AttributeValue{attr, *t->second.begin()};
    auto r = recommended.attributes.find(attr);
    if (r == recommended.attributes.end() || r->second.empty()) continue;
    const bool disjoint = std::none_of(r->second.begin(), r->second.end(),
                                       [&](const std::string& v) { return t->second.contains(v); });
    if (disjoint)
      return structured_feedback(AttributeValue{attr, *r->second.begin()},
                                 AttributeValue{attr, *t->second.begin()});
  }
  if (!first_target) throw Error(ErrorCode::invalid_argument, "target attributes are empty");
  return structured_feedback(std::nullopt, first_target);
}

// ---------------------------------------------------------------------------
// Text parsing

namespace {

std::string singular(std::string w) {
  if (w.size() > 4 && w.ends_with("ies")) return w.substr(0, w.size() - 3) + "y";
  if (w.size() > 4 && (w.ends_with("ches") || w.ends_with("shes") || w.ends_with("xes") ||
                       w.ends_with("sses")))
    return w.substr(0, w.size() - 2);
  if (w.size() > 3 && w.back() == 's' && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is"))
    return w.substr(0, w.size() - 1);
  return w;
}

std::vector<std::string> tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(singular(std::move(cur)));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c))
      cur += static_cast<char>(std::tolower(c));
    else if (c == '\'')
      continue;
    else
      flush();
  }
  flush();
  return out;
}

std::vector<std::string> split_clauses(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.find_first_not_of(' ') != std::string::npos) out.push_back(cur);
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == ';' || c == '!' || c == '?' || c == '\n' ||
        (c == '.' && (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]))))) {
      flush();
      continue;
    }
    if (c == ',' || (text.substr(i, 5) == " but ")) {
      flush();
      if (c != ',') i += 4;
      continue;
    }
    cur += c;
  }
  flush();
  return out;
}

bool contains_seq(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

enum class Cue { none, negative, positive };

Cue clause_cue(const std::vector<std::string>& t) {
  static const std::vector<std::vector<std::string>> negative = {
      {"dont", "like"}, {"do", "not", "like"}, {"dislike"}, {"hate"}, {"not", "a", "fan"},
      {"dont", "want"}, {"do", "not", "want"}, {"no", "more"}, {"tired", "of"}, {"not", "into"},
      {"doesnt", "like"}, {"didnt", "like"}, {"dont", "enjoy"}, {"avoid"}};
  static const std::vector<std::vector<std::string>> positive = {
      {"prefer"}, {"like"}, {"love"}, {"want"}, {"enjoy"}, {"more"}, {"rather"}, {"fan"}, {"into"}};
  for (const auto& n : negative)
    if (contains_seq(t, n)) return Cue::negative;
  for (const auto& p : positive)
    if (contains_seq(t, p)) return Cue::positive;
  return Cue::none;
}

struct VocabEntry {
  AttributeValue value;
  std::vector<std::string> toks;
  std::size_t priority;
};

}  // namespace

std::optional<Feedback> parse_feedback_text(std::string_view text, const Catalog& catalog) {
  const auto priority = attribute_priority(catalog.attribute_schema());
  std::vector<VocabEntry> vocab;
  const auto all = catalog.vocabulary();
  for (std::size_t p = 0; p < priority.size(); ++p) {
    auto it = all.find(priority[p]);
    if (it == all.end()) continue;
    for (const auto& v : it->second) {
      auto t = tokens(v);
      if (!t.empty()) vocab.push_back({{priority[p], v}, std::move(t), p});
    }
  }
  auto best_match = [&](const std::vector<std::string>& clause) -> std::optional<AttributeValue> {
    const VocabEntry* best = nullptr;
    for (const auto& e : vocab) {
      if (!contains_seq(clause, e.toks)) continue;
      if (!best || e.toks.size() > best->toks.size() ||
          (e.toks.size() == best->toks.size() && e.priority < best->priority))
        best = &e;
    }
    if (!best) return std::nullopt;
    return best->value;
  };

  Feedback f;
  f.raw_text = std::string(text);
  for (const auto& clause : split_clauses(text)) {
    const auto t = tokens(clause);
    const Cue cue = clause_cue(t);
    if (cue == Cue::none) continue;
    const auto match = best_match(t);
    if (!match) continue;
    if (cue == Cue::negative && !f.disliked)
      f.disliked = match;
    else if (cue == Cue::positive && !f.preferred)
      f.preferred = match;
  }
  if (!f.disliked && !f.preferred) return std::nullopt;
  f.polarity = f.disliked ? Polarity::negative : Polarity::positive;
  if (f.raw_text.empty()) f.raw_text = "(empty)";
  return f;
}

// ---------------------------------------------------------------------------
// Simulator

namespace {

constexpr const char* kSimulatorInstruction =
    "You are a user interacting with a recommender system. Based on the information about your "
    "<target item> and the <recommended item> provided by the recommender, give feedback to the "
    "recommender.";

std::string render_attributes(const AttributeMap& attrs, std::span<const std::string> order) {
  std::vector<std::string> parts;
  for (const auto& name : order) {
    auto it = attrs.find(name);
    if (it == attrs.end() || it->second.empty()) continue;
    parts.push_back(fmt::format("{}: {}", name, fmt::join(it->second, ", ")));
  }
  return fmt::format("{}", fmt::join(parts, "; "));
}

}  // namespace

std::vector<ChatMessage> render_simulator_prompt(const Item& recommended, const AttributeMap& target,
                                                 std::span<const std::string> schema) {
  std::vector<std::string> order(schema.begin(), schema.end());
  for (const auto& [name, v] : target)
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
  for (const auto& [name, v] : recommended.attributes)
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
  const auto priority = attribute_priority(order);
  return {
      {"system", kSimulatorInstruction},
      {"user", fmt::format("<target item> attributes: {}\n<recommended item>: {} ({})\n"
                           "Reply in one or two sentences saying what you dislike about the "
                           "recommended item and what you prefer instead.",
                           render_attributes(target, priority), recommended.title,
                           render_attributes(recommended.attributes, priority))},
  };
}

FeedbackSimulator::FeedbackSimulator(const Catalog& catalog, SimulatorMode mode, ChatClient* chat,
                                     ChatOptions options)
    : catalog_(catalog), mode_(mode), chat_(chat), options_(options) {
  if (mode_ == SimulatorMode::remote && !chat_)
    throw Error(ErrorCode::invalid_argument, "remote simulator needs a chat client");
}

SimulatorResult FeedbackSimulator::simulate(const Item& recommended, const AttributeMap& target) const {
  SimulatorResult result;
  const auto& schema = catalog_.attribute_schema();
  if (mode_ == SimulatorMode::deterministic) {
    result.feedback = simulate_feedback_deterministic(recommended, target, schema);
    return result;
  }
  const auto messages = render_simulator_prompt(recommended, target, schema);
  result.prompt = render_messages(messages);
  try {
    result.reply = chat_->complete(messages, options_);
  } catch (const Error& e) {
    result.warning = fmt::format("remote simulator failed ({}); using deterministic feedback", e.what());
    spdlog::warn("{}", result.warning);
    result.fell_back = true;
    result.feedback = simulate_feedback_deterministic(recommended, target, schema);
    return result;
  }
  if (auto parsed = parse_feedback_text(result.reply, catalog_)) {
    result.feedback = std::move(*parsed);
    return result;
  }
  // Keep the model's words; take the structured fields from the deterministic rule.
  result.warning = "remote simulator reply did not name a catalog attribute; structured fields "
                   "taken from deterministic mode";
  result.feedback = simulate_feedback_deterministic(recommended, target, schema);
  if (!result.reply.empty()) result.feedback.raw_text = result.reply;
  return result;
}

bool check_acceptance(const RankedResult& ranked, std::size_t k) {
  if (k == 0) throw Error(ErrorCode::invalid_argument, "acceptance k must be at least 1");
  if (!ranked.target_rank) throw Error(ErrorCode::invalid_argument, "ranked result has no target");
  return *ranked.target_rank <= k;
}

}  // namespace cesrec
