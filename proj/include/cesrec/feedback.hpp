#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cesrec/chat.hpp"
#include "cesrec/data.hpp"
#include "cesrec/ranking.hpp"

namespace cesrec {

struct AttributeValue {
  std::string attribute;
  std::string value;

  friend bool operator==(const AttributeValue&, const AttributeValue&) = default;
};

enum class Polarity { negative, positive };
const char* to_string(Polarity p);

struct Feedback {
  Polarity polarity = Polarity::positive;
  std::optional<AttributeValue> disliked;
  std::optional<AttributeValue> preferred;
  std::string raw_text;

  // Negative needs `disliked`, positive needs `preferred`, text non-empty.
  // With `allow_raw`, text alone is accepted when neither field is set.
  void validate(bool allow_raw = false) const;
  bool is_raw() const noexcept { return !disliked && !preferred; }
};

void to_json(nlohmann::json& j, const Feedback& f);
void from_json(const nlohmann::json& j, Feedback& f);

// genre, director, category, then the rest of `schema` in its order.
std::vector<std::string> attribute_priority(std::span<const std::string> schema);

// Text placed before a value in simulated feedback ("film directed by " for
// director, nothing for genre and category).
std::string attribute_phrase(std::string_view attribute);
// Genre values are lowercased; other values are kept verbatim.
std::string render_value(std::string_view attribute, std::string_view value);

// Compares the recommended item with the target attributes in priority order
// and complains about the first attribute whose values are disjoint.
Feedback simulate_feedback_deterministic(const Item& recommended, const AttributeMap& target_attributes,
                                         std::span<const std::string> schema);

// Structured feedback with canonical text, as a client attribute picker
// would produce it.
Feedback structured_feedback(const std::optional<AttributeValue>& dislike,
                             const std::optional<AttributeValue>& prefer);

// Clause-level cue matching against the catalog's attribute vocabulary.
// Returns nullopt when neither a dislike nor a preference is recognized.
std::optional<Feedback> parse_feedback_text(std::string_view text, const Catalog& catalog);

// The remote simulator sees the target's attributes, never its id or title.
std::vector<ChatMessage> render_simulator_prompt(const Item& recommended,
                                                 const AttributeMap& target_attributes,
                                                 std::span<const std::string> schema);

enum class SimulatorMode { deterministic, remote };

struct SimulatorResult {
  Feedback feedback;
  bool fell_back = false;
  std::string prompt;  // rendered remote request, empty in deterministic mode
  std::string reply;
  std::string warning;
};

class FeedbackSimulator {
 public:
  FeedbackSimulator(const Catalog& catalog, SimulatorMode mode = SimulatorMode::deterministic,
                    ChatClient* chat = nullptr, ChatOptions options = {});

  SimulatorResult simulate(const Item& recommended, const AttributeMap& target_attributes) const;
  SimulatorMode mode() const noexcept { return mode_; }

 private:
  const Catalog& catalog_;
  SimulatorMode mode_;
  ChatClient* chat_;
  ChatOptions options_;
};

// True iff the target ranks within the top k. Throws on k == 0 or a result
// without a target.
bool check_acceptance(const RankedResult& ranked, std::size_t k);

}  // namespace cesrec
