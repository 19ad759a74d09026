#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cesrec/alignment.hpp"
#include "cesrec/chat.hpp"
#include "cesrec/data.hpp"
#include "cesrec/embedding_table.hpp"
#include "cesrec/feedback.hpp"
#include "cesrec/semantic.hpp"

namespace cesrec {

inline constexpr const char* kConstructorInstruction =
    "Based on the preferences mentioned in the user feedback and the information about <items> "
    "contained in the historical interaction sequence, replace the <items> the user dislikes with "
    "<items> user may currently prefer.";
inline constexpr const char* kSequenceDelimiter = " | ";

struct SlotProvenance {
  bool replaced = false;
  ItemId old_item;  // set when replaced
};

struct PseudoSequence {
  std::vector<ItemId> items;
  std::vector<SlotProvenance> provenance;
  std::size_t round = 1;
  std::string backend;          // "rule-based" or "remote-chat"
  bool fell_back = false;       // remote reply rejected, rule-based used
  bool unchanged = false;       // no backend produced an edit
  std::vector<std::string> warnings;
  std::string request;  // raw remote request, when one was sent
  std::string response;

  std::vector<std::size_t> replaced_positions() const;
};

nlohmann::json to_json(const PseudoSequence& p);
PseudoSequence pseudo_from_json(const nlohmann::json& j);

struct RuleOptions {
  SimilarityFn fn = SimilarityFn::cosine;
  // User representation; defaults to the fused vector of the input sequence.
  const Vector* user_vector = nullptr;
};

// Target slots: items carrying the disliked value, or, when only a preference
// is given, items lacking the preferred value. Up to `max_replacements` of
// them (lowest similarity first) are swapped for the catalog item closest to
// the user vector that carries the preferred value, lacks the disliked value,
// and is not already in the sequence. Ties break by ascending item id.
PseudoSequence rule_based_construct(std::span<const ItemId> sequence, const Feedback& feedback,
                                    const Catalog& catalog, const EmbeddingTable& hybrid,
                                    std::size_t max_replacements, const RuleOptions& options = {});

// "t1 | t2 | ..." with catalog titles.
std::string render_sequence(std::span<const ItemId> sequence, const Catalog& catalog);
std::string render_constructor_input(std::span<const ItemId> sequence, const Catalog& catalog,
                                     std::string_view feedback_text);

// Resolves free-form titles: exact match after case folding and punctuation
// normalization, then nearest title embedding at or above `threshold`.
class TitleMatcher {
 public:
  TitleMatcher(const Catalog& catalog, EmbeddingProvider& provider, double threshold = 0.85);

  struct Match {
    ItemId id;
    double similarity = 1.0;
    bool exact = true;
  };
  std::optional<Match> match(std::string_view title);
  double threshold() const noexcept { return threshold_; }

 private:
  void ensure_embeddings();

  const Catalog& catalog_;
  EmbeddingProvider& provider_;
  double threshold_;
  std::unordered_map<std::string, ItemId> exact_;
  Matrix title_vectors_;  // unit rows, catalog order
  bool embedded_ = false;
};

std::string normalize_title(std::string_view title);

struct ParsedSequence {
  std::vector<ItemId> items;
  std::vector<std::string> unmatched;
  bool ok() const { return unmatched.empty() && !items.empty(); }
};

// Splits on " | " (an optional "pseudo-interaction sequence:" prefix and
// surrounding quotes are ignored) and resolves every fragment.
ParsedSequence parse_llm_sequence(std::string_view reply, TitleMatcher& matcher);

enum class ConstructorKind { rule_based, remote_chat };
const char* to_string(ConstructorKind kind);
ConstructorKind parse_constructor_kind(std::string_view text);

struct ConstructorConfig {
  ConstructorKind kind = ConstructorKind::rule_based;
  std::size_t max_replacements = 1;
  ChatOptions decoding;
  SimilarityFn fn = SimilarityFn::cosine;
};

std::vector<ChatMessage> render_constructor_prompt(std::span<const ItemId> sequence,
                                                   const Catalog& catalog,
                                                   std::string_view feedback_text);

class PseudoConstructor {
 public:
  PseudoConstructor(ConstructorConfig config, const Catalog& catalog, const EmbeddingTable& hybrid,
                    ChatClient* chat = nullptr, TitleMatcher* matcher = nullptr);

  // Never throws for backend failures: falls back to rule-based, then to the
  // unchanged input with a warning.
  PseudoSequence construct(std::span<const ItemId> sequence, const Feedback& feedback,
                           const RuleOptions& options = {}) const;

  const ConstructorConfig& config() const noexcept { return config_; }

 private:
  ConstructorConfig config_;
  const Catalog& catalog_;
  const EmbeddingTable& hybrid_;
  ChatClient* chat_;
  TitleMatcher* matcher_;
};

struct TuningRecord {
  std::string instruction;
  std::string input;
  std::string output;
};

struct TuningResult {
  std::vector<TuningRecord> records;
  std::size_t skipped_users = 0;
};

// For each user and repetition, one history position is overwritten with an
// off-attribute item; the record asks to restore the original sequence.
// Histories are cut to the most recent `max_history` items.
TuningResult generate_tuning_data(std::span<const SplitTriple> triples, const Catalog& catalog,
                                  std::size_t per_user, std::uint64_t seed,
                                  std::size_t max_history = 50);

void write_tuning_jsonl(std::span<const TuningRecord> records, const std::filesystem::path& path);

}  // namespace cesrec
