#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cesrec/item_id.hpp"

namespace cesrec {

// Attribute name -> set of values. Ordered containers keep rendering and
// serialization deterministic.
using AttributeMap = std::map<std::string, std::set<std::string>>;

struct Item {
  ItemId id;
  std::string title;
  AttributeMap attributes;
  // Rendered once at insertion from title + attributes in schema order.
  std::string content;
  // Set for items synthesized because an interaction referenced an id with
  // no metadata record.
  bool placeholder = false;
};

// "{title}. genre: a, b. director: d." with attributes in `schema` order.
std::string render_content(const std::string& title, const AttributeMap& attributes,
                           std::span<const std::string> schema);

class Catalog {
 public:
  Catalog() = default;
  explicit Catalog(std::vector<std::string> attribute_schema);

  // Throws on duplicate id or empty title. Attribute names not yet in the
  // schema are appended to it.
  const Item& add(Item item);

  const Item& at(const ItemId& id) const;
  const Item* find(const ItemId& id) const;
  std::optional<std::size_t> index_of(const ItemId& id) const;
  bool contains(const ItemId& id) const { return index_.contains(id); }

  const Item& operator[](std::size_t i) const { return items_[i]; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  const std::vector<Item>& items() const noexcept { return items_; }
  const std::vector<std::string>& attribute_schema() const noexcept { return schema_; }

  // Items carrying `value` under `attribute`, in catalog order.
  std::vector<ItemId> items_with(const std::string& attribute,
                                 const std::string& value) const;
  // Every distinct value observed per attribute.
  std::map<std::string, std::set<std::string>> vocabulary() const;

 private:
  std::vector<std::string> schema_;
  std::vector<Item> items_;
  std::unordered_map<ItemId, std::size_t> index_;
};

struct Event {
  ItemId item;
  std::int64_t timestamp = 0;
};

struct InteractionSequence {
  std::string user_id;
  std::vector<Event> events;

  std::vector<ItemId> item_ids() const;
  std::size_t size() const noexcept { return events.size(); }
};

struct LoadReport {
  std::size_t skipped_lines = 0;
  std::size_t unknown_item_events = 0;
  std::size_t placeholder_items = 0;
  std::vector<std::string> warnings;
};

struct Dataset {
  Catalog catalog;
  std::vector<InteractionSequence> sequences;
  LoadReport report;

  std::size_t event_count() const;
  const InteractionSequence* find_user(const std::string& user_id) const;
};

// Groups (user, item, timestamp) rows into per-user sequences: users sorted by
// natural id order, events stably sorted by timestamp so ties keep file order.
std::vector<InteractionSequence> build_sequences(
    std::vector<std::pair<std::string, Event>> rows);

// MovieLens `.dat` files: `UserID::MovieID::Rating::Timestamp` and
// `MovieID::Title::Genre|Genre`. Malformed lines are skipped and counted.
Dataset load_movielens(const std::filesystem::path& ratings_path,
                       const std::filesystem::path& movies_path);

// Amazon newline-delimited JSON. Reviews: reviewerID/asin/unixReviewTime
// (aliases: user_id, item_id|parent_asin, timestamp). Metadata: asin, title,
// category (string or list; main_cat as fallback). Only reviewed items enter
// the catalog; reviewed items without metadata get a flagged placeholder.
Dataset load_amazon(const std::filesystem::path& reviews_path,
                    const std::filesystem::path& metadata_path);

// Serialized store: newline-delimited JSON, header record first.
inline constexpr int kStoreFormatVersion = 1;
void save_store(const Dataset& dataset, const std::filesystem::path& path);
std::string serialize_store(const Dataset& dataset);
Dataset load_store(const std::filesystem::path& path);

struct SplitTriple {
  InteractionSequence train;
  ItemId valid_target;
  ItemId test_target;

  // train + valid_target: the input history used when predicting test_target.
  std::vector<ItemId> test_history() const;
  // Every item the user touched, targets included.
  std::vector<ItemId> full_history() const;
};

inline constexpr std::size_t kDefaultMinLength = 5;

std::vector<SplitTriple> leave_one_out_split(std::span<const InteractionSequence> sequences,
                                             std::size_t min_length = kDefaultMinLength);

struct CandidateSet {
  std::vector<ItemId> candidates;
  std::size_t target_index = 0;
  std::uint64_t seed = 0;

  const ItemId& target() const { return candidates.at(target_index); }
};

inline constexpr std::size_t kDefaultCandidateSize = 100;

// `user_history` is the user's full interaction history; the target may or
// may not appear in it. Negatives are drawn uniformly without replacement
// from items the user never touched.
CandidateSet sample_candidates(std::span<const ItemId> user_history, const Catalog& catalog,
                               const ItemId& target,
                               std::size_t candidate_size = kDefaultCandidateSize,
                               std::uint64_t seed = 0);

}  // namespace cesrec
