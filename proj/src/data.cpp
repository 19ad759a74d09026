#include "cesrec/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "cesrec/error.hpp"

namespace cesrec {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Catalog

std::string render_content(const std::string& title, const AttributeMap& attributes,
                           std::span<const std::string> schema) {
  std::string out = title;
  out += '.';
  for (const auto& name : schema) {
    auto it = attributes.find(name);
    if (it == attributes.end() || it->second.empty()) continue;
    out += ' ';
    out += name;
    out += ": ";
    bool first = true;
    for (const auto& v : it->second) {
      if (!first) out += ", ";
      out += v;
      first = false;
    }
    out += '.';
  }
  return out;
}

Catalog::Catalog(std::vector<std::string> attribute_schema)
    : schema_(std::move(attribute_schema)) {}

const Item& Catalog::add(Item item) {
  if (item.id.empty()) throw Error(ErrorCode::invalid_argument, "item id must be non-empty");
  if (item.title.empty())
    throw Error(ErrorCode::invalid_argument,
                fmt::format("item {} has an empty title", item.id.str()));
  if (index_.contains(item.id))
    throw Error(ErrorCode::invalid_argument,
                fmt::format("duplicate item id {}", item.id.str()), {item.id.str()});
  for (auto it = item.attributes.begin(); it != item.attributes.end();) {
    if (it->second.empty()) {
      it = item.attributes.erase(it);
      continue;
    }
    if (std::find(schema_.begin(), schema_.end(), it->first) == schema_.end())
      schema_.push_back(it->first);
    ++it;
  }
  item.content = render_content(item.title, item.attributes, schema_);
  index_.emplace(item.id, items_.size());
  items_.push_back(std::move(item));
  return items_.back();
}

const Item& Catalog::at(const ItemId& id) const {
  if (const Item* item = find(id)) return *item;
  throw Error(ErrorCode::not_found, fmt::format("unknown item id {}", id.str()), {id.str()});
}

const Item* Catalog::find(const ItemId& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &items_[it->second];
}

std::optional<std::size_t> Catalog::index_of(const ItemId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<ItemId> Catalog::items_with(const std::string& attribute,
                                        const std::string& value) const {
  std::vector<ItemId> out;
  for (const auto& item : items_) {
    auto it = item.attributes.find(attribute);
    if (it != item.attributes.end() && it->second.contains(value)) out.push_back(item.id);
  }
  return out;
}

std::map<std::string, std::set<std::string>> Catalog::vocabulary() const {
  std::map<std::string, std::set<std::string>> vocab;
  for (const auto& item : items_)
    for (const auto& [name, values] : item.attributes) vocab[name].insert(values.begin(), values.end());
  return vocab;
}

std::vector<ItemId> InteractionSequence::item_ids() const {
  std::vector<ItemId> ids;
  ids.reserve(events.size());
  for (const auto& e : events) ids.push_back(e.item);
  return ids;
}

std::size_t Dataset::event_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.events.size();
  return n;
}

const InteractionSequence* Dataset::find_user(const std::string& user_id) const {
  for (const auto& s : sequences)
    if (s.user_id == user_id) return &s;
  return nullptr;
}

std::vector<InteractionSequence> build_sequences(std::vector<std::pair<std::string, Event>> rows) {
  std::map<std::string, InteractionSequence,
           decltype([](const std::string& a, const std::string& b) {
             return ItemId::natural_compare(a, b) < 0;
           })>
      by_user;
  for (auto& [user, event] : rows) {
    auto& seq = by_user[user];
    seq.user_id = user;
    seq.events.push_back(std::move(event));
  }
  std::vector<InteractionSequence> out;
  out.reserve(by_user.size());
  for (auto& [user, seq] : by_user) {
    std::stable_sort(seq.events.begin(), seq.events.end(),
                     [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
    out.push_back(std::move(seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loaders

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, fmt::format("cannot read {}", path.string()));
  return in;
}

std::vector<std::string_view> split_on(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(line.substr(start));
      return parts;
    }
    parts.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

void finish_report(Dataset& ds) {
  auto& r = ds.report;
  if (r.unknown_item_events > 0) {
    r.warnings.push_back(fmt::format("{} interactions referenced unknown items and were skipped",
                                     r.unknown_item_events));
  }
  if (r.skipped_lines > 0)
    r.warnings.push_back(fmt::format("{} malformed lines skipped", r.skipped_lines));
  if (ds.catalog.empty()) r.warnings.emplace_back("empty catalog");
  if (ds.sequences.empty()) r.warnings.emplace_back("no interactions loaded: zero sequences");
  for (const auto& w : r.warnings) spdlog::warn("{}", w);
}

}  // namespace

Dataset load_movielens(const std::filesystem::path& ratings_path,
                       const std::filesystem::path& movies_path) {
  Dataset ds;
  ds.catalog = Catalog({"genre"});
  auto movies = open_input(movies_path);
  auto ratings = open_input(ratings_path);

  std::string line;
  while (std::getline(movies, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    auto parts = split_on(line, "::");
    if (parts.size() != 3 || parts[0].empty() || parts[1].empty()) {
      ++ds.report.skipped_lines;
      continue;
    }
    Item item;
    item.id = ItemId(std::string(parts[0]));
    item.title = std::string(parts[1]);
    for (auto g : split_on(parts[2], "|"))
      if (!g.empty() && g != "(no genres listed)") item.attributes["genre"].emplace(g);
    if (ds.catalog.contains(item.id)) {
      ++ds.report.skipped_lines;
      continue;
    }
    ds.catalog.add(std::move(item));
  }

  std::vector<std::pair<std::string, Event>> rows;
  while (std::getline(ratings, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    auto parts = split_on(line, "::");
    double rating = 0;
    std::int64_t ts = 0;
    if (parts.size() != 4 || parts[0].empty() || parts[1].empty() ||
        !parse_number(parts[2], rating) || !parse_number(parts[3], ts)) {
      ++ds.report.skipped_lines;
      continue;
    }
    ItemId item{std::string(parts[1])};
    if (!ds.catalog.contains(item)) {
      ++ds.report.unknown_item_events;
      continue;
    }
    rows.emplace_back(std::string(parts[0]), Event{std::move(item), ts});
  }
  ds.sequences = build_sequences(std::move(rows));
  finish_report(ds);
  return ds;
}

namespace {

std::optional<std::string> string_field(const json& j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) {
    auto it = j.find(k);
    if (it == j.end() || it->is_null()) continue;
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
  }
  return std::nullopt;
}

std::optional<std::int64_t> time_field(const json& j) {
  for (const char* k : {"unixReviewTime", "unix_time", "timestamp"}) {
    auto it = j.find(k);
    if (it == j.end()) continue;
    std::int64_t t = 0;
    if (it->is_number()) {
      t = it->get<std::int64_t>();
    } else if (it->is_string() && parse_number(std::string_view(it->get_ref<const std::string&>()), t)) {
    } else {
      continue;
    }
    // Millisecond timestamps (newer Amazon dumps) are folded to seconds.
    if (t > 100'000'000'000LL) t /= 1000;
    return t;
  }
  return std::nullopt;
}

}  // namespace

Dataset load_amazon(const std::filesystem::path& reviews_path,
                    const std::filesystem::path& metadata_path) {
  Dataset ds;
  ds.catalog = Catalog({"category"});
  auto reviews = open_input(reviews_path);
  auto metadata = open_input(metadata_path);

  std::vector<std::pair<std::string, Event>> rows;
  std::string line;
  while (std::getline(reviews, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      ++ds.report.skipped_lines;
      continue;
    }
    auto user = string_field(j, {"reviewerID", "reviewer_id", "user_id"});
    auto item = string_field(j, {"asin", "item_id", "parent_asin"});
    auto ts = time_field(j);
    if (!user || !item || !ts || user->empty() || item->empty()) {
      ++ds.report.skipped_lines;
      continue;
    }
    rows.emplace_back(*user, Event{ItemId(*item), *ts});
  }

  std::unordered_map<std::string, Item> meta;
  while (std::getline(metadata, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      ++ds.report.skipped_lines;
      continue;
    }
    auto id = string_field(j, {"asin", "item_id", "parent_asin"});
    if (!id || id->empty()) {
      ++ds.report.skipped_lines;
      continue;
    }
    Item item;
    item.id = ItemId(*id);
    item.title = string_field(j, {"title"}).value_or("");
    if (item.title.empty()) item.title = "unknown-" + *id;
    auto add_category = [&](const json& v) {
      if (v.is_string() && !v.get_ref<const std::string&>().empty())
        item.attributes["category"].insert(v.get<std::string>());
    };
    if (auto it = j.find("category"); it != j.end()) {
      if (it->is_array())
        for (const auto& v : *it) add_category(v);
      else
        add_category(*it);
    }
    if (!item.attributes.contains("category"))
      if (auto it = j.find("main_cat"); it != j.end()) add_category(*it);
    meta.emplace(*id, std::move(item));
  }

  // Catalog holds reviewed items only, in first-seen order of the review file.
  std::unordered_set<std::string> seen;
  for (const auto& [user, event] : rows) {
    const auto& id = event.item.str();
    if (!seen.insert(id).second) continue;
    if (auto it = meta.find(id); it != meta.end()) {
      ds.catalog.add(std::move(it->second));
    } else {
      Item placeholder;
      placeholder.id = event.item;
      placeholder.title = "unknown-" + id;
      placeholder.placeholder = true;
      ds.catalog.add(std::move(placeholder));
      ++ds.report.placeholder_items;
    }
  }
  if (ds.report.placeholder_items > 0)
    ds.report.warnings.push_back(fmt::format(
        "{} reviewed items had no metadata; flagged placeholders synthesized",
        ds.report.placeholder_items));
  ds.sequences = build_sequences(std::move(rows));
  finish_report(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Store

std::string serialize_store(const Dataset& dataset) {
  std::string out;
  json header = {{"record", "header"},
                 {"format_version", kStoreFormatVersion},
                 {"attribute_schema", dataset.catalog.attribute_schema()},
                 {"items", dataset.catalog.size()},
                 {"sequences", dataset.sequences.size()}};
  out += header.dump();
  out += '\n';
  for (const auto& item : dataset.catalog.items()) {
    json attrs = json::object();
    for (const auto& [name, values] : item.attributes) attrs[name] = values;
    json rec = {{"record", "item"},
                {"item_id", item.id.str()},
                {"title", item.title},
                {"attributes", attrs},
                {"placeholder", item.placeholder}};
    out += rec.dump(-1, ' ', false, json::error_handler_t::replace);
    out += '\n';
  }
  for (const auto& seq : dataset.sequences) {
    json events = json::array();
    for (const auto& e : seq.events) events.push_back(json::array({e.item.str(), e.timestamp}));
    json rec = {{"record", "sequence"}, {"user_id", seq.user_id}, {"events", events}};
    out += rec.dump(-1, ' ', false, json::error_handler_t::replace);
    out += '\n';
  }
  return out;
}

void save_store(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  out << serialize_store(dataset);
  if (!out) throw Error(ErrorCode::io, fmt::format("write failed for {}", path.string()));
}

Dataset load_store(const std::filesystem::path& path) {
  auto in = open_input(path);
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw Error(ErrorCode::format, fmt::format("{}:{}: not a JSON record", path.string(), line_no));
    const auto kind = j.value("record", std::string{});
    if (!have_header) {
      if (kind != "header")
        throw Error(ErrorCode::format, fmt::format("{}: missing header record", path.string()));
      const int version = j.value("format_version", -1);
      if (version != kStoreFormatVersion)
        throw Error(ErrorCode::format,
                    fmt::format("{}: store format version {} (expected {})", path.string(),
                                version, kStoreFormatVersion));
      ds.catalog = Catalog(j.at("attribute_schema").get<std::vector<std::string>>());
      have_header = true;
      continue;
    }
    try {
      if (kind == "item") {
        Item item;
        item.id = ItemId(j.at("item_id").get<std::string>());
        item.title = j.at("title").get<std::string>();
        for (const auto& [name, values] : j.at("attributes").items())
          for (const auto& v : values) item.attributes[name].insert(v.get<std::string>());
        item.placeholder = j.value("placeholder", false);
        ds.catalog.add(std::move(item));
      } else if (kind == "sequence") {
        InteractionSequence seq;
        seq.user_id = j.at("user_id").get<std::string>();
        for (const auto& e : j.at("events")) {
          ItemId id(e.at(0).get<std::string>());
          if (!ds.catalog.contains(id))
            throw Error(ErrorCode::format,
                        fmt::format("{}:{}: sequence references unknown item {}", path.string(),
                                    line_no, id.str()));
          seq.events.push_back({std::move(id), e.at(1).get<std::int64_t>()});
        }
        ds.sequences.push_back(std::move(seq));
      } else {
        throw Error(ErrorCode::format,
                    fmt::format("{}:{}: unknown record kind '{}'", path.string(), line_no, kind));
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::format, fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
  }
  if (!have_header)
    throw Error(ErrorCode::format, fmt::format("{}: empty store", path.string()));
  return ds;
}

// ---------------------------------------------------------------------------
// Splits and candidates

std::vector<ItemId> SplitTriple::test_history() const {
  auto ids = train.item_ids();
  ids.push_back(valid_target);
  return ids;
}

std::vector<ItemId> SplitTriple::full_history() const {
  auto ids = test_history();
  ids.push_back(test_target);
  return ids;
}

std::vector<SplitTriple> leave_one_out_split(std::span<const InteractionSequence> sequences,
                                             std::size_t min_length) {
  if (min_length < 3)
    throw Error(ErrorCode::invalid_argument,
                fmt::format("min_length must be >= 3 (got {})", min_length));
  std::vector<SplitTriple> out;
  for (const auto& seq : sequences) {
    const auto n = seq.events.size();
    if (n < min_length) continue;
    SplitTriple t;
    t.train.user_id = seq.user_id;
    t.train.events.assign(seq.events.begin(), seq.events.end() - 2);
    t.valid_target = seq.events[n - 2].item;
    t.test_target = seq.events[n - 1].item;
    out.push_back(std::move(t));
  }
  return out;
}

CandidateSet sample_candidates(std::span<const ItemId> user_history, const Catalog& catalog,
                               const ItemId& target, std::size_t candidate_size,
                               std::uint64_t seed) {
  if (candidate_size == 0)
    throw Error(ErrorCode::invalid_argument, "candidate_size must be positive");
  if (!catalog.contains(target))
    throw Error(ErrorCode::not_found, fmt::format("target {} not in catalog", target.str()),
                {target.str()});
  std::unordered_set<ItemId> history(user_history.begin(), user_history.end());
  const std::size_t required = candidate_size + history.size() + 1;
  if (catalog.size() < required)
    throw Error(ErrorCode::invalid_argument,
                fmt::format("catalog too small for candidate sampling: {} items, need at least "
                            "{} (candidate_size {} + history {} + 1)",
                            catalog.size(), required, candidate_size, history.size()));

  std::vector<const ItemId*> pool;
  pool.reserve(catalog.size());
  for (const auto& item : catalog.items())
    if (item.id != target && !history.contains(item.id)) pool.push_back(&item.id);

  std::mt19937_64 rng(seed);
  const std::size_t negatives = candidate_size - 1;
  for (std::size_t i = 0; i < negatives; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  std::uniform_int_distribution<std::size_t> slot(0, candidate_size - 1);
  CandidateSet set;
  set.seed = seed;
  set.target_index = slot(rng);
  set.candidates.reserve(candidate_size);
  for (std::size_t i = 0; i < negatives; ++i) set.candidates.push_back(*pool[i]);
  set.candidates.insert(set.candidates.begin() + static_cast<std::ptrdiff_t>(set.target_index),
                        target);
  return set;
}

}  // namespace cesrec
