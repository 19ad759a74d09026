#include "cesrec/constructor.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cesrec/error.hpp"

namespace cesrec {

using nlohmann::json;

std::vector<std::size_t> PseudoSequence::replaced_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < provenance.size(); ++i)
    if (provenance[i].replaced) out.push_back(i);
  return out;
}

json to_json(const PseudoSequence& p) {
  json items = json::array();
  json prov = json::array();
  for (std::size_t i = 0; i < p.items.size(); ++i) {
    items.push_back(p.items[i].str());
    if (p.provenance[i].replaced)
      prov.push_back({{"tag", "replaced"}, {"old_item", p.provenance[i].old_item.str()}});
    else
      prov.push_back({{"tag", "kept"}});
  }
  json j = {{"items", items},       {"provenance", prov},   {"round", p.round},
            {"backend", p.backend}, {"fell_back", p.fell_back}, {"unchanged", p.unchanged},
            {"warnings", p.warnings}};
  if (!p.request.empty()) j["request"] = p.request;
  if (!p.response.empty()) j["response"] = p.response;
  return j;
}

PseudoSequence pseudo_from_json(const json& j) {
  PseudoSequence p;
  for (const auto& id : j.at("items")) p.items.emplace_back(id.get<std::string>());
  for (const auto& slot : j.at("provenance")) {
    if (slot.at("tag") == "replaced")
      p.provenance.push_back({true, ItemId(slot.at("old_item").get<std::string>())});
    else
      p.provenance.push_back({});
  }
  if (p.provenance.size() != p.items.size())
    throw Error(ErrorCode::format, "pseudo sequence provenance does not match its items");
  p.round = j.value("round", std::size_t{1});
  p.backend = j.value("backend", "");
  p.fell_back = j.value("fell_back", false);
  p.unchanged = j.value("unchanged", false);
  p.warnings = j.value("warnings", std::vector<std::string>{});
  p.request = j.value("request", "");
  p.response = j.value("response", "");
  return p;
}

namespace {

bool carries(const Item& item, const AttributeValue& av) {
  auto it = item.attributes.find(av.attribute);
  return it != item.attributes.end() && it->second.contains(av.value);
}

PseudoSequence identity_sequence(std::span<const ItemId> sequence, std::string backend) {
  PseudoSequence p;
  p.items.assign(sequence.begin(), sequence.end());
  p.provenance.assign(sequence.size(), SlotProvenance{});
  p.backend = std::move(backend);
  return p;
}

}  // namespace

PseudoSequence rule_based_construct(std::span<const ItemId> sequence, const Feedback& feedback,
                                    const Catalog& catalog, const EmbeddingTable& hybrid,
                                    std::size_t max_replacements, const RuleOptions& options) {
  if (sequence.empty()) throw Error(ErrorCode::invalid_argument, "cannot rewrite an empty sequence");
  if (!feedback.disliked && !feedback.preferred)
    throw Error(ErrorCode::invalid_argument,
                "feedback names no attribute value; raw feedback requires remote backend");
  PseudoSequence out = identity_sequence(sequence, "rule-based");
  if (max_replacements == 0) return out;

  const Vector user = options.user_vector ? *options.user_vector : fuse_user(sequence, hybrid);
  const std::span<const double> u(user.data(), static_cast<std::size_t>(user.size()));
  auto score = [&](const ItemId& id) { return similarity(hybrid.row(id), u, options.fn).raw; };

  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    const Item& item = catalog.at(sequence[i]);
    const bool hit = feedback.disliked ? carries(item, *feedback.disliked)
                                       : !carries(item, *feedback.preferred);
    if (hit) targets.push_back(i);
  }
  if (targets.empty()) {
    const auto& av = feedback.disliked ? *feedback.disliked : *feedback.preferred;
    out.unchanged = true;
    out.warnings.push_back(
        feedback.disliked
            ? fmt::format("no sequence item carries {} '{}'", av.attribute, av.value)
            : fmt::format("every sequence item already carries {} '{}'", av.attribute, av.value));
    return out;
  }
  std::vector<double> target_scores(sequence.size(), 0.0);
  for (auto i : targets) target_scores[i] = score(sequence[i]);
  std::sort(targets.begin(), targets.end(), [&](std::size_t a, std::size_t b) {
    if (target_scores[a] != target_scores[b]) return target_scores[a] < target_scores[b];
    if (sequence[a] != sequence[b]) return sequence[a] < sequence[b];
    return a < b;
  });
  if (targets.size() > max_replacements) targets.resize(max_replacements);

  std::set<ItemId> taken(sequence.begin(), sequence.end());
  struct Candidate {
    ItemId id;
    double score;
  };
  std::vector<Candidate> pool;
  const auto consider = [&](const Item& item) {
    if (taken.contains(item.id) || !hybrid.contains(item.id)) return;
    if (feedback.disliked && carries(item, *feedback.disliked)) return;
    pool.push_back({item.id, score(item.id)});
  };
  if (feedback.preferred) {
    for (const auto& id : catalog.items_with(feedback.preferred->attribute, feedback.preferred->value))
      consider(catalog.at(id));
  } else {
    for (const auto& item : catalog.items()) consider(item);
  }
  std::sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  if (pool.empty()) {
    out.unchanged = true;
    out.warnings.push_back(
        feedback.preferred
            ? fmt::format("no catalog item outside the sequence carries {} '{}'",
                          feedback.preferred->attribute, feedback.preferred->value)
            : "no replacement item available");
    return out;
  }
  std::size_t next = 0;
  for (auto pos : targets) {
    if (next >= pool.size()) {
      out.warnings.push_back("replacement pool exhausted");
      break;
    }
    out.provenance[pos] = {true, out.items[pos]};
    out.items[pos] = pool[next++].id;
  }
  return out;
}

std::string render_sequence(std::span<const ItemId> sequence, const Catalog& catalog) {
  std::string out;
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    if (i) out += kSequenceDelimiter;
    out += catalog.at(sequence[i]).title;
  }
  return out;
}

std::string render_constructor_input(std::span<const ItemId> sequence, const Catalog& catalog,
                                     std::string_view feedback_text) {
  return fmt::format("historical interaction sequence: {}; user feedback: {}.",
                     render_sequence(sequence, catalog), feedback_text);
}

std::vector<ChatMessage> render_constructor_prompt(std::span<const ItemId> sequence,
                                                   const Catalog& catalog,
                                                   std::string_view feedback_text) {
  return {{"user", fmt::format("{}\nInput: {}\nAnswer with the pseudo-interaction sequence only: "
                               "the same number of item titles, on a single line, separated by \"{}\".",
                               kConstructorInstruction,
                               render_constructor_input(sequence, catalog, feedback_text),
                               kSequenceDelimiter)}};
}

// ---------------------------------------------------------------------------
// Title matching

std::string normalize_title(std::string_view title) {
  std::string out;
  for (unsigned char c : title) {
    if (std::isalnum(c)) {
      out += static_cast<char>(std::tolower(c));
    } else if (c == '\'') {
      continue;
    } else if (!out.empty() && out.back() != ' ') {
      out += ' ';
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

TitleMatcher::TitleMatcher(const Catalog& catalog, EmbeddingProvider& provider, double threshold)
    : catalog_(catalog), provider_(provider), threshold_(threshold) {
  for (const auto& item : catalog.items()) {
    auto [it, inserted] = exact_.emplace(normalize_title(item.title), item.id);
    if (!inserted && item.id < it->second) it->second = item.id;
  }
}

void TitleMatcher::ensure_embeddings() {
  if (embedded_) return;
  const auto n = static_cast<Eigen::Index>(catalog_.size());
  title_vectors_ = Matrix::Zero(n, static_cast<Eigen::Index>(provider_.dim()));
  std::vector<std::string> titles;
  for (const auto& item : catalog_.items()) titles.push_back(item.title);
  const std::size_t batch = std::max<std::size_t>(1, provider_.max_batch());
  for (std::size_t lo = 0; lo < titles.size(); lo += batch) {
    const std::size_t hi = std::min(titles.size(), lo + batch);
    const auto rows = provider_.embed(std::span<const std::string>(titles).subspan(lo, hi - lo));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      Eigen::Map<const Vector> v(rows[i].data(), static_cast<Eigen::Index>(rows[i].size()));
      const double norm = v.norm();
      if (norm > 0) title_vectors_.row(static_cast<Eigen::Index>(lo + i)) = v.transpose() / norm;
    }
  }
  embedded_ = true;
}

std::optional<TitleMatcher::Match> TitleMatcher::match(std::string_view title) {
  const auto key = normalize_title(title);
  if (key.empty()) return std::nullopt;
  if (auto it = exact_.find(key); it != exact_.end()) return Match{it->second, 1.0, true};
  ensure_embeddings();
  const std::string text(title);
  const auto rows = provider_.embed(std::span<const std::string>(&text, 1));
  Eigen::Map<const Vector> q(rows.at(0).data(), static_cast<Eigen::Index>(rows.at(0).size()));
  const double qn = q.norm();
  if (qn == 0.0 || title_vectors_.rows() == 0) return std::nullopt;
  const Vector sims = title_vectors_ * (q / qn);
  Eigen::Index best = -1;
  for (Eigen::Index i = 0; i < sims.size(); ++i) {
    if (best < 0 || sims[i] > sims[best] ||
        (sims[i] == sims[best] && catalog_[static_cast<std::size_t>(i)].id <
                                      catalog_[static_cast<std::size_t>(best)].id))
      best = i;
  }
  if (sims[best] < threshold_) return std::nullopt;
  return Match{catalog_[static_cast<std::size_t>(best)].id, sims[best], false};
}

ParsedSequence parse_llm_sequence(std::string_view reply, TitleMatcher& matcher) {
  // Use the first line carrying the delimiter, else the first non-empty line.
  std::string_view line;
  std::string_view rest = reply;
  std::string_view first_nonempty;
  while (!rest.empty()) {
    const auto nl = rest.find('\n');
    auto l = rest.substr(0, nl);
    rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
    if (first_nonempty.empty() && l.find_first_not_of(" \t\r") != std::string_view::npos) first_nonempty = l;
    if (l.find(kSequenceDelimiter) != std::string_view::npos) {
      line = l;
      break;
    }
  }
  if (line.empty()) line = first_nonempty;
  std::string text(line);
  auto trim = [](std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\"'`<>[]");
    const auto e = s.find_last_not_of(" \t\r\"'`<>[].");
    s = b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  trim(text);
  static constexpr std::string_view kPrefix = "pseudo-interaction sequence:";
  if (text.size() >= kPrefix.size()) {
    std::string head = text.substr(0, kPrefix.size());
    std::transform(head.begin(), head.end(), head.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (head == kPrefix) {
      text = text.substr(kPrefix.size());
      trim(text);
    }
  }
  ParsedSequence out;
  if (text.empty()) {
    out.unmatched.push_back(std::string(reply));
    return out;
  }
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(kSequenceDelimiter, start);
    std::string frag = text.substr(start, pos == std::string::npos ? std::string::npos : pos - start);
    const auto b = frag.find_first_not_of(' ');
    const auto e = frag.find_last_not_of(' ');
    frag = b == std::string::npos ? std::string{} : frag.substr(b, e - b + 1);
    if (auto m = matcher.match(frag))
      out.items.push_back(m->id);
    else
      out.unmatched.push_back(frag);
    if (pos == std::string::npos) break;
    start = pos + std::string_view(kSequenceDelimiter).size();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Constructor facade

const char* to_string(ConstructorKind kind) {
  return kind == ConstructorKind::rule_based ? "rule-based" : "remote-chat";
}

ConstructorKind parse_constructor_kind(std::string_view text) {
  if (text == "rule-based") return ConstructorKind::rule_based;
  if (text == "remote-chat" || text == "remote") return ConstructorKind::remote_chat;
  throw Error(ErrorCode::invalid_argument, fmt::format("unknown constructor backend '{}'", text));
}

PseudoConstructor::PseudoConstructor(ConstructorConfig config, const Catalog& catalog,
                                     const EmbeddingTable& hybrid, ChatClient* chat,
                                     TitleMatcher* matcher)
    : config_(config), catalog_(catalog), hybrid_(hybrid), chat_(chat), matcher_(matcher) {
  if (config_.kind == ConstructorKind::remote_chat && (!chat_ || !matcher_))
    throw Error(ErrorCode::invalid_argument, "remote-chat constructor needs a chat client and a title matcher");
}

PseudoSequence PseudoConstructor::construct(std::span<const ItemId> sequence, const Feedback& feedback,
                                            const RuleOptions& options) const {
  if (sequence.empty()) throw Error(ErrorCode::invalid_argument, "cannot rewrite an empty sequence");
  RuleOptions rule = options;
  rule.fn = config_.fn;
  std::vector<std::string> carried;
  std::string request, response;
  bool fell_back = false;

  if (config_.kind == ConstructorKind::remote_chat) {
    const auto messages = render_constructor_prompt(sequence, catalog_, feedback.raw_text);
    request = render_messages(messages);
    try {
      response = chat_->complete(messages, config_.decoding);
      auto parsed = parse_llm_sequence(response, *matcher_);
      if (!parsed.ok())
        throw Error(ErrorCode::backend, fmt::format("unmatched titles in constructor reply: {}",
                                                    fmt::join(parsed.unmatched, "; ")));
      if (parsed.items.size() != sequence.size())
        throw Error(ErrorCode::backend,
                    fmt::format("constructor reply has {} items for a {}-item sequence",
                                parsed.items.size(), sequence.size()));
      PseudoSequence out = identity_sequence(sequence, "remote-chat");
      for (std::size_t i = 0; i < sequence.size(); ++i)
        if (parsed.items[i] != sequence[i]) out.provenance[i] = {true, sequence[i]};
      out.items = std::move(parsed.items);
      out.request = std::move(request);
      out.response = std::move(response);
      return out;
    } catch (const Error& e) {
      fell_back = true;
      carried.push_back(fmt::format("remote constructor rejected ({}); fell back to rule-based", e.what()));
      spdlog::warn("{}", carried.back());
    }
  }

  PseudoSequence out;
  try {
    out = rule_based_construct(sequence, feedback, catalog_, hybrid_, config_.max_replacements, rule);
  } catch (const Error& e) {
    out = identity_sequence(sequence, "rule-based");
    out.unchanged = true;
    out.warnings.push_back(fmt::format("rule-based constructor failed: {}", e.what()));
  }
  out.fell_back = fell_back;
  out.request = std::move(request);
  out.response = std::move(response);
  out.warnings.insert(out.warnings.begin(), carried.begin(), carried.end());
  return out;
}

// ---------------------------------------------------------------------------
// Tuning data

TuningResult generate_tuning_data(std::span<const SplitTriple> triples, const Catalog& catalog,
                                  std::size_t per_user, std::uint64_t seed, std::size_t max_history) {
  if (per_user == 0) throw Error(ErrorCode::invalid_argument, "per_user must be at least 1");
  const auto priority = attribute_priority(catalog.attribute_schema());
  TuningResult result;
  for (std::size_t u = 0; u < triples.size(); ++u) {
    auto history = triples[u].train.item_ids();
    if (max_history > 0 && history.size() > max_history)
      history.erase(history.begin(), history.end() - static_cast<std::ptrdiff_t>(max_history));
    // First priority attribute each position carries.
    std::vector<std::pair<std::size_t, std::string>> slots;
    for (std::size_t i = 0; i < history.size(); ++i) {
      const Item& item = catalog.at(history[i]);
      for (const auto& attr : priority) {
        auto it = item.attributes.find(attr);
        if (it != item.attributes.end() && !it->second.empty()) {
          slots.emplace_back(i, attr);
          break;
        }
      }
    }
    if (slots.empty()) {
      ++result.skipped_users;
      continue;
    }
    std::mt19937_64 rng(mix_seed(seed, u));
    const std::set<ItemId> in_history(history.begin(), history.end());
    bool produced = false;
    for (std::size_t r = 0; r < per_user; ++r) {
      const auto& [pos, attr] = slots[std::uniform_int_distribution<std::size_t>(0, slots.size() - 1)(rng)];
      const auto& original_values = catalog.at(history[pos]).attributes.at(attr);
      std::vector<ItemId> outliers;
      for (const auto& item : catalog.items()) {
        if (in_history.contains(item.id)) continue;
        auto it = item.attributes.find(attr);
        if (it == item.attributes.end() || it->second.empty()) continue;
        if (std::none_of(it->second.begin(), it->second.end(),
                         [&](const std::string& v) { return original_values.contains(v); }))
          outliers.push_back(item.id);
      }
      if (outliers.empty()) continue;
      const ItemId outlier = outliers[std::uniform_int_distribution<std::size_t>(0, outliers.size() - 1)(rng)];
      auto corrupted = history;
      corrupted[pos] = outlier;
      const Feedback fb = structured_feedback(
          AttributeValue{attr, *catalog.at(outlier).attributes.at(attr).begin()},
          AttributeValue{attr, *original_values.begin()});
      result.records.push_back({kConstructorInstruction,
                                render_constructor_input(corrupted, catalog, fb.raw_text),
                                render_sequence(history, catalog)});
      produced = true;
    }
    if (!produced) ++result.skipped_users;
  }
  return result;
}

void write_tuning_jsonl(std::span<const TuningRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  for (const auto& r : records)
    out << json{{"instruction", r.instruction}, {"input", r.input}, {"output", r.output}}.dump() << '\n';
  if (!out) throw Error(ErrorCode::io, fmt::format("write failed for {}", path.string()));
}

}  // namespace cesrec
