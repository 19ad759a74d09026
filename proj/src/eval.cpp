#include "cesrec/eval.hpp"

#include <chrono>
#include <cmath>

#include <fmt/format.h>

#include "cesrec/error.hpp"

namespace cesrec {

using nlohmann::json;

double hr_at_k(const RankedResult& ranked, std::size_t k) {
  if (!ranked.target_rank) throw Error(ErrorCode::invalid_argument, "ranked result has no target");
  return *ranked.target_rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(const RankedResult& ranked, std::size_t k) {
  if (!ranked.target_rank) throw Error(ErrorCode::invalid_argument, "ranked result has no target");
  const auto r = *ranked.target_rank;
  return r <= k ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

MetricValues MetricValues::of(const RankedResult& ranked) {
  return {hr_at_k(ranked, 5), ndcg_at_k(ranked, 5), hr_at_k(ranked, 10), ndcg_at_k(ranked, 10)};
}

MetricValues& MetricValues::operator+=(const MetricValues& o) {
  hr5 += o.hr5;
  ndcg5 += o.ndcg5;
  hr10 += o.hr10;
  ndcg10 += o.ndcg10;
  return *this;
}

MetricValues MetricValues::scaled(double f) const { return {hr5 * f, ndcg5 * f, hr10 * f, ndcg10 * f}; }

void to_json(json& j, const LoopConfig& c) {
  j = {{"rounds", c.rounds},
       {"mask_k", c.mask_k},
       {"use_constructor", c.use_constructor},
       {"accept_k", c.accept_k},
       {"refuse_per_round", c.refuse_per_round},
       {"protect_replacements", c.protect_replacements},
       {"similarity", to_string(c.fn)}};
}

void from_json(const json& j, LoopConfig& c) {
  LoopConfig d;
  c.rounds = j.value("rounds", d.rounds);
  c.mask_k = j.value("mask_k", d.mask_k);
  c.use_constructor = j.value("use_constructor", d.use_constructor);
  c.accept_k = j.value("accept_k", d.accept_k);
  c.refuse_per_round = j.value("refuse_per_round", d.refuse_per_round);
  c.protect_replacements = j.value("protect_replacements", d.protect_replacements);
  c.fn = parse_similarity(j.value("similarity", std::string(to_string(d.fn))));
  if (c.accept_k == 0) throw Error(ErrorCode::invalid_argument, "accept_k must be at least 1");
}

// ---------------------------------------------------------------------------
// Trace serialization

namespace {

json ids_json(std::span<const ItemId> ids) {
  json a = json::array();
  for (const auto& id : ids) a.push_back(id.str());
  return a;
}

}  // namespace

json to_json(const MaskingReport& m) {
  return {{"similarity", to_string(m.fn)},
          {"scores", m.scores},
          {"report_scores", m.report_scores},
          {"masked", ids_json(m.masked)},
          {"masked_positions", m.masked_positions},
          {"retained", ids_json(m.retained)}};
}

json to_json(const RoundRecord& r, const TraceJsonOptions& options) {
  json j;
  j["round"] = r.round;
  j["input"] = ids_json(r.input);
  j["masking"] = r.masking ? to_json(*r.masking) : json(nullptr);
  j["feedback"] = r.feedback ? json(*r.feedback) : json(nullptr);
  j["feedback_source"] = r.feedback_source;
  j["pseudo"] = r.pseudo ? to_json(*r.pseudo) : json(nullptr);
  json top = json::array();
  for (std::size_t i = 0; i < r.ranking.ranking.size() && i < options.top_n; ++i)
    top.push_back({{"item", r.ranking.ranking[i].item.str()}, {"score", r.ranking.ranking[i].score}});
  j["ranking"] = {{"top", top},
                  {"size", r.ranking.ranking.size()},
                  {"target_rank", r.ranking.target_rank ? json(*r.ranking.target_rank) : json(nullptr)}};
  j["accepted"] = r.accepted;
  j["failed"] = r.failed;
  if (r.failed) j["error"] = {{"code", r.error_code ? to_string(*r.error_code) : "unknown"}, {"message", r.error}};
  if (options.include_timings)
    j["timings_ms"] = {{"masking", r.timings.masking_ms},
                       {"feedback", r.timings.feedback_ms},
                       {"construction", r.timings.construction_ms},
                       {"ranking", r.timings.ranking_ms}};
  return j;
}

MaskingReport masking_from_json(const json& j) {
  MaskingReport m;
  m.fn = parse_similarity(j.at("similarity").get<std::string>());
  m.scores = j.at("scores").get<std::vector<double>>();
  m.report_scores = j.at("report_scores").get<std::vector<double>>();
  m.masked_positions = j.at("masked_positions").get<std::vector<std::size_t>>();
  for (const auto& id : j.at("masked")) m.masked.emplace_back(id.get<std::string>());
  for (const auto& id : j.at("retained")) m.retained.emplace_back(id.get<std::string>());
  return m;
}

RoundRecord round_from_json(const json& j) {
  RoundRecord r;
  r.round = j.at("round").get<std::size_t>();
  for (const auto& id : j.at("input")) r.input.emplace_back(id.get<std::string>());
  if (!j.at("masking").is_null()) {
    r.masking = masking_from_json(j["masking"]);
    r.masking->input = r.input;
  }
  if (!j.at("feedback").is_null()) r.feedback = j["feedback"].get<Feedback>();
  r.feedback_source = j.value("feedback_source", "");
  if (!j.at("pseudo").is_null()) r.pseudo = pseudo_from_json(j["pseudo"]);
  const auto& ranking = j.at("ranking");
  for (const auto& e : ranking.at("top"))
    r.ranking.ranking.push_back({ItemId(e.at("item").get<std::string>()), e.at("score").get<double>()});
  if (!ranking.at("target_rank").is_null()) r.ranking.target_rank = ranking["target_rank"].get<std::size_t>();
  r.accepted = j.value("accepted", false);
  r.failed = j.value("failed", false);
  if (r.failed && j.contains("error")) {
    const auto code = j["error"].value("code", "");
    for (auto c : {ErrorCode::invalid_argument, ErrorCode::io, ErrorCode::format, ErrorCode::not_found,
                   ErrorCode::numeric, ErrorCode::backend, ErrorCode::conflict})
      if (code == to_string(c)) r.error_code = c;
    r.error = j["error"].value("message", "");
  }
  if (j.contains("timings_ms")) {
    const auto& t = j["timings_ms"];
    r.timings = {t.value("masking", 0.0), t.value("feedback", 0.0), t.value("construction", 0.0),
                 t.value("ranking", 0.0)};
  }
  return r;
}

std::string trace_to_jsonl(const SessionTrace& trace, const TraceJsonOptions& options) {
  std::string out;
  for (const auto& r : trace.rounds) {
    json j = to_json(r, options);
    j["user_id"] = trace.user_id;
    if (trace.target) j["target"] = trace.target->str();
    out += j.dump();
    out += '\n';
  }
  return out;
}

bool check_trace_chaining(const SessionTrace& trace) {
  for (std::size_t r = 1; r < trace.rounds.size(); ++r)
    if (trace.rounds[r].input != trace.rounds[r - 1].output()) return false;
  for (const auto& r : trace.rounds) {
    if (!r.pseudo) continue;
    const auto expected = r.masking ? r.masking->retained.size() : r.input.size();
    if (r.pseudo->items.size() != expected) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

LoopSession::LoopSession(const Components& components, LoopConfig config, std::vector<ItemId> history,
                         Ranker ranker, std::optional<ItemId> target, std::string user_id)
    : c_(components), config_(config), ranker_(std::move(ranker)), sequence_(std::move(history)) {
  if (sequence_.empty()) throw Error(ErrorCode::invalid_argument, "session history is empty");
  if (config_.accept_k == 0) throw Error(ErrorCode::invalid_argument, "accept_k must be at least 1");
  trace_.user_id = std::move(user_id);
  trace_.target = std::move(target);
  protected_.assign(sequence_.size(), false);
  initial_user_ = fuse_user(sequence_, c_.hybrid);

  RoundRecord r0;
  r0.round = 0;
  r0.input = sequence_;
  const auto t0 = Clock::now();
  r0.ranking = ranker_(sequence_);
  r0.timings.ranking_ms = ms_since(t0);
  if (trace_.target) r0.accepted = check_acceptance(r0.ranking, config_.accept_k);
  trace_.rounds.push_back(std::move(r0));
}

LoopSession::LoopSession(const Components& components, LoopConfig config, Ranker ranker, SessionTrace restored)
    : c_(components), config_(config), ranker_(std::move(ranker)), trace_(std::move(restored)) {
  if (trace_.rounds.empty() || trace_.rounds.front().input.empty())
    throw Error(ErrorCode::format, "restored trace has no round 0");
  if (!check_trace_chaining(trace_)) throw Error(ErrorCode::format, "restored trace is not chained");
  for (const auto& r : trace_.rounds)
    for (const auto& id : r.input)
      if (!c_.catalog.contains(id))
        throw Error(ErrorCode::format, fmt::format("restored trace references unknown item '{}'", id.str()));
  initial_user_ = fuse_user(trace_.rounds.front().input, c_.hybrid);
  sequence_ = trace_.rounds.front().input;
  protected_.assign(sequence_.size(), false);
  for (std::size_t r = 1; r < trace_.rounds.size(); ++r) {
    const auto& rec = trace_.rounds[r];
    if (rec.failed) continue;
    protected_ = next_protection(rec);
    sequence_ = rec.output();
  }
}

std::vector<bool> LoopSession::next_protection(const RoundRecord& rec) const {
  std::vector<bool> next;
  std::size_t m = 0;
  const auto& masked = rec.masking->masked_positions;
  for (std::size_t i = 0; i < protected_.size(); ++i) {
    if (m < masked.size() && masked[m] == i) {
      ++m;
      continue;
    }
    next.push_back(protected_[i]);
  }
  if (config_.protect_replacements && rec.pseudo)
    for (auto pos : rec.pseudo->replaced_positions()) next[pos] = true;
  return next;
}

const RoundRecord& LoopSession::step(const Feedback& feedback, std::string source) {
  return run_round([&](RoundRecord& rec) {
    rec.feedback_source = std::move(source);
    return feedback;
  });
}

const RoundRecord& LoopSession::step_simulated() {
  return run_round([&](RoundRecord& rec) {
    if (!c_.simulator) throw Error(ErrorCode::invalid_argument, "no feedback simulator configured");
    if (!trace_.target) throw Error(ErrorCode::invalid_argument, "simulated feedback needs a target");
    const auto& previous = trace_.rounds.back().ranking;
    if (previous.ranking.empty()) throw Error(ErrorCode::invalid_argument, "nothing was recommended");
    const auto result = c_.simulator->simulate(c_.catalog.at(previous.top().item),
                                               c_.catalog.at(*trace_.target).attributes);
    rec.feedback_source = result.fell_back ? "simulator-fallback" : "simulator";
    return result.feedback;
  });
}

const RoundRecord& LoopSession::run_round(const std::function<Feedback(RoundRecord&)>& get_feedback) {
  RoundRecord rec;
  rec.round = trace_.rounds.size();
  rec.input = sequence_;
  std::vector<bool> next_protected;
  try {
    const Vector user = config_.refuse_per_round ? fuse_user(sequence_, c_.hybrid) : initial_user_;

    auto t0 = Clock::now();
    const std::size_t k = std::min(config_.mask_k, sequence_.size() - 1);
    MaskOptions mask_options;
    mask_options.fn = config_.fn;
    mask_options.user_vector = &user;
    for (std::size_t i = 0; i < protected_.size(); ++i)
      if (protected_[i]) mask_options.protected_positions.push_back(i);
    rec.masking = detect_and_mask(sequence_, c_.hybrid, k, mask_options);
    rec.timings.masking_ms = ms_since(t0);

    t0 = Clock::now();
    rec.feedback = get_feedback(rec);
    const bool remote = config_.use_constructor && c_.constructor.config().kind == ConstructorKind::remote_chat;
    rec.feedback->validate(remote);
    rec.timings.feedback_ms = ms_since(t0);

    t0 = Clock::now();
    const auto& masked = rec.masking->retained;
    if (config_.use_constructor) {
      RuleOptions rule;
      rule.fn = config_.fn;
      rule.user_vector = &user;
      rec.pseudo = c_.constructor.construct(masked, *rec.feedback, rule);
      if (rec.pseudo->fell_back && rec.pseudo->unchanged)
        throw Error(ErrorCode::backend, fmt::format("{}", fmt::join(rec.pseudo->warnings, "; ")));
    } else {
      PseudoSequence p;
      p.items = masked;
      p.provenance.assign(masked.size(), SlotProvenance{});
      p.backend = "none";
      rec.pseudo = std::move(p);
    }
    rec.pseudo->round = rec.round;
    next_protected = next_protection(rec);
    rec.timings.construction_ms = ms_since(t0);

    t0 = Clock::now();
    rec.ranking = ranker_(rec.pseudo->items);
    rec.timings.ranking_ms = ms_since(t0);
    if (trace_.target) rec.accepted = check_acceptance(rec.ranking, config_.accept_k);
  } catch (const Error& e) {
    rec.failed = true;
    rec.error_code = e.code();
    rec.error = e.what();
    rec.pseudo.reset();
    rec.ranking = trace_.rounds.back().ranking;
    rec.accepted = false;
  }
  if (!rec.failed) {
    sequence_ = rec.pseudo->items;
    protected_ = std::move(next_protected);
  }
  trace_.rounds.push_back(std::move(rec));
  return trace_.rounds.back();
}

SessionTrace run_cesrec_loop(const SplitTriple& triple, const CandidateSet& candidates,
                             const Components& components, const LoopConfig& config) {
  auto history = triple.test_history();
  const auto cap = components.srs.config().max_seq_len;
  if (history.size() > cap) history.erase(history.begin(), history.end() - static_cast<std::ptrdiff_t>(cap));
  const SrsModel& srs = components.srs;
  LoopSession session(
      components, config, std::move(history),
      [&srs, &candidates](std::span<const ItemId> seq) { return score_candidates(srs, seq, candidates); },
      candidates.target(), triple.train.user_id);
  for (std::size_t r = 0; r < config.rounds; ++r) {
    if (session.trace().rounds.back().accepted) break;
    if (session.step_simulated().failed) break;
  }
  return session.trace();
}

}  // namespace cesrec
