#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cesrec/alignment.hpp"
#include "cesrec/constructor.hpp"
#include "cesrec/data.hpp"
#include "cesrec/error.hpp"
#include "cesrec/feedback.hpp"
#include "cesrec/ranking.hpp"
#include "cesrec/srs.hpp"

namespace cesrec {

// Single relevant item: HR@K = [rank <= K], NDCG@K = 1/log2(rank+1) within K.
double hr_at_k(const RankedResult& ranked, std::size_t k);
double ndcg_at_k(const RankedResult& ranked, std::size_t k);

struct MetricValues {
  double hr5 = 0.0, ndcg5 = 0.0, hr10 = 0.0, ndcg10 = 0.0;

  static MetricValues of(const RankedResult& ranked);
  MetricValues& operator+=(const MetricValues& o);
  MetricValues scaled(double f) const;
};

// ---------------------------------------------------------------------------
// Loop

struct LoopConfig {
  std::size_t rounds = 3;
  std::size_t mask_k = 1;
  bool use_constructor = true;
  std::size_t accept_k = 10;
  // Recompute the user vector from the current sequence every round; when
  // false the vector of the session's initial history is reused.
  bool refuse_per_round = true;
  // Items inserted by the constructor may not be masked in later rounds.
  bool protect_replacements = true;
  SimilarityFn fn = SimilarityFn::cosine;
};

void to_json(nlohmann::json& j, const LoopConfig& c);
void from_json(const nlohmann::json& j, LoopConfig& c);

struct StageTimings {
  double masking_ms = 0.0;
  double feedback_ms = 0.0;
  double construction_ms = 0.0;
  double ranking_ms = 0.0;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<ItemId> input;
  std::optional<MaskingReport> masking;
  std::optional<Feedback> feedback;
  std::string feedback_source;  // "simulator", "simulator-fallback", "user"
  std::optional<PseudoSequence> pseudo;
  RankedResult ranking;
  bool accepted = false;
  bool failed = false;
  std::optional<ErrorCode> error_code;
  std::string error;
  StageTimings timings;

  // Sequence handed to the next round.
  const std::vector<ItemId>& output() const { return pseudo ? pseudo->items : input; }
};

struct SessionTrace {
  std::string user_id;
  std::optional<ItemId> target;
  std::vector<RoundRecord> rounds;
};

struct TraceJsonOptions {
  bool include_timings = false;
  std::size_t top_n = 10;
};

nlohmann::json to_json(const MaskingReport& m);
nlohmann::json to_json(const RoundRecord& r, const TraceJsonOptions& options = {});
// Inverses of the above. A ranking is restored only as far as it was written,
// so persist with top_n = SIZE_MAX.
MaskingReport masking_from_json(const nlohmann::json& j);
RoundRecord round_from_json(const nlohmann::json& j);
// One JSON object per round, newline-terminated.
std::string trace_to_jsonl(const SessionTrace& trace, const TraceJsonOptions& options = {});
// Round r+1 input equals round r output for every round.
bool check_trace_chaining(const SessionTrace& trace);

using Ranker = std::function<RankedResult(std::span<const ItemId> sequence)>;

struct Components {
  const Catalog& catalog;
  const SrsModel& srs;
  const EmbeddingTable& hybrid;
  const PseudoConstructor& constructor;
  const FeedbackSimulator* simulator = nullptr;
};

// Stateful loop over one session: round 0 ranks the history, every later
// round masks, takes feedback, rewrites and re-ranks.
class LoopSession {
 public:
  LoopSession(const Components& components, LoopConfig config, std::vector<ItemId> history,
              Ranker ranker, std::optional<ItemId> target = std::nullopt, std::string user_id = {});
  // Resumes from a recorded trace without re-running any round.
  LoopSession(const Components& components, LoopConfig config, Ranker ranker, SessionTrace restored);

  const SessionTrace& trace() const noexcept { return trace_; }
  const std::vector<ItemId>& sequence() const noexcept { return sequence_; }
  std::size_t rounds_done() const noexcept { return trace_.rounds.size() - 1; }

  // Runs one round with the given feedback. Stage errors mark the round
  // failed instead of throwing.
  const RoundRecord& step(const Feedback& feedback, std::string source = "user");
  // Simulated feedback against the current top-1 and the target's attributes.
  const RoundRecord& step_simulated();

 private:
  const RoundRecord& run_round(const std::function<Feedback(RoundRecord&)>& get_feedback);
  std::vector<bool> next_protection(const RoundRecord& rec) const;

  Components c_;
  LoopConfig config_;
  Ranker ranker_;
  SessionTrace trace_;
  std::vector<ItemId> sequence_;
  std::vector<bool> protected_;
  Vector initial_user_;
};

// Plain SRS ranking followed by up to `rounds` simulated rounds, halting
// once the target ranks within accept_k.
SessionTrace run_cesrec_loop(const SplitTriple& triple, const CandidateSet& candidates,
                             const Components& components, const LoopConfig& config);

// ---------------------------------------------------------------------------
// Synthetic data

struct PreferenceShiftConfig {
  std::size_t users = 1000;
  std::size_t genres = 6;
  std::size_t directors = 5;
  std::size_t items_per_cell = 12;
  std::size_t min_history = 6;  // before the valid item
  std::size_t max_history = 10;
  double mixed_user_share = 0.5;
  double secondary_rate = 0.35;
  bool inject_outlier = true;
  std::uint64_t seed = 7;
};

// Items are (genre, director) cells. Each user has a director, a main genre,
// optionally a secondary genre, and one injected off-genre, off-director
// outlier; the test target comes from an unseen genre with the user's director.
Dataset make_preference_shift_dataset(const PreferenceShiftConfig& config);

struct CycleConfig {
  std::size_t items = 50;
  std::size_t users = 500;
  std::size_t min_length = 10;
  std::size_t max_length = 20;
  std::size_t filler_items = 0;  // catalog items that never occur
  std::uint64_t seed = 11;
};

// Item ids "0".."items-1"; each user walks next = (i+1) mod items.
Dataset make_cycle_dataset(const CycleConfig& config);

// Movies around a horror/comedy viewer plus genre-run training users.
struct CaseStudyFixture {
  Dataset dataset;
  std::vector<ItemId> history;  // the 14-movie session
  ItemId target;                // "Halloween: H20"
};
CaseStudyFixture make_case_study_fixture(std::size_t training_users = 800, std::uint64_t seed = 5);

// The 12-movie polarity example with a minimal catalog.
struct PolarityFixture {
  Catalog catalog;
  std::vector<ItemId> sequence;
};
PolarityFixture make_polarity_fixture();

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentConfig {
  std::string dataset = "synthetic";
  std::uint64_t seed = 42;
  std::size_t candidate_size = kDefaultCandidateSize;
  std::size_t min_length = kDefaultMinLength;
  std::size_t max_users = 0;  // 0 = all
  SrsConfig srs;
  AdapterHyper adapter;
  nlohmann::json provider = {{"kind", "mock-attribute"}};
  LoopConfig loop;
  std::string constructor = "rule-based";  // or "remote-chat"
  std::string simulator = "deterministic";  // or "remote"
  // {"url", "token_env", "timeout_s", "temperature", "max_tokens"} for remote backends.
  nlohmann::json chat = nlohmann::json::object();
  std::size_t threads = 0;  // 0 = hardware concurrency
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
std::string config_fingerprint(const ExperimentConfig& c);

// Settings the case-study fixture is calibrated for: a small SRS whose
// collaborative space separates the horror/comedy cluster from the rest.
// The outcome is seed-sensitive; srs.seed is pinned.
ExperimentConfig case_study_config();

// Trained components plus the per-user candidate sets, drawn once and reused
// across rounds and variants.
struct PreparedExperiment {
  ExperimentConfig config;
  Dataset dataset;
  std::vector<SplitTriple> triples;
  std::vector<CandidateSet> candidates;
  std::unique_ptr<SrsModel> srs;
  std::unique_ptr<EmbeddingTable> semantic;
  std::unique_ptr<EmbeddingTable> hybrid;
  AdapterParams adapter;
  double prepare_seconds = 0.0;
};

// Trains the SRS and adapter unless `checkpoint_dir` already holds srs.ckpt
// and adapter.ckpt for the same settings; fresh checkpoints, semantic.emb and
// the embedding cache are written there when it is non-empty.
PreparedExperiment prepare_experiment(Dataset dataset, const ExperimentConfig& config,
                                      const std::filesystem::path& checkpoint_dir = {});

struct MetricReport {
  std::string variant;
  std::string dataset;
  std::size_t n_users = 0;
  MetricValues metrics;                  // after the last round
  std::vector<MetricValues> per_round;       // round-only, accepted users carried forward
  std::vector<MetricValues> per_round_best;  // best round so far per user
  std::size_t failed_rounds = 0;
  std::string config_fingerprint;
};

void to_json(nlohmann::json& j, const MetricReport& r);

struct LatencyReport {
  std::string variant;
  std::size_t rounds = 0;
  StageTimings mean;  // per executed round
};

struct VariantResult {
  MetricReport report;
  LatencyReport latency;
  std::vector<SessionTrace> traces;
};

inline const std::vector<std::string> kVariants = {"baseline", "full", "no_dual_alignment",
                                                   "no_constructor"};

LoopConfig variant_loop(const std::string& variant, const LoopConfig& base);

// Runs one variant over every prepared user (or the given subset).
VariantResult run_variant(const PreparedExperiment& exp, const std::string& variant,
                          const LoopConfig& loop, const std::vector<std::size_t>* users = nullptr);

// Table-shaped reports. Writes report.jsonl, report.txt, latency.json and
// traces/<variant>/<user>.jsonl under `out_dir` when it is non-empty.
std::vector<VariantResult> run_table(const PreparedExperiment& exp, std::span<const std::string> variants,
                                     const std::filesystem::path& out_dir = {});

std::string render_table(std::span<const MetricReport> reports);

struct SweepPoint {
  std::string sweep;  // "rounds", "mask_k", "length_bin"
  std::string point;
  std::string variant;
  MetricReport report;
};

// Rounds 1..5, k 0..5 and three history-length bins; writes sweeps.tsv.
std::vector<SweepPoint> run_sweeps(const PreparedExperiment& exp, const std::filesystem::path& out_dir = {});

}  // namespace cesrec
