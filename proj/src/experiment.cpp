#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cesrec/error.hpp"
#include "cesrec/eval.hpp"
#include "cesrec/semantic.hpp"

namespace cesrec {

using nlohmann::json;

void to_json(json& j, const ExperimentConfig& c) {
  j = {{"dataset", c.dataset},
       {"seed", c.seed},
       {"candidate_size", c.candidate_size},
       {"min_length", c.min_length},
       {"max_users", c.max_users},
       {"srs", c.srs},
       {"adapter",
        {{"hidden_dim", c.adapter.hidden_dim},
         {"lr", c.adapter.lr},
         {"epochs", c.adapter.epochs},
         {"batch", c.adapter.batch},
         {"seed", c.adapter.seed}}},
       {"provider", c.provider},
       {"loop", c.loop},
       {"constructor", c.constructor},
       {"simulator", c.simulator},
       {"chat", c.chat},
       {"threads", c.threads}};
}

void from_json(const json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  c.dataset = j.value("dataset", d.dataset);
  c.seed = j.value("seed", d.seed);
  c.candidate_size = j.value("candidate_size", d.candidate_size);
  c.min_length = j.value("min_length", d.min_length);
  c.max_users = j.value("max_users", d.max_users);
  c.srs = j.contains("srs") ? j["srs"].get<SrsConfig>() : d.srs;
  if (j.contains("adapter")) {
    const auto& a = j["adapter"];
    c.adapter.hidden_dim = a.value("hidden_dim", d.adapter.hidden_dim);
    c.adapter.lr = a.value("lr", d.adapter.lr);
    c.adapter.epochs = a.value("epochs", d.adapter.epochs);
    c.adapter.batch = a.value("batch", d.adapter.batch);
    c.adapter.seed = a.value("seed", d.adapter.seed);
  }
  c.provider = j.value("provider", d.provider);
  c.loop = j.contains("loop") ? j["loop"].get<LoopConfig>() : d.loop;
  c.constructor = j.value("constructor", d.constructor);
  c.simulator = j.value("simulator", d.simulator);
  c.chat = j.value("chat", d.chat);
  c.threads = j.value("threads", d.threads);
}

std::string config_fingerprint(const ExperimentConfig& c) {
  json j = c;
  j.erase("threads");
  return fmt::format("{:016x}", fnv1a64(j.dump()));
}

ExperimentConfig case_study_config() {
  ExperimentConfig c;
  c.dataset = "case-study";
  c.candidate_size = 10;
  c.srs.embed_dim = 8;
  c.srs.max_seq_len = 20;
  c.srs.epochs = 60;
  c.srs.seed = 2;
  c.adapter.epochs = 1000;
  return c;
}

namespace {

std::string components_fingerprint(const ExperimentConfig& c, const Dataset& ds) {
  json j = {{"dataset", c.dataset},
            {"min_length", c.min_length},
            {"srs", c.srs},
            {"adapter", json(c)["adapter"]},
            {"provider", c.provider},
            {"catalog_size", ds.catalog.size()},
            {"events", ds.event_count()}};
  return fmt::format("{:016x}", fnv1a64(j.dump()));
}

}  // namespace

PreparedExperiment prepare_experiment(Dataset dataset, const ExperimentConfig& config,
                                      const std::filesystem::path& checkpoint_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  PreparedExperiment exp;
  exp.config = config;
  exp.dataset = std::move(dataset);
  const auto& catalog = exp.dataset.catalog;
  exp.triples = leave_one_out_split(exp.dataset.sequences, config.min_length);
  if (exp.triples.empty())
    throw Error(ErrorCode::invalid_argument,
                fmt::format("no user has at least {} interactions", config.min_length));

  const std::size_t n_eval = config.max_users ? std::min(config.max_users, exp.triples.size()) : exp.triples.size();
  exp.candidates.reserve(n_eval);
  for (std::size_t i = 0; i < n_eval; ++i) {
    const auto history = exp.triples[i].full_history();
    exp.candidates.push_back(sample_candidates(history, catalog, exp.triples[i].test_target,
                                               config.candidate_size, mix_seed(config.seed, i)));
  }

  const auto fingerprint = components_fingerprint(config, exp.dataset);
  bool reuse = false;
  if (!checkpoint_dir.empty()) {
    std::filesystem::create_directories(checkpoint_dir);
    std::ifstream manifest(checkpoint_dir / "manifest.json");
    if (manifest) {
      const auto m = json::parse(manifest, nullptr, false);
      reuse = !m.is_discarded() && m.value("fingerprint", "") == fingerprint &&
              std::filesystem::exists(checkpoint_dir / "srs.ckpt") &&
              std::filesystem::exists(checkpoint_dir / "adapter.ckpt");
      if (!reuse) spdlog::warn("checkpoints in {} do not match this configuration; retraining",
                               checkpoint_dir.string());
    }
  }

  auto provider = make_embedding_provider(config.provider);
  if (!checkpoint_dir.empty()) {
    exp.semantic = std::make_unique<EmbeddingTable>(
        embed_catalog(catalog, *provider, checkpoint_dir / "semantic_cache.jsonl"));
    save_embedding_table(*exp.semantic, checkpoint_dir / "semantic.emb");
  } else
    exp.semantic = std::make_unique<EmbeddingTable>(embed_catalog(catalog, *provider));

  if (reuse) {
    spdlog::info("loading SRS and adapter from {}", checkpoint_dir.string());
    exp.srs = std::make_unique<SrsModel>(load_srs(checkpoint_dir / "srs.ckpt"));
    exp.adapter = load_adapter(checkpoint_dir / "adapter.ckpt");
  } else {
    spdlog::info("training SRS on {} users ({} epochs)", exp.triples.size(), config.srs.epochs);
    exp.srs = std::make_unique<SrsModel>(train_srs(exp.triples, catalog, config.srs));
    const auto collab = export_collaborative_embeddings(*exp.srs);
    spdlog::info("training adapter ({} epochs)", config.adapter.epochs);
    exp.adapter = train_adapter(*exp.semantic, collab, config.adapter);
    if (!checkpoint_dir.empty()) {
      save_srs(*exp.srs, checkpoint_dir / "srs.ckpt");
      save_adapter(exp.adapter, checkpoint_dir / "adapter.ckpt");
      std::ofstream(checkpoint_dir / "manifest.json") << json{{"fingerprint", fingerprint}}.dump(2) << '\n';
    }
  }
  exp.hybrid = std::make_unique<EmbeddingTable>(build_hybrid_table(exp.adapter, *exp.semantic));
  exp.prepare_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return exp;
}

void to_json(json& j, const MetricReport& r) {
  auto mv = [](const MetricValues& m) {
    return json{{"HR@5", m.hr5}, {"NDCG@5", m.ndcg5}, {"HR@10", m.hr10}, {"NDCG@10", m.ndcg10}};
  };
  json rounds = json::array();
  for (std::size_t i = 0; i < r.per_round.size(); ++i)
    rounds.push_back({{"round", i}, {"round_only", mv(r.per_round[i])}, {"cumulative_best", mv(r.per_round_best[i])}});
  j = {{"variant", r.variant},   {"dataset", r.dataset},         {"n_users", r.n_users},
       {"metrics", mv(r.metrics)}, {"per_round", rounds},        {"failed_rounds", r.failed_rounds},
       {"config_fingerprint", r.config_fingerprint}};
}

LoopConfig variant_loop(const std::string& variant, const LoopConfig& base) {
  LoopConfig c = base;
  if (variant == "baseline") {
    c.rounds = 0;
  } else if (variant == "full") {
  } else if (variant == "no_dual_alignment") {
    c.mask_k = 0;
  } else if (variant == "no_constructor") {
    c.use_constructor = false;
  } else {
    throw Error(ErrorCode::invalid_argument,
                fmt::format("unknown variant '{}' (expected one of: {})", variant, fmt::join(kVariants, ", ")));
  }
  return c;
}

namespace {

struct RemoteParts {
  std::unique_ptr<HttpChatClient> chat;
  std::unique_ptr<EmbeddingProvider> title_provider;
  std::unique_ptr<TitleMatcher> matcher;
};

}  // namespace

VariantResult run_variant(const PreparedExperiment& exp, const std::string& variant, const LoopConfig& base,
                          const std::vector<std::size_t>* users) {
  const LoopConfig loop = variant_loop(variant, base);
  const auto& cfg = exp.config;
  const auto& catalog = exp.dataset.catalog;

  RemoteParts remote;
  const ChatOptions decoding = chat_options_from_json(cfg.chat);
  ConstructorConfig cc;
  cc.kind = parse_constructor_kind(cfg.constructor);
  cc.fn = loop.fn;
  cc.decoding = decoding;
  const bool remote_sim = cfg.simulator == "remote";
  if (!remote_sim && cfg.simulator != "deterministic")
    throw Error(ErrorCode::invalid_argument, fmt::format("unknown simulator mode '{}'", cfg.simulator));
  if (cc.kind == ConstructorKind::remote_chat || remote_sim)
    remote.chat = std::make_unique<HttpChatClient>(chat_endpoint_from_json(cfg.chat));
  if (cc.kind == ConstructorKind::remote_chat) {
    const auto kind = cfg.provider.value("kind", std::string("mock-attribute"));
    remote.title_provider = make_embedding_provider(
        kind == "mock-attribute" ? json{{"kind", "mock-hash"}} : cfg.provider);
    remote.matcher = std::make_unique<TitleMatcher>(catalog, *remote.title_provider);
  }
  PseudoConstructor constructor(cc, catalog, *exp.hybrid, remote.chat.get(), remote.matcher.get());
  FeedbackSimulator simulator(catalog, remote_sim ? SimulatorMode::remote : SimulatorMode::deterministic,
                              remote.chat.get(), decoding);
  const Components components{catalog, *exp.srs, *exp.hybrid, constructor, &simulator};

  std::vector<std::size_t> selected;
  if (users) {
    selected = *users;
  } else {
    selected.resize(exp.candidates.size());
    for (std::size_t i = 0; i < selected.size(); ++i) selected[i] = i;
  }

  VariantResult result;
  result.traces.resize(selected.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  // Remote backends keep their calls serialized; mock runs fan out per user.
  const bool parallel_ok = !remote.chat;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < selected.size();) {
      try {
        const std::size_t u = selected[i];
        result.traces[i] = run_cesrec_loop(exp.triples[u], exp.candidates[u], components, loop);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::size_t threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  if (!parallel_ok) threads = 1;
  threads = std::min(threads, std::max<std::size_t>(1, selected.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);

  MetricReport& rep = result.report;
  rep.variant = variant;
  rep.dataset = cfg.dataset;
  rep.n_users = selected.size();
  rep.config_fingerprint = config_fingerprint(cfg);
  const std::size_t R = loop.rounds;
  rep.per_round.assign(R + 1, {});
  rep.per_round_best.assign(R + 1, {});
  StageTimings total;
  std::size_t executed = 0;
  for (const auto& trace : result.traces) {
    const auto& rounds = trace.rounds;
    rep.metrics += MetricValues::of(rounds.back().ranking);
    const RankedResult* best = &rounds.front().ranking;
    for (std::size_t r = 0; r <= R; ++r) {
      const auto& rr = rounds[std::min(r, rounds.size() - 1)].ranking;
      if (*rr.target_rank < *best->target_rank) best = &rr;
      rep.per_round[r] += MetricValues::of(rr);
      rep.per_round_best[r] += MetricValues::of(*best);
    }
    for (const auto& r : rounds) {
      if (r.failed) ++rep.failed_rounds;
      if (r.round == 0) continue;
      total.masking_ms += r.timings.masking_ms;
      total.feedback_ms += r.timings.feedback_ms;
      total.construction_ms += r.timings.construction_ms;
      total.ranking_ms += r.timings.ranking_ms;
      ++executed;
    }
  }
  const double inv = rep.n_users ? 1.0 / static_cast<double>(rep.n_users) : 0.0;
  rep.metrics = rep.metrics.scaled(inv);
  for (auto& m : rep.per_round) m = m.scaled(inv);
  for (auto& m : rep.per_round_best) m = m.scaled(inv);
  result.latency.variant = variant;
  result.latency.rounds = executed;
  if (executed) {
    const double e = static_cast<double>(executed);
    result.latency.mean = {total.masking_ms / e, total.feedback_ms / e, total.construction_ms / e,
                           total.ranking_ms / e};
  }
  return result;
}

std::string render_table(std::span<const MetricReport> reports) {
  std::string out = fmt::format("{:<20} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "variant", "HR@5", "NDCG@5", "HR@10",
                                "NDCG@10", "users");
  for (const auto& r : reports)
    out += fmt::format("{:<20} {:>8.4f} {:>8.4f} {:>8.4f} {:>8.4f} {:>8}\n", r.variant, r.metrics.hr5,
                       r.metrics.ndcg5, r.metrics.hr10, r.metrics.ndcg10, r.n_users);
  return out;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  out << text;
}

std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

}  // namespace

std::vector<VariantResult> run_table(const PreparedExperiment& exp, std::span<const std::string> variants,
                                     const std::filesystem::path& out_dir) {
  std::vector<VariantResult> results;
  for (const auto& v : variants) {
    spdlog::info("running variant {}", v);
    results.push_back(run_variant(exp, v, exp.config.loop));
  }
  if (out_dir.empty()) return results;
  std::filesystem::create_directories(out_dir);
  std::string jsonl;
  std::vector<MetricReport> reports;
  json latency = json::array();
  for (const auto& r : results) {
    jsonl += json(r.report).dump() + '\n';
    reports.push_back(r.report);
    const auto& m = r.latency.mean;
    latency.push_back({{"variant", r.latency.variant},
                       {"rounds", r.latency.rounds},
                       {"mean_ms", {{"masking", m.masking_ms},
                                    {"feedback", m.feedback_ms},
                                    {"construction", m.construction_ms},
                                    {"ranking", m.ranking_ms}}}});
    const auto dir = out_dir / "traces" / r.report.variant;
    std::filesystem::create_directories(dir);
    for (const auto& t : r.traces) write_file(dir / (safe_name(t.user_id) + ".jsonl"), trace_to_jsonl(t));
  }
  write_file(out_dir / "report.jsonl", jsonl);
  write_file(out_dir / "report.txt", render_table(reports));
  write_file(out_dir / "latency.json", latency.dump(2) + '\n');
  return results;
}

std::vector<SweepPoint> run_sweeps(const PreparedExperiment& exp, const std::filesystem::path& out_dir) {
  std::vector<SweepPoint> points;
  const auto& base = exp.config.loop;

  LoopConfig rounds_cfg = base;
  rounds_cfg.rounds = 5;
  const auto by_round = run_variant(exp, "full", rounds_cfg);
  for (std::size_t r = 1; r <= 5; ++r) {
    MetricReport rep = by_round.report;
    rep.metrics = rep.per_round[r];
    points.push_back({"rounds", std::to_string(r), "full", rep});
  }

  for (std::size_t k = 0; k <= 5; ++k) {
    LoopConfig c = base;
    c.mask_k = k;
    points.push_back({"mask_k", std::to_string(k), "full", run_variant(exp, "full", c).report});
  }

  // Tercile bins over the history length fed to the model.
  std::vector<std::size_t> order(exp.candidates.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto len = [&](std::size_t i) { return exp.triples[i].test_history().size(); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return len(a) < len(b); });
  const char* names[] = {"short", "medium", "long"};
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<std::size_t> bin(order.begin() + static_cast<std::ptrdiff_t>(order.size() * b / 3),
                                 order.begin() + static_cast<std::ptrdiff_t>(order.size() * (b + 1) / 3));
    if (bin.empty()) continue;
    std::sort(bin.begin(), bin.end());
    const auto label = fmt::format("{}[{}-{}]", names[b], len(order[order.size() * b / 3]),
                                   len(order[order.size() * (b + 1) / 3 - 1]));
    for (const char* v : {"baseline", "full"})
      points.push_back({"length_bin", label, v, run_variant(exp, v, base, &bin).report});
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::string tsv = "sweep\tpoint\tvariant\tn_users\tHR@5\tNDCG@5\tHR@10\tNDCG@10\tHR@5_best\tNDCG@5_best\n";
    for (const auto& p : points) {
      const auto& m = p.report.metrics;
      MetricValues best = p.report.per_round_best.back();
      if (p.sweep == "rounds") best = p.report.per_round_best[std::stoul(p.point)];
      tsv += fmt::format("{}\t{}\t{}\t{}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\n", p.sweep, p.point,
                         p.variant, p.report.n_users, m.hr5, m.ndcg5, m.hr10, m.ndcg10, best.hr5, best.ndcg5);
    }
    write_file(out_dir / "sweeps.tsv", tsv);
  }
  return points;
}

}  // namespace cesrec
