// cesrec command line. Talks to the library only through cesrec.h.
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cesrec/cesrec.h"

using nlohmann::json;

namespace {

struct CliError {
  int exit_code;
};

void check(cesrec_status st) {
  if (st == CESREC_OK) return;
  std::cerr << "error (" << cesrec_status_name(st) << "): " << cesrec_last_error() << "\n";
  const std::string details = cesrec_last_error_details();
  if (details != "[]") std::cerr << "details: " << details << "\n";
  throw CliError{static_cast<int>(st) + 1};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  cesrec_string_free(s);
  return out;
}

void print_json(char* s) { std::cout << json::parse(take(s)).dump(2) << "\n"; }

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "error: cannot read " << path << "\n";
    throw CliError{2};
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_config(const std::string& path) { return path.empty() ? json::object() : json::parse(read_text(path)); }

struct DatasetArgs {
  std::string store;
  std::string movielens_ratings, movielens_movies;
  std::string amazon_reviews, amazon_meta;
  std::string synthetic;
  std::string synthetic_config;
};

void add_dataset_options(CLI::App* cmd, DatasetArgs& a) {
  cmd->add_option("--store", a.store, "Normalized store produced by `ingest`");
  cmd->add_option("--movielens", a.movielens_ratings, "MovieLens ratings file")->check(CLI::ExistingFile);
  cmd->add_option("--movies", a.movielens_movies, "MovieLens movies file")->check(CLI::ExistingFile);
  cmd->add_option("--amazon", a.amazon_reviews, "Amazon reviews JSON lines")->check(CLI::ExistingFile);
  cmd->add_option("--meta", a.amazon_meta, "Amazon metadata JSON lines")->check(CLI::ExistingFile);
  cmd->add_option("--synthetic", a.synthetic, "Generated dataset")
      ->check(CLI::IsMember({"preference-shift", "cycle", "case-study"}));
  cmd->add_option("--synthetic-config", a.synthetic_config, "JSON file with generator fields");
}

struct Dataset {
  cesrec_dataset* ptr = nullptr;
  ~Dataset() { cesrec_dataset_free(ptr); }
};

void open_dataset(const DatasetArgs& a, Dataset& d) {
  if (!a.store.empty()) {
    check(cesrec_dataset_load_store(a.store.c_str(), &d.ptr));
  } else if (!a.movielens_ratings.empty()) {
    if (a.movielens_movies.empty()) {
      std::cerr << "error: --movielens needs --movies\n";
      throw CliError{2};
    }
    check(cesrec_dataset_load_movielens(a.movielens_ratings.c_str(), a.movielens_movies.c_str(), &d.ptr));
  } else if (!a.amazon_reviews.empty()) {
    if (a.amazon_meta.empty()) {
      std::cerr << "error: --amazon needs --meta\n";
      throw CliError{2};
    }
    check(cesrec_dataset_load_amazon(a.amazon_reviews.c_str(), a.amazon_meta.c_str(), &d.ptr));
  } else if (!a.synthetic.empty()) {
    const auto cfg = read_config(a.synthetic_config).dump();
    check(cesrec_dataset_synthetic(a.synthetic.c_str(), cfg.c_str(), &d.ptr));
  } else {
    std::cerr << "error: one of --store, --movielens, --amazon or --synthetic is required\n";
    throw CliError{2};
  }
}

cesrec_service* g_service = nullptr;

void on_signal(int) {
  if (g_service) cesrec_service_stop(g_service);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversational sequential recommendation toolkit"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off");
  app.set_version_flag("--version", std::string(cesrec_version()));

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Load raw interactions and write a normalized store");
  DatasetArgs ingest_data;
  std::string ingest_out;
  add_dataset_options(ingest, ingest_data);
  ingest->add_option("--out", ingest_out, "Output store path")->required();

  // embed
  auto* embed = app.add_subcommand("embed", "Compute semantic item embeddings");
  DatasetArgs embed_data;
  std::string embed_provider, embed_cache, embed_out;
  add_dataset_options(embed, embed_data);
  embed->add_option("--provider", embed_provider, "Provider config JSON file (default mock-attribute)");
  embed->add_option("--cache", embed_cache, "Embedding cache (JSON lines)");
  embed->add_option("--out", embed_out, "Output embedding table")->required();

  // gen-tuning
  auto* tuning = app.add_subcommand("gen-tuning", "Generate constructor tuning records");
  DatasetArgs tuning_data;
  std::size_t tuning_per_user = 1;
  std::uint64_t tuning_seed = 42;
  std::string tuning_out;
  add_dataset_options(tuning, tuning_data);
  tuning->add_option("--per-user", tuning_per_user, "Records per user")->capture_default_str();
  tuning->add_option("--seed", tuning_seed)->capture_default_str();
  tuning->add_option("--out", tuning_out, "Output JSON lines")->required();

  // train-srs
  auto* train_srs = app.add_subcommand("train-srs", "Train the sequential recommender");
  DatasetArgs srs_data;
  std::string srs_config, srs_out;
  add_dataset_options(train_srs, srs_data);
  train_srs->add_option("--config", srs_config, "SRS hyper-parameter JSON file");
  train_srs->add_option("--out", srs_out, "Output checkpoint")->required();

  // rank
  auto* rank = app.add_subcommand("rank", "Rank items after a sequence with a trained checkpoint");
  std::string rank_ckpt, rank_sequence, rank_candidates;
  std::size_t rank_top = 10;
  rank->add_option("--checkpoint", rank_ckpt)->required()->check(CLI::ExistingFile);
  rank->add_option("--sequence", rank_sequence, "Comma-separated item ids")->required();
  rank->add_option("--candidates", rank_candidates, "Comma-separated item ids (default: whole catalog)");
  rank->add_option("--top", rank_top)->capture_default_str();

  // train-adapter
  auto* train_adapter = app.add_subcommand("train-adapter", "Align semantic embeddings with the SRS space");
  std::string adapter_semantic, adapter_collab, adapter_config, adapter_out;
  train_adapter->add_option("--semantic", adapter_semantic, "Semantic embedding table")
      ->required()
      ->check(CLI::ExistingFile);
  train_adapter->add_option("--collab", adapter_collab, "Trained SRS checkpoint")->required()->check(CLI::ExistingFile);
  train_adapter->add_option("--config", adapter_config, "Adapter hyper-parameter JSON file");
  train_adapter->add_option("--out", adapter_out, "Output adapter checkpoint")->required();

  // run-eval
  auto* run_eval = app.add_subcommand("run-eval", "Run the multi-round evaluation");
  DatasetArgs eval_data;
  std::string eval_config, eval_out, eval_ckpt, eval_variants;
  std::optional<std::size_t> eval_rounds, eval_mask_k, eval_users, eval_threads;
  std::optional<std::uint64_t> eval_seed;
  bool eval_sweeps = false;
  add_dataset_options(run_eval, eval_data);
  run_eval->add_option("--config", eval_config, "Experiment JSON file");
  run_eval->add_option("--variant", eval_variants, "Comma-separated variants (default: all)");
  run_eval->add_option("--rounds", eval_rounds);
  run_eval->add_option("--mask-k", eval_mask_k);
  run_eval->add_option("--seed", eval_seed);
  run_eval->add_option("--users", eval_users, "Evaluate at most this many users");
  run_eval->add_option("--threads", eval_threads);
  run_eval->add_option("--checkpoint-dir", eval_ckpt, "Reuse or write trained components here");
  run_eval->add_option("--out", eval_out, "Report directory");
  run_eval->add_flag("--sweeps", eval_sweeps, "Also run rounds, k and length sweeps");

  // serve
  auto* serve = app.add_subcommand("serve", "Serve the interactive session API over HTTP");
  DatasetArgs serve_data;
  std::string serve_ckpt, serve_host = "127.0.0.1", serve_backend = "rule-based", serve_store, serve_chat;
  int serve_port = 8080;
  std::int64_t serve_ttl = 24 * 3600;
  std::size_t serve_top = 10;
  add_dataset_options(serve, serve_data);
  serve->add_option("--catalog", serve_data.store, "Alias of --store");
  serve->add_option("--checkpoint-dir", serve_ckpt, "Directory with srs.ckpt, adapter.ckpt, semantic.emb")
      ->required()
      ->check(CLI::ExistingDirectory);
  serve->add_option("--host", serve_host)->capture_default_str();
  serve->add_option("--port", serve_port)->capture_default_str();
  serve->add_option("--backend", serve_backend)
      ->check(CLI::IsMember({"rule-based", "remote"}))
      ->capture_default_str();
  serve->add_option("--chat-config", serve_chat, "Remote chat endpoint JSON file (url, model, token_env, ...)");
  serve->add_option("--store-dir", serve_store, "Persist sessions here");
  serve->add_option("--ttl", serve_ttl, "Session time-to-live in seconds")->capture_default_str();
  serve->add_option("--top-k", serve_top)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    check(cesrec_set_log_level(log_level.c_str()));

    if (*ingest) {
      Dataset d;
      open_dataset(ingest_data, d);
      check(cesrec_dataset_save_store(d.ptr, ingest_out.c_str()));
      char* summary = nullptr;
      check(cesrec_dataset_summary(d.ptr, &summary));
      print_json(summary);
    } else if (*embed) {
      Dataset d;
      open_dataset(embed_data, d);
      const std::string provider = embed_provider.empty() ? "" : read_config(embed_provider).dump();
      char* stats = nullptr;
      check(cesrec_embed_catalog(d.ptr, provider.empty() ? nullptr : provider.c_str(),
                                 embed_cache.empty() ? nullptr : embed_cache.c_str(), embed_out.c_str(), &stats));
      print_json(stats);
    } else if (*tuning) {
      Dataset d;
      open_dataset(tuning_data, d);
      char* summary = nullptr;
      check(cesrec_generate_tuning(d.ptr, tuning_per_user, tuning_seed, tuning_out.c_str(), &summary));
      print_json(summary);
    } else if (*train_srs) {
      Dataset d;
      open_dataset(srs_data, d);
      const auto cfg = read_config(srs_config).dump();
      char* summary = nullptr;
      check(cesrec_train_srs(d.ptr, cfg.c_str(), srs_out.c_str(), &summary));
      auto j = json::parse(take(summary));
      const auto& curve = j["loss_curve"];
      std::cout << "trained on " << j["users"] << " users for " << j["epochs"] << " epochs";
      if (!curve.empty()) std::cout << ", loss " << curve.front() << " -> " << curve.back();
      std::cout << "\n";
    } else if (*rank) {
      auto split = [](const std::string& s) {
        json arr = json::array();
        std::stringstream ss(s);
        for (std::string v; std::getline(ss, v, ',');)
          if (!v.empty()) arr.push_back(v);
        return arr.dump();
      };
      const auto seq = split(rank_sequence);
      const auto cands = rank_candidates.empty() ? std::string() : split(rank_candidates);
      char* out = nullptr;
      check(cesrec_srs_rank(rank_ckpt.c_str(), seq.c_str(), cands.empty() ? nullptr : cands.c_str(), rank_top, &out));
      for (const auto& row : json::parse(take(out)))
        std::cout << row["item"].get<std::string>() << "\t" << row["score"].get<double>() << "\n";
    } else if (*train_adapter) {
      const auto cfg = read_config(adapter_config).dump();
      char* summary = nullptr;
      check(cesrec_train_adapter(adapter_semantic.c_str(), adapter_collab.c_str(), cfg.c_str(), adapter_out.c_str(),
                                 &summary));
      print_json(summary);
    } else if (*run_eval) {
      Dataset d;
      open_dataset(eval_data, d);
      json cfg = read_config(eval_config);
      if (eval_rounds) cfg["loop"]["rounds"] = *eval_rounds;
      if (eval_mask_k) cfg["loop"]["mask_k"] = *eval_mask_k;
      if (eval_seed) cfg["seed"] = *eval_seed;
      if (eval_users) cfg["max_users"] = *eval_users;
      if (eval_threads) cfg["threads"] = *eval_threads;
      const auto cfg_text = cfg.dump();
      char* report = nullptr;
      check(cesrec_run_eval(d.ptr, cfg_text.c_str(), eval_variants.empty() ? nullptr : eval_variants.c_str(),
                            eval_ckpt.empty() ? nullptr : eval_ckpt.c_str(), eval_out.empty() ? nullptr : eval_out.c_str(),
                            eval_sweeps ? 1 : 0, &report));
      const auto j = json::parse(take(report));
      std::cout << j["table"].get<std::string>();
      if (!eval_out.empty()) std::cout << "reports written to " << eval_out << "\n";
    } else if (*serve) {
      Dataset d;
      open_dataset(serve_data, d);
      json opts = {{"ttl_s", serve_ttl}, {"top_k", serve_top}};
      if (!serve_store.empty()) opts["store_dir"] = serve_store;
      if (serve_backend == "remote") {
        if (serve_chat.empty()) {
          std::cerr << "error: --backend remote needs --chat-config\n";
          return 2;
        }
        opts["constructor"] = "remote-chat";
        opts["chat"] = read_config(serve_chat);
      }
      const auto opts_text = opts.dump();
      check(cesrec_service_create(d.ptr, serve_ckpt.c_str(), opts_text.c_str(), &g_service));
      int bound = 0;
      check(cesrec_service_bind(g_service, serve_host.c_str(), serve_port, &bound));
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on http://" << serve_host << ":" << bound << "\n";
      const auto st = cesrec_service_listen(g_service);
      cesrec_service_free(g_service);
      g_service = nullptr;
      check(st);
    }
  } catch (const CliError& e) {
    return e.exit_code;
  } catch (const json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
