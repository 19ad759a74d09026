#include "cesrec/semantic.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cesrec/error.hpp"
#include "cesrec/numeric.hpp"

namespace cesrec {

using nlohmann::json;

namespace {

void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

std::vector<double> seeded_unit(std::uint64_t seed, std::size_t dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(dim);
  for (double& x : v) x = gauss(rng);
  normalize(v);
  return v;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Mock providers

MockHashProvider::MockHashProvider(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim == 0) throw Error(ErrorCode::invalid_argument, "provider dim must be positive");
}

std::string MockHashProvider::identity() const {
  return fmt::format("mock-hash/dim={}/seed={}", dim_, seed_);
}

std::vector<std::vector<double>> MockHashProvider::embed(std::span<const std::string> texts) {
  std::vector<std::vector<double>> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    std::string norm = " ";
    for (unsigned char c : text) {
      const char ch = std::isalnum(c) ? static_cast<char>(std::tolower(c)) : ' ';
      if (ch == ' ' && norm.back() == ' ') continue;
      norm += ch;
    }
    if (norm.back() != ' ') norm += ' ';
    std::vector<double> total(dim_, 0.0);
    for (std::size_t n = 1; n <= 3; ++n) {
      std::vector<double> block(dim_, 0.0);
      for (std::size_t i = 0; i + n <= norm.size(); ++i) {
        const std::string_view gram(norm.data() + i, n);
        if (n == 1 && gram == " ") continue;
        const std::uint64_t h = mix_seed(seed_ + n, fnv1a64(gram));
        block[h % dim_] += (h >> 63) ? 1.0 : -1.0;
      }
      normalize(block);
      for (std::size_t k = 0; k < dim_; ++k) total[k] += block[k];
    }
    normalize(total);
    out.push_back(std::move(total));
  }
  return out;
}

ParsedContent parse_content(std::string_view content) {
  std::string_view body = content;
  if (!body.empty() && body.back() == '.') body.remove_suffix(1);
  std::vector<std::string_view> segments;
  for (std::size_t start = 0;;) {
    const auto pos = body.find(". ", start);
    if (pos == std::string_view::npos) {
      segments.push_back(body.substr(start));
      break;
    }
    segments.push_back(body.substr(start, pos - start));
    start = pos + 2;
  }
  auto is_attribute = [](std::string_view seg) {
    const auto colon = seg.find(": ");
    if (colon == std::string_view::npos || colon == 0) return false;
    if (!std::islower(static_cast<unsigned char>(seg[0]))) return false;
    return std::all_of(seg.begin(), seg.begin() + static_cast<std::ptrdiff_t>(colon), [](char c) {
      return std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) ||
             c == '_' || c == ' ';
    });
  };
  ParsedContent parsed;
  std::size_t title_end = segments.size();
  while (title_end > 1 && is_attribute(segments[title_end - 1])) --title_end;
  for (std::size_t i = title_end; i < segments.size(); ++i) {
    const auto seg = segments[i];
    const auto colon = seg.find(": ");
    std::string name(seg.substr(0, colon));
    auto values = seg.substr(colon + 2);
    for (std::size_t start = 0;;) {
      const auto pos = values.find(", ", start);
      const auto v = values.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
      if (!v.empty()) parsed.attributes[name].emplace(v);
      if (pos == std::string_view::npos) break;
      start = pos + 2;
    }
  }
  for (std::size_t i = 0; i < title_end; ++i) {
    if (i) parsed.title += ". ";
    parsed.title += segments[i];
  }
  return parsed;
}

MockAttributeProvider::MockAttributeProvider(std::size_t dim, std::uint64_t seed, double title_noise)
    : dim_(dim), seed_(seed), title_noise_(title_noise) {
  if (dim == 0) throw Error(ErrorCode::invalid_argument, "provider dim must be positive");
}

std::string MockAttributeProvider::identity() const {
  return fmt::format("mock-attribute/dim={}/seed={}/noise={}", dim_, seed_, title_noise_);
}

std::vector<double> MockAttributeProvider::anchor(std::string_view attribute,
                                                  std::string_view value) const {
  const std::string key = lower(attribute) + '\x1f' + lower(value);
  return seeded_unit(mix_seed(seed_, fnv1a64(key)), dim_);
}

std::vector<double> MockAttributeProvider::embed_one(std::string_view content) const {
  const auto parsed = parse_content(content);
  std::vector<double> v(dim_, 0.0);
  for (const auto& [name, values] : parsed.attributes)
    for (const auto& value : values) {
      const auto a = anchor(name, value);
      for (std::size_t k = 0; k < dim_; ++k) v[k] += a[k];
    }
  const auto noise = seeded_unit(mix_seed(seed_ ^ 0x7177e, fnv1a64(parsed.title)), dim_);
  for (std::size_t k = 0; k < dim_; ++k) v[k] += title_noise_ * noise[k];
  normalize(v);
  return v;
}

std::vector<std::vector<double>> MockAttributeProvider::embed(std::span<const std::string> texts) {
  std::vector<std::vector<double>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(embed_one(t));
  return out;
}

// ---------------------------------------------------------------------------
// Remote provider

RemoteEmbeddingProvider::RemoteEmbeddingProvider(RemoteEmbeddingConfig config)
    : config_(std::move(config)) {
  if (config_.dim == 0)
    throw Error(ErrorCode::invalid_argument, "remote embedding provider needs a declared dim");
  if (config_.batch_size == 0) config_.batch_size = 1;
}

std::string RemoteEmbeddingProvider::identity() const {
  return fmt::format("remote/{}/model={}/pooling={}/dim={}", config_.endpoint.url, config_.model,
                     config_.pooling == Pooling::last_token ? "last_token" : "mean", config_.dim);
}

std::vector<std::vector<double>> RemoteEmbeddingProvider::embed(std::span<const std::string> texts) {
  json body = {{"texts", std::vector<std::string>(texts.begin(), texts.end())},
               {"pooling", config_.pooling == Pooling::last_token ? "last_token" : "mean"}};
  if (!config_.model.empty()) body["model"] = config_.model;
  const json reply = post_json(config_.endpoint, body);
  if (!reply.contains("embeddings") || !reply["embeddings"].is_array())
    throw Error(ErrorCode::backend, "embedding reply lacks an 'embeddings' array");
  const auto& rows = reply["embeddings"];
  if (rows.size() != texts.size())
    throw Error(ErrorCode::backend, fmt::format("embedding reply has {} rows for {} texts",
                                                rows.size(), texts.size()));
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    auto v = r.get<std::vector<double>>();
    if (v.size() != config_.dim)
      throw Error(ErrorCode::backend, fmt::format("embedding dim mismatch: got {}, declared {}",
                                                  v.size(), config_.dim));
    out.push_back(std::move(v));
  }
  return out;
}

std::unique_ptr<EmbeddingProvider> make_embedding_provider(const json& config) {
  const auto kind = config.value("kind", std::string("mock-attribute"));
  const auto dim = config.value("dim", kMockEmbeddingDim);
  const auto seed = config.value("seed", std::uint64_t{0});
  if (kind == "mock-hash") return std::make_unique<MockHashProvider>(dim, seed);
  if (kind == "mock-attribute")
    return std::make_unique<MockAttributeProvider>(dim, seed, config.value("title_noise", 0.05));
  if (kind == "remote") {
    RemoteEmbeddingConfig rc;
    rc.endpoint.url = config.at("url").get<std::string>();
    rc.endpoint.token_env = config.value("token_env", std::string("CESREC_EMBED_TOKEN"));
    rc.endpoint.timeout_s = config.value("timeout_s", 60);
    rc.endpoint.max_attempts = config.value("max_attempts", 3);
    rc.endpoint.backoff_ms = config.value("backoff_ms", 250);
    rc.dim = config.at("dim").get<std::size_t>();
    rc.batch_size = config.value("batch_size", std::size_t{32});
    rc.model = config.value("model", std::string{});
    const auto pooling = config.value("pooling", std::string("last_token"));
    if (pooling == "last_token")
      rc.pooling = Pooling::last_token;
    else if (pooling == "mean")
      rc.pooling = Pooling::mean;
    else
      throw Error(ErrorCode::invalid_argument, fmt::format("unknown pooling '{}'", pooling));
    return std::make_unique<RemoteEmbeddingProvider>(std::move(rc));
  }
  throw Error(ErrorCode::invalid_argument, fmt::format("unknown embedding provider kind '{}'", kind));
}

std::vector<double> extract_semantic(const Item& item, EmbeddingProvider& provider) {
  if (item.content.empty())
    throw Error(ErrorCode::invalid_argument, fmt::format("item {} has empty content", item.id.str()));
  const std::string text = item.content;
  auto rows = provider.embed(std::span<const std::string>(&text, 1));
  if (rows.size() != 1 || rows[0].size() != provider.dim())
    throw Error(ErrorCode::backend, fmt::format("provider returned a vector of the wrong dim for {}",
                                                item.id.str()));
  return std::move(rows[0]);
}

// ---------------------------------------------------------------------------
// Catalog embedding with cache

std::string content_key(std::string_view content) {
  return fmt::format("{:016x}", fnv1a64(content));
}

namespace {

struct CacheContents {
  std::map<std::string, std::vector<double>> entries;
  std::size_t corrupt = 0;
};

CacheContents read_cache(const std::filesystem::path& path, const EmbeddingProvider& provider) {
  CacheContents cache;
  std::ifstream in(path, std::ios::binary);
  if (!in) return cache;
  std::string line;
  if (!std::getline(in, line)) return cache;
  const auto header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("record", "") != "header" ||
      header.value("format_version", -1) != 1) {
    spdlog::warn("embedding cache {} has an unreadable header; rebuilding", path.string());
    return cache;
  }
  if (header.value("provider", "") != provider.identity()) {
    spdlog::warn("embedding cache {} belongs to provider '{}'; rebuilding for '{}'", path.string(),
                 header.value("provider", ""), provider.identity());
    return cache;
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = json::parse(line, nullptr, false);
    bool ok = !rec.is_discarded() && rec.is_object() && rec.contains("key") &&
              rec["key"].is_string() && rec.contains("dim") && rec.contains("vector") &&
              rec["vector"].is_array();
    std::vector<double> v;
    if (ok) {
      try {
        v = rec["vector"].get<std::vector<double>>();
      } catch (const json::exception&) {
        ok = false;
      }
    }
    ok = ok && rec["dim"].is_number_unsigned() && rec["dim"].get<std::size_t>() == provider.dim() &&
         v.size() == provider.dim() && std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    if (!ok) {
      ++cache.corrupt;
      continue;
    }
    cache.entries[rec["key"].get<std::string>()] = std::move(v);
  }
  if (cache.corrupt)
    spdlog::warn("embedding cache {}: {} corrupt entr{} will be recomputed", path.string(),
                 cache.corrupt, cache.corrupt == 1 ? "y" : "ies");
  return cache;
}

void write_cache(const std::filesystem::path& path, const EmbeddingProvider& provider,
                 const std::map<std::string, std::vector<double>>& entries) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, fmt::format("cannot write cache {}", tmp.string()));
    out << json{{"record", "header"}, {"format_version", 1}, {"provider", provider.identity()}}.dump()
        << '\n';
    for (const auto& [key, v] : entries)
      out << json{{"key", key}, {"dim", v.size()}, {"vector", v}}.dump() << '\n';
    if (!out) throw Error(ErrorCode::io, fmt::format("write failed for cache {}", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

EmbeddingTable embed_catalog(const Catalog& catalog, EmbeddingProvider& provider,
                             const std::filesystem::path& cache_path, EmbedStats* stats,
                             const EmbedOptions& options) {
  EmbedStats local;
  auto cache = read_cache(cache_path, provider);
  local.corrupt_entries = cache.corrupt;

  // Distinct uncached contents, in catalog order.
  std::vector<std::string> missing;
  std::vector<std::string> missing_keys;
  std::map<std::string, bool> queued;
  for (const auto& item : catalog.items()) {
    if (item.content.empty())
      throw Error(ErrorCode::invalid_argument, fmt::format("item {} has empty content", item.id.str()));
    const auto key = content_key(item.content);
    if (cache.entries.contains(key)) {
      ++local.cache_hits;
      continue;
    }
    if (queued.emplace(key, true).second) {
      missing.push_back(item.content);
      missing_keys.push_back(key);
    }
  }

  if (!missing.empty()) {
    const std::size_t batch = std::max<std::size_t>(1, provider.max_batch());
    const std::size_t batches = (missing.size() + batch - 1) / batch;
    std::vector<std::vector<std::vector<double>>> results(batches);
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> calls{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto worker = [&] {
      for (std::size_t b; (b = next.fetch_add(1)) < batches;) {
        const std::size_t lo = b * batch;
        const std::size_t hi = std::min(missing.size(), lo + batch);
        try {
          results[b] = provider.embed(std::span<const std::string>(missing).subspan(lo, hi - lo));
          ++calls;
          if (results[b].size() != hi - lo)
            throw Error(ErrorCode::backend, "provider returned the wrong number of vectors");
          for (const auto& v : results[b])
            if (v.size() != provider.dim())
              throw Error(ErrorCode::backend,
                          fmt::format("provider returned dim {}, declared {}", v.size(), provider.dim()));
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    };
    const std::size_t workers = std::clamp<std::size_t>(options.parallelism, 1, batches);
    if (workers == 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);
    local.provider_calls = calls.load();
    for (std::size_t b = 0; b < batches; ++b)
      for (std::size_t i = 0; i < results[b].size(); ++i)
        cache.entries[missing_keys[b * batch + i]] = std::move(results[b][i]);
    local.texts_embedded = missing.size();
  }
  if (!missing.empty() || local.corrupt_entries > 0 || !std::filesystem::exists(cache_path))
    write_cache(cache_path, provider, cache.entries);

  EmbeddingTable table(EmbeddingSpace::semantic, provider.dim());
  for (const auto& item : catalog.items()) table.set(item.id, cache.entries.at(content_key(item.content)));
  if (stats) *stats = local;
  return table;
}

EmbeddingTable embed_catalog(const Catalog& catalog, EmbeddingProvider& provider) {
  EmbeddingTable table(EmbeddingSpace::semantic, provider.dim());
  std::vector<std::string> texts;
  for (const auto& item : catalog.items()) {
    if (item.content.empty())
      throw Error(ErrorCode::invalid_argument, fmt::format("item {} has empty content", item.id.str()));
    texts.push_back(item.content);
  }
  const std::size_t batch = std::max<std::size_t>(1, provider.max_batch());
  for (std::size_t lo = 0; lo < texts.size(); lo += batch) {
    const std::size_t hi = std::min(texts.size(), lo + batch);
    const auto rows = provider.embed(std::span<const std::string>(texts).subspan(lo, hi - lo));
    if (rows.size() != hi - lo)
      throw Error(ErrorCode::backend, "provider returned the wrong number of vectors");
    for (std::size_t i = 0; i < rows.size(); ++i) table.set(catalog[lo + i].id, rows[i]);
  }
  return table;
}

}  // namespace cesrec
