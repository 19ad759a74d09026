#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cesrec/data.hpp"
#include "cesrec/embedding_table.hpp"
#include "cesrec/http.hpp"

namespace cesrec {

// Maps item content text to a semantic vector. Implementations must be pure
// functions of the input text and safe to call concurrently.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;

  // Stable description of the provider and its parameters; part of the cache key.
  virtual std::string identity() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::size_t max_batch() const { return 64; }
  virtual std::vector<std::vector<double>> embed(std::span<const std::string> texts) = 0;
};

inline constexpr std::size_t kMockEmbeddingDim = 384;

// Signed feature hashing of character 1/2/3-grams. Texts that share most of
// their characters (typos, punctuation variants) land close together.
class MockHashProvider final : public EmbeddingProvider {
 public:
  explicit MockHashProvider(std::size_t dim = kMockEmbeddingDim, std::uint64_t seed = 0);
  std::string identity() const override;
  std::size_t dim() const override { return dim_; }
  std::vector<std::vector<double>> embed(std::span<const std::string> texts) override;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

// Reads the attribute segments back out of rendered item content and returns
// the L2-normalized sum of one seeded unit anchor per (attribute, value) plus
// `title_noise` times a seeded unit vector keyed by the title.
class MockAttributeProvider final : public EmbeddingProvider {
 public:
  explicit MockAttributeProvider(std::size_t dim = kMockEmbeddingDim, std::uint64_t seed = 0,
                                 double title_noise = 0.05);
  std::string identity() const override;
  std::size_t dim() const override { return dim_; }
  std::vector<std::vector<double>> embed(std::span<const std::string> texts) override;

  std::vector<double> anchor(std::string_view attribute, std::string_view value) const;
  std::vector<double> embed_one(std::string_view content) const;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  double title_noise_;
};

// Splits rendered content ("Title. genre: a, b. director: d.") back into
// title and attributes.
struct ParsedContent {
  std::string title;
  AttributeMap attributes;
};
ParsedContent parse_content(std::string_view content);

enum class Pooling { last_token, mean };

struct RemoteEmbeddingConfig {
  HttpEndpoint endpoint{.url = {}, .token_env = "CESREC_EMBED_TOKEN"};
  std::size_t dim = 0;  // declared output dim; replies are checked against it
  std::size_t batch_size = 32;
  Pooling pooling = Pooling::last_token;
  std::string model;
};

// POST {"texts": [...], "pooling": "...", "model": "..."} -> {"embeddings": [[...]]}.
class RemoteEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit RemoteEmbeddingProvider(RemoteEmbeddingConfig config);
  std::string identity() const override;
  std::size_t dim() const override { return config_.dim; }
  std::size_t max_batch() const override { return config_.batch_size; }
  std::vector<std::vector<double>> embed(std::span<const std::string> texts) override;

 private:
  RemoteEmbeddingConfig config_;
};

// {"kind": "mock-hash" | "mock-attribute" | "remote", ...}; see README.
std::unique_ptr<EmbeddingProvider> make_embedding_provider(const nlohmann::json& config);

// Semantic vector for one item's content.
std::vector<double> extract_semantic(const Item& item, EmbeddingProvider& provider);

struct EmbedStats {
  std::size_t provider_calls = 0;
  std::size_t texts_embedded = 0;
  std::size_t cache_hits = 0;
  std::size_t corrupt_entries = 0;
};

struct EmbedOptions {
  std::size_t parallelism = 1;
};

// Cache key of a content string (hex FNV-1a).
std::string content_key(std::string_view content);

// One semantic vector per catalog item. The cache at `cache_path` holds a
// header with the provider identity and one {key, dim, vector} record per
// content hash; hits skip the provider, corrupt entries are recomputed.
EmbeddingTable embed_catalog(const Catalog& catalog, EmbeddingProvider& provider,
                             const std::filesystem::path& cache_path, EmbedStats* stats = nullptr,
                             const EmbedOptions& options = {});
// Same without a cache.
EmbeddingTable embed_catalog(const Catalog& catalog, EmbeddingProvider& provider);

}  // namespace cesrec
