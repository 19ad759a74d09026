#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cesrec/item_id.hpp"
#include "cesrec/numeric.hpp"

namespace cesrec {

enum class EmbeddingSpace { semantic, collaborative, hybrid };

const char* to_string(EmbeddingSpace space);
EmbeddingSpace parse_embedding_space(std::string_view text);

// Per-item vectors in one embedding space. Rows keep insertion order; every
// row has `dim` finite entries.
class EmbeddingTable {
 public:
  EmbeddingTable(EmbeddingSpace space, std::size_t dim);

  EmbeddingSpace space() const noexcept { return space_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }

  // Inserts or overwrites. Throws on dim mismatch or non-finite entries.
  void set(const ItemId& id, std::span<const double> values);

  bool contains(const ItemId& id) const { return index_.contains(id); }
  std::span<const double> row(const ItemId& id) const;
  Eigen::Map<const Vector> vec(const ItemId& id) const;
  std::span<const double> row_at(std::size_t i) const;
  const std::vector<ItemId>& ids() const noexcept { return ids_; }

  // Rows of `ids` stacked into a matrix (one row per id).
  Matrix gather(std::span<const ItemId> ids) const;

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b);

 private:
  EmbeddingSpace space_;
  std::size_t dim_;
  std::vector<ItemId> ids_;
  std::unordered_map<ItemId, std::size_t> index_;
  std::vector<double> data_;
};

// Newline-delimited JSON: header {format_version, space, dim, rows}, then one
// {item_id, vector} record per row. Doubles round-trip exactly.
void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable load_embedding_table(const std::filesystem::path& path);

}  // namespace cesrec
