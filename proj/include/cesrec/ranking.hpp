#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "cesrec/item_id.hpp"

namespace cesrec {

struct ScoredItem {
  ItemId item;
  double score = 0.0;
};

// Candidates ordered by non-increasing score, ties by ascending item id.
struct RankedResult {
  std::vector<ScoredItem> ranking;
  // 1-based position of the ground-truth item, when there is one.
  std::optional<std::size_t> target_rank;

  const ScoredItem& top() const { return ranking.front(); }
  // 1-based rank of `id`, if present.
  std::optional<std::size_t> rank_of(const ItemId& id) const;
};

// Sorts `scored` and locates `target`. A target that is not among the
// candidates is a contract violation and throws.
RankedResult rank_items(std::vector<ScoredItem> scored, const std::optional<ItemId>& target);

}  // namespace cesrec
