#include "cesrec/ranking.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "cesrec/error.hpp"

namespace cesrec {

std::optional<std::size_t> RankedResult::rank_of(const ItemId& id) const {
  for (std::size_t i = 0; i < ranking.size(); ++i)
    if (ranking[i].item == id) return i + 1;
  return std::nullopt;
}

RankedResult rank_items(std::vector<ScoredItem> scored, const std::optional<ItemId>& target) {
  std::sort(scored.begin(), scored.end(), [](const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
  });
  RankedResult result{std::move(scored), std::nullopt};
  if (target) {
    result.target_rank = result.rank_of(*target);
    if (!result.target_rank)
      throw Error(ErrorCode::invalid_argument,
                  fmt::format("target {} is not among the candidates", target->str()),
                  {target->str()});
  }
  return result;
}

}  // namespace cesrec
