#include "cesrec/embedding_table.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cesrec/error.hpp"

namespace cesrec {

const char* to_string(EmbeddingSpace space) {
  switch (space) {
    case EmbeddingSpace::semantic: return "semantic";
    case EmbeddingSpace::collaborative: return "collaborative";
    case EmbeddingSpace::hybrid: return "hybrid";
  }
  return "unknown";
}

EmbeddingSpace parse_embedding_space(std::string_view text) {
  if (text == "semantic") return EmbeddingSpace::semantic;
  if (text == "collaborative") return EmbeddingSpace::collaborative;
  if (text == "hybrid") return EmbeddingSpace::hybrid;
  throw Error(ErrorCode::format, fmt::format("unknown embedding space '{}'", text));
}

EmbeddingTable::EmbeddingTable(EmbeddingSpace space, std::size_t dim) : space_(space), dim_(dim) {
  if (dim == 0) throw Error(ErrorCode::invalid_argument, "embedding dim must be positive");
}

void EmbeddingTable::set(const ItemId& id, std::span<const double> values) {
  if (values.size() != dim_)
    throw Error(ErrorCode::invalid_argument,
                fmt::format("vector for {} has dim {}, table dim is {}", id.str(), values.size(), dim_),
                {id.str()});
  for (double v : values)
    if (!std::isfinite(v))
      throw Error(ErrorCode::numeric, fmt::format("non-finite entry in vector for {}", id.str()),
                  {id.str()});
  if (auto it = index_.find(id); it != index_.end()) {
    std::copy(values.begin(), values.end(), data_.begin() + static_cast<std::ptrdiff_t>(it->second * dim_));
    return;
  }
  index_.emplace(id, ids_.size());
  ids_.push_back(id);
  data_.insert(data_.end(), values.begin(), values.end());
}

std::span<const double> EmbeddingTable::row(const ItemId& id) const {
  auto it = index_.find(id);
  if (it == index_.end())
    throw Error(ErrorCode::not_found,
                fmt::format("no {} embedding for item {}", to_string(space_), id.str()), {id.str()});
  return row_at(it->second);
}

Eigen::Map<const Vector> EmbeddingTable::vec(const ItemId& id) const {
  auto r = row(id);
  return Eigen::Map<const Vector>(r.data(), static_cast<Eigen::Index>(r.size()));
}

std::span<const double> EmbeddingTable::row_at(std::size_t i) const {
  return {data_.data() + i * dim_, dim_};
}

Matrix EmbeddingTable::gather(std::span<const ItemId> ids) const {
  Matrix m(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(dim_));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto r = row(ids[i]);
    std::copy(r.begin(), r.end(), m.row(static_cast<Eigen::Index>(i)).data());
  }
  return m;
}

bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
  return a.space_ == b.space_ && a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.data_ == b.data_;
}

void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  nlohmann::json header = {{"record", "header"},
                           {"format_version", 1},
                           {"space", to_string(table.space())},
                           {"dim", table.dim()},
                           {"rows", table.size()}};
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < table.size(); ++i) {
    auto r = table.row_at(i);
    nlohmann::json rec = {{"item_id", table.ids()[i].str()},
                          {"vector", std::vector<double>(r.begin(), r.end())}};
    out << rec.dump() << '\n';
  }
  if (!out) throw Error(ErrorCode::io, fmt::format("write failed for {}", path.string()));
}

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, fmt::format("cannot read {}", path.string()));
  std::string line;
  if (!std::getline(in, line))
    throw Error(ErrorCode::format, fmt::format("{}: empty embedding table", path.string()));
  auto header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format_version", -1) != 1)
    throw Error(ErrorCode::format, fmt::format("{}: bad embedding table header", path.string()));
  EmbeddingTable table(parse_embedding_space(header.at("space").get<std::string>()),
                       header.at("dim").get<std::size_t>());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.contains("item_id") || !rec.contains("vector"))
      throw Error(ErrorCode::format, fmt::format("{}:{}: bad row record", path.string(), line_no));
    table.set(ItemId(rec["item_id"].get<std::string>()), rec["vector"].get<std::vector<double>>());
  }
  return table;
}

}  // namespace cesrec
