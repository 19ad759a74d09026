#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cesrec/data.hpp"

namespace testing {

inline const std::filesystem::path kFixtures = CESREC_FIXTURES;

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("cesrec_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline cesrec::ItemId id(const std::string& s) { return cesrec::ItemId(s); }

inline std::vector<cesrec::ItemId> ids(std::initializer_list<const char*> values) {
  std::vector<cesrec::ItemId> out;
  for (const char* v : values) out.emplace_back(v);
  return out;
}

inline cesrec::Item make_item(const std::string& item_id, const std::string& title,
                              std::initializer_list<std::pair<std::string, std::string>> attrs) {
  cesrec::Item item;
  item.id = cesrec::ItemId(item_id);
  item.title = title;
  for (const auto& [k, v] : attrs) item.attributes[k].insert(v);
  return item;
}

// Genre-only catalog: `per_genre` items for each genre, ids "<genre><n>".
inline cesrec::Catalog genre_catalog(const std::vector<std::string>& genres, std::size_t per_genre) {
  cesrec::Catalog c({"genre"});
  for (const auto& g : genres)
    for (std::size_t i = 0; i < per_genre; ++i) {
      const auto n = std::to_string(i);
      c.add(make_item(g + n, g + " Film " + n, {{"genre", g}}));
    }
  return c;
}

inline cesrec::InteractionSequence make_sequence(const std::string& user, const std::vector<cesrec::ItemId>& items) {
  cesrec::InteractionSequence s;
  s.user_id = user;
  std::int64_t t = 0;
  for (const auto& i : items) s.events.push_back({i, ++t});
  return s;
}

}  // namespace testing
