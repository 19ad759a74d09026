#include <algorithm>
#include <cctype>

#include "cesrec/error.hpp"
#include "cesrec/item_id.hpp"
#include "cesrec/numeric.hpp"

namespace cesrec {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::backend: return "backend";
    case ErrorCode::conflict: return "conflict";
  }
  return "unknown";
}

namespace {

bool all_digits(std::string_view s) {
  return !s.empty() &&
         std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

std::string_view strip_leading_zeros(std::string_view s) {
  auto pos = s.find_first_not_of('0');
  return pos == std::string_view::npos ? s.substr(s.size() - 1) : s.substr(pos);
}

}  // namespace

std::strong_ordering ItemId::natural_compare(std::string_view a, std::string_view b) {
  if (all_digits(a) && all_digits(b)) {
    auto na = strip_leading_zeros(a);
    auto nb = strip_leading_zeros(b);
    if (na.size() != nb.size()) return na.size() <=> nb.size();
    if (auto c = na.compare(nb); c != 0) return c <=> 0;
    // "007" vs "7": fall through to a total order on the raw text.
  }
  return a.compare(b) <=> 0;
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis) noexcept {
  std::uint64_t h = basis;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace cesrec
