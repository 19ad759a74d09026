#pragma once

#include <compare>
#include <functional>
#include <string>
#include <string_view>

namespace cesrec {

// Opaque catalog identifier. Ordering is "natural": two purely numeric ids
// compare by value ("9" < "10"), everything else lexicographically, so that
// tie-breaking by ascending id matches what a reader expects for MovieLens.
class ItemId {
 public:
  ItemId() = default;
  explicit ItemId(std::string value) : value_(std::move(value)) {}

  const std::string& str() const noexcept { return value_; }
  bool empty() const noexcept { return value_.empty(); }

  friend bool operator==(const ItemId&, const ItemId&) = default;
  friend std::strong_ordering operator<=>(const ItemId& a, const ItemId& b) {
    return natural_compare(a.value_, b.value_);
  }

  static std::strong_ordering natural_compare(std::string_view a,
                                              std::string_view b);

 private:
  std::string value_;
};

}  // namespace cesrec

template <>
struct std::hash<cesrec::ItemId> {
  std::size_t operator()(const cesrec::ItemId& id) const noexcept {
    return std::hash<std::string>{}(id.str());
  }
};
