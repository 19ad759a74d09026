#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cesrec/numeric.hpp"

namespace cesrec {

// Binary container shared by SRS and adapter checkpoints:
//
//   "CESRECKP" | u32 format_version | u32 header_len | header JSON
//   u32 tensor_count | { u32 name_len | name | u64 rows | u64 cols | f64[rows*cols] }*
//
// All integers and doubles little-endian; tensors row-major.
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct Tensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
};

struct Checkpoint {
  std::string kind;  // "srs" or "adapter"
  nlohmann::json header = nlohmann::json::object();
  std::vector<Tensor> tensors;

  void put(std::string name, const Matrix& m);
  void put(std::string name, const Vector& v);
  Matrix matrix(const std::string& name) const;
  Vector vector(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Rejects wrong magic, other format versions, and a kind other than
// `expected_kind` (when non-empty).
Checkpoint read_checkpoint(const std::filesystem::path& path,
                           const std::string& expected_kind = {});

}  // namespace cesrec
