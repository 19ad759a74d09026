#include "cesrec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

#include "cesrec/error.hpp"

namespace cesrec {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'E', 'S', 'R', 'E', 'C', 'K', 'P'};

template <class T>
void write_pod(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T)))
    throw Error(ErrorCode::format, fmt::format("{}: truncated checkpoint", path.string()));
  return value;
}

std::string read_bytes(std::ifstream& in, std::size_t n, const std::filesystem::path& path) {
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n)))
    throw Error(ErrorCode::format, fmt::format("{}: truncated checkpoint", path.string()));
  return s;
}

}  // namespace

void Checkpoint::put(std::string name, const Matrix& m) {
  Tensor t{std::move(name), static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
           std::vector<double>(m.data(), m.data() + m.size())};
  tensors.push_back(std::move(t));
}

void Checkpoint::put(std::string name, const Vector& v) {
  Tensor t{std::move(name), static_cast<std::size_t>(v.size()), 1,
           std::vector<double>(v.data(), v.data() + v.size())};
  tensors.push_back(std::move(t));
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw Error(ErrorCode::format, fmt::format("checkpoint has no tensor '{}'", name));
}

Matrix Checkpoint::matrix(const std::string& name) const {
  const auto& t = tensor(name);
  Matrix m(static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

Vector Checkpoint::vector(const std::string& name) const {
  const auto& t = tensor(name);
  if (t.cols != 1) throw Error(ErrorCode::format, fmt::format("tensor '{}' is not a vector", name));
  return Eigen::Map<const Vector>(t.data.data(), static_cast<Eigen::Index>(t.rows));
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  nlohmann::json header = ckpt.header;
  header["kind"] = ckpt.kind;
  const std::string h = header.dump();
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kCheckpointFormatVersion);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_pod<std::uint64_t>(out, t.rows);
    write_pod<std::uint64_t>(out, t.cols);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!out) throw Error(ErrorCode::io, fmt::format("write failed for {}", path.string()));
}

Checkpoint read_checkpoint(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, fmt::format("cannot read {}", path.string()));
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw Error(ErrorCode::format, fmt::format("{}: not a cesrec checkpoint", path.string()));
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointFormatVersion)
    throw Error(ErrorCode::format, fmt::format("{}: checkpoint format version {} (expected {})",
                                               path.string(), version, kCheckpointFormatVersion));
  Checkpoint ckpt;
  const auto header_len = read_pod<std::uint32_t>(in, path);
  ckpt.header = nlohmann::json::parse(read_bytes(in, header_len, path), nullptr, false);
  if (ckpt.header.is_discarded() || !ckpt.header.is_object())
    throw Error(ErrorCode::format, fmt::format("{}: corrupt checkpoint header", path.string()));
  ckpt.kind = ckpt.header.value("kind", std::string{});
  if (!expected_kind.empty() && ckpt.kind != expected_kind)
    throw Error(ErrorCode::format, fmt::format("{}: checkpoint kind '{}' (expected '{}')",
                                               path.string(), ckpt.kind, expected_kind));
  const auto count = read_pod<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = read_bytes(in, read_pod<std::uint32_t>(in, path), path);
    t.rows = read_pod<std::uint64_t>(in, path);
    t.cols = read_pod<std::uint64_t>(in, path);
    t.data.resize(t.rows * t.cols);
    if (!t.data.empty() &&
        !in.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double))))
      throw Error(ErrorCode::format, fmt::format("{}: truncated tensor '{}'", path.string(), t.name));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

}  // namespace cesrec
