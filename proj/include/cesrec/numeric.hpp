#pragma once

#include <cstdint>
#include <string_view>

#include <Eigen/Dense>

namespace cesrec {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Stable 64-bit FNV-1a; used for cache keys and seed derivation, so it must
// not change between releases.
std::uint64_t fnv1a64(std::string_view data,
                      std::uint64_t basis = 14695981039346656037ULL) noexcept;

// splitmix64 finalizer for deriving independent seeds from (seed, salt...).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept;

}  // namespace cesrec
