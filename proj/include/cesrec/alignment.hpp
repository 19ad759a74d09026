#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "cesrec/embedding_table.hpp"
#include "cesrec/item_id.hpp"
#include "cesrec/numeric.hpp"

namespace cesrec {

struct AdapterHyper {
  std::size_t hidden_dim = 256;
  double lr = 1e-3;
  std::size_t epochs = 200;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
};

// Semantic -> collaborative projection W2 * GELU(W1 e + b1) + b2.
struct AdapterParams {
  Matrix w1;  // hidden x d_l
  Vector b1;
  Matrix w2;  // d_r x hidden
  Vector b2;

  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  // Full-data MSE before training, then after every epoch.
  std::vector<double> loss_curve;

  std::size_t input_dim() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(w1.rows()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(w2.rows()); }
  double final_loss() const { return loss_curve.empty() ? 0.0 : loss_curve.back(); }
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
AdapterParams init_adapter(std::size_t input_dim, std::size_t output_dim, const AdapterHyper& hyper);

// Exact erf form.
double gelu(double x);
double gelu_grad(double x);

Vector apply_adapter(const AdapterParams& adapter, std::span<const double> semantic);
// One output row per input row.
Matrix apply_adapter(const AdapterParams& adapter, const Matrix& semantic_rows);

// Mean over rows of the squared error norm. When `grad` is non-null its
// tensors are overwritten with the gradient of that mean.
double adapter_loss_and_grad(const AdapterParams& adapter, const Matrix& x, const Matrix& y,
                             AdapterParams* grad);

// Both tables must hold the same item set; the error lists the symmetric
// difference otherwise.
AdapterParams train_adapter(const EmbeddingTable& semantic, const EmbeddingTable& collaborative,
                            const AdapterHyper& hyper);

EmbeddingTable build_hybrid_table(const AdapterParams& adapter, const EmbeddingTable& semantic);

void save_adapter(const AdapterParams& adapter, const std::filesystem::path& path);
AdapterParams load_adapter(const std::filesystem::path& path);

// Component-wise mean of the items' hybrid vectors.
Vector fuse_user(std::span<const ItemId> sequence, const EmbeddingTable& hybrid);
Vector fuse_vectors(const Matrix& rows);

enum class SimilarityFn { cosine, euclidean };
const char* to_string(SimilarityFn fn);
SimilarityFn parse_similarity(std::string_view text);

struct SimilarityScore {
  double raw = 0.0;     // ranking value, higher = more similar
  double report = 0.0;  // (cos+1)/2 for cosine, raw for euclidean
};

SimilarityScore similarity(std::span<const double> item, std::span<const double> user,
                           SimilarityFn fn);

struct MaskingReport {
  std::vector<ItemId> input;
  std::vector<double> scores;         // raw, one per input position
  std::vector<double> report_scores;  // normalized, one per input position
  std::vector<std::size_t> masked_positions;  // ascending
  std::vector<ItemId> masked;                 // in masking order (lowest score first)
  std::vector<ItemId> retained;
  SimilarityFn fn = SimilarityFn::cosine;
};

struct MaskOptions {
  SimilarityFn fn = SimilarityFn::cosine;
  // Positions that may not be masked (e.g. earlier replacements).
  std::vector<std::size_t> protected_positions;
  // Replaces the fused vector of `sequence` as the user representation.
  const Vector* user_vector = nullptr;
};

// Removes the k lowest-similarity items, ties by ascending item id then
// position. Requires k < sequence length.
MaskingReport detect_and_mask(std::span<const ItemId> sequence, const EmbeddingTable& hybrid,
                              std::size_t k, const MaskOptions& options = {});

}  // namespace cesrec
