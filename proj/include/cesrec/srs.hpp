#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cesrec/data.hpp"
#include "cesrec/embedding_table.hpp"
#include "cesrec/numeric.hpp"
#include "cesrec/ranking.hpp"

namespace cesrec {

// Self-attentive next-item model (SASRec family): pre-norm causal attention
// blocks over item + learned position embeddings, shared input/output item
// table, trained with one sampled negative per position.
struct SrsConfig {
  std::size_t embed_dim = 64;
  std::size_t num_blocks = 2;
  std::size_t num_heads = 1;
  std::size_t max_seq_len = 50;
  double dropout = 0.2;
  double lr = 1e-3;
  std::size_t batch_size = 256;
  std::size_t epochs = 200;
  std::uint64_t seed = 42;
  // Optional early stopping on validation NDCG@10.
  bool early_stopping = false;
  std::size_t patience = 20;
  // Worker threads for gradient accumulation; 0 = hardware concurrency.
  // Results do not depend on this value.
  std::size_t threads = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SrsConfig& c);
void from_json(const nlohmann::json& j, SrsConfig& c);

struct LinearLayer {
  Matrix weight;  // in x out; y = x * weight + bias
  RowVector bias;
};

struct LayerNorm {
  RowVector gamma;
  RowVector beta;
};

struct AttentionBlock {
  LayerNorm attn_norm;
  LinearLayer query, key, value, output;
  LayerNorm ffn_norm;
  LinearLayer ffn_in, ffn_out;
};

struct SrsParams {
  Matrix item_embedding;      // (num_items + 1) x d; row 0 is padding
  Matrix position_embedding;  // max_seq_len x d
  std::vector<AttentionBlock> blocks;
  LayerNorm final_norm;

  // Every parameter tensor as a flat mutable view, in a fixed order.
  std::vector<std::pair<std::string, std::span<double>>> tensors();
  SrsParams zeros_like() const;
};

SrsParams init_srs_params(const SrsConfig& config, std::size_t num_items);

// One training sequence in table-row space (rows are 1-based item indices).
struct TrainingExample {
  std::vector<int> inputs;
  std::vector<int> positives;
  std::vector<int> negatives;
};

struct LossSum {
  double loss = 0.0;        // summed BCE over all positions
  std::size_t positions = 0;
};

// Summed binary cross-entropy over (positive, negative) logits at every
// position; when `grad` is non-null the gradient of that sum is added into
// it. Dropout masks derive from `dropout_seed` and the example index.
LossSum srs_loss_and_grad(const SrsParams& params, const SrsConfig& config,
                          std::span<const TrainingExample> examples, SrsParams* grad,
                          std::uint64_t dropout_seed, bool training);

struct SrsTrainingState {
  std::size_t epochs_completed = 0;
  std::vector<double> loss_history;  // mean loss per epoch
  std::vector<double> valid_ndcg10;  // only with early stopping
  std::uint64_t seed = 0;
};

class SrsModel {
 public:
  SrsModel(SrsConfig config, std::vector<ItemId> vocabulary);
  SrsModel(SrsConfig config, std::vector<ItemId> vocabulary, SrsParams params,
           SrsTrainingState state);

  const SrsConfig& config() const noexcept { return config_; }
  const std::vector<ItemId>& vocabulary() const noexcept { return vocabulary_; }
  std::size_t num_items() const noexcept { return vocabulary_.size(); }
  const SrsParams& params() const noexcept { return params_; }
  SrsParams& mutable_params() noexcept { return params_; }
  const SrsTrainingState& state() const noexcept { return state_; }
  SrsTrainingState& mutable_state() noexcept { return state_; }

  // 1-based embedding row of an item.
  std::optional<int> row_of(const ItemId& id) const;
  // Throws not_found listing every unknown id.
  std::vector<int> to_rows(std::span<const ItemId> ids) const;

  // Final-norm hidden state for each position (inference mode, no dropout).
  Matrix encode(std::span<const int> rows) const;
  // Representation at the last position of the most recent max_seq_len items.
  Vector represent(std::span<const ItemId> sequence) const;

 private:
  SrsConfig config_;
  std::vector<ItemId> vocabulary_;
  std::unordered_map<ItemId, int> rows_;
  SrsParams params_;
  SrsTrainingState state_;
};

struct SrsTrainHooks {
  std::function<void(std::size_t epoch, double mean_loss)> on_epoch;
};

// Trains on each triple's `train` prefix. Throws on an empty training set and
// aborts with a diagnostic if the loss becomes NaN.
SrsModel train_srs(std::span<const SplitTriple> triples, const Catalog& catalog,
                   const SrsConfig& config, const SrsTrainHooks& hooks = {});

RankedResult score_candidates(const SrsModel& model, std::span<const ItemId> sequence,
                              const CandidateSet& candidates);
// Same scoring for an arbitrary candidate list; `target` optional.
RankedResult score_items(const SrsModel& model, std::span<const ItemId> sequence,
                         std::span<const ItemId> candidates,
                         const std::optional<ItemId>& target);

// Item rows (padding excluded) as a collaborative-space table.
EmbeddingTable export_collaborative_embeddings(const SrsModel& model);

void save_srs(const SrsModel& model, const std::filesystem::path& path);
SrsModel load_srs(const std::filesystem::path& path);

}  // namespace cesrec
