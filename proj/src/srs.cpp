#include "cesrec/srs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <thread>
#include <unordered_set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cesrec/checkpoint.hpp"
#include "cesrec/error.hpp"

namespace cesrec {

using nlohmann::json;

void SrsConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_argument, msg); };
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (num_blocks == 0) fail("num_blocks must be positive");
  if (num_heads == 0) fail("num_heads must be positive");
  if (embed_dim % num_heads != 0)
    fail(fmt::format("embed_dim {} not divisible by num_heads {}", embed_dim, num_heads));
  if (max_seq_len < 2) fail("max_seq_len must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (epochs == 0) fail("epochs must be positive");
}

void to_json(json& j, const SrsConfig& c) {
  j = json{{"embed_dim", c.embed_dim},   {"num_blocks", c.num_blocks},
           {"num_heads", c.num_heads},   {"max_seq_len", c.max_seq_len},
           {"dropout", c.dropout},       {"lr", c.lr},
           {"batch_size", c.batch_size}, {"epochs", c.epochs},
           {"seed", c.seed},             {"early_stopping", c.early_stopping},
           {"patience", c.patience}};
}

void from_json(const json& j, SrsConfig& c) {
  SrsConfig d;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_blocks = j.value("num_blocks", d.num_blocks);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.dropout = j.value("dropout", d.dropout);
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.early_stopping = j.value("early_stopping", d.early_stopping);
  c.patience = j.value("patience", d.patience);
  c.threads = j.value("threads", d.threads);
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

std::span<double> flat(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> flat(RowVector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

void xavier(Matrix& m, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

LinearLayer make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  LinearLayer l{Matrix(in, out), RowVector::Zero(static_cast<Eigen::Index>(out))};
  xavier(l.weight, in, out, rng);
  return l;
}

LayerNorm make_norm(std::size_t d) {
  return {RowVector::Ones(static_cast<Eigen::Index>(d)), RowVector::Zero(static_cast<Eigen::Index>(d))};
}

}  // namespace

std::vector<std::pair<std::string, std::span<double>>> SrsParams::tensors() {
  std::vector<std::pair<std::string, std::span<double>>> out;
  out.emplace_back("item_embedding", flat(item_embedding));
  out.emplace_back("position_embedding", flat(position_embedding));
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& blk = blocks[b];
    auto p = fmt::format("block{}.", b);
    out.emplace_back(p + "attn_norm.gamma", flat(blk.attn_norm.gamma));
    out.emplace_back(p + "attn_norm.beta", flat(blk.attn_norm.beta));
    for (auto [name, layer] : {std::pair{"query", &blk.query}, std::pair{"key", &blk.key},
                               std::pair{"value", &blk.value}, std::pair{"output", &blk.output}}) {
      out.emplace_back(p + name + ".weight", flat(layer->weight));
      out.emplace_back(p + name + ".bias", flat(layer->bias));
    }
    out.emplace_back(p + "ffn_norm.gamma", flat(blk.ffn_norm.gamma));
    out.emplace_back(p + "ffn_norm.beta", flat(blk.ffn_norm.beta));
    out.emplace_back(p + "ffn_in.weight", flat(blk.ffn_in.weight));
    out.emplace_back(p + "ffn_in.bias", flat(blk.ffn_in.bias));
    out.emplace_back(p + "ffn_out.weight", flat(blk.ffn_out.weight));
    out.emplace_back(p + "ffn_out.bias", flat(blk.ffn_out.bias));
  }
  out.emplace_back("final_norm.gamma", flat(final_norm.gamma));
  out.emplace_back("final_norm.beta", flat(final_norm.beta));
  return out;
}

SrsParams SrsParams::zeros_like() const {
  SrsParams z = *this;
  for (auto& [name, t] : z.tensors()) std::fill(t.begin(), t.end(), 0.0);
  return z;
}

SrsParams init_srs_params(const SrsConfig& config, std::size_t num_items) {
  config.validate();
  const std::size_t d = config.embed_dim;
  std::mt19937_64 rng(mix_seed(config.seed, 0x5a5));
  SrsParams p;
  p.item_embedding = Matrix(num_items + 1, d);
  xavier(p.item_embedding, num_items + 1, d, rng);
  p.item_embedding.row(0).setZero();
  p.position_embedding = Matrix(config.max_seq_len, d);
  xavier(p.position_embedding, config.max_seq_len, d, rng);
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    AttentionBlock blk;
    blk.attn_norm = make_norm(d);
    blk.query = make_linear(d, d, rng);
    blk.key = make_linear(d, d, rng);
    blk.value = make_linear(d, d, rng);
    blk.output = make_linear(d, d, rng);
    blk.ffn_norm = make_norm(d);
    blk.ffn_in = make_linear(d, d, rng);
    blk.ffn_out = make_linear(d, d, rng);
    p.blocks.push_back(std::move(blk));
  }
  p.final_norm = make_norm(d);
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

constexpr double kNormEps = 1e-8;

struct NormCache {
  Matrix xhat;
  Vector rstd;
};

Matrix norm_forward(const Matrix& x, const LayerNorm& ln, NormCache& c) {
  const Vector mean = x.rowwise().mean();
  Matrix centered = x.colwise() - mean;
  const Vector var = centered.array().square().rowwise().mean().matrix();
  c.rstd = (var.array() + kNormEps).rsqrt().matrix();
  c.xhat = (centered.array().colwise() * c.rstd.array()).matrix();
  Matrix y = (c.xhat.array().rowwise() * ln.gamma.array()).matrix();
  y.rowwise() += ln.beta;
  return y;
}

Matrix norm_backward(const Matrix& dy, const LayerNorm& ln, const NormCache& c, LayerNorm& g) {
  g.gamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.beta += dy.colwise().sum();
  const double d = static_cast<double>(dy.cols());
  const Matrix dxhat = (dy.array().rowwise() * ln.gamma.array()).matrix();
  const Vector s1 = dxhat.rowwise().sum();
  const Vector s2 = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix();
  Matrix dx = (dxhat * d).colwise() - s1;
  dx -= (c.xhat.array().colwise() * s2.array()).matrix();
  dx = (dx.array().colwise() * (c.rstd.array() / d)).matrix();
  return dx;
}

Matrix linear_forward(const Matrix& x, const LinearLayer& l) {
  Matrix y = x * l.weight;
  y.rowwise() += l.bias;
  return y;
}

Matrix linear_backward(const Matrix& x, const Matrix& dy, const LinearLayer& l, LinearLayer& g) {
  g.weight.noalias() += x.transpose() * dy;
  g.bias += dy.colwise().sum();
  return dy * l.weight.transpose();
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : 0.0;
  return m;
}

struct BlockCache {
  Matrix h_in;
  NormCache attn_norm;
  Matrix a, q, k, v;
  std::vector<Matrix> probs;  // per head, T x T
  Matrix o;
  Matrix mask_attn;
  Matrix h_mid;
  NormCache ffn_norm;
  Matrix a2, z, hidden;  // hidden = relu(z) * mask_hidden
  Matrix mask_hidden, mask_ffn;
};

struct ForwardCache {
  bool dropout = false;
  Matrix mask_in;
  std::vector<BlockCache> blocks;
  NormCache final_norm;
};

Matrix forward(const SrsParams& p, const SrsConfig& cfg, std::span<const int> rows, bool training,
               std::mt19937_64& rng, ForwardCache& cache) {
  const auto T = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const std::size_t heads = cfg.num_heads;
  const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double emb_scale = std::sqrt(static_cast<double>(d));
  cache.dropout = training && cfg.dropout > 0.0;

  Matrix h(T, d);
  for (Eigen::Index t = 0; t < T; ++t)
    h.row(t) = p.item_embedding.row(rows[static_cast<std::size_t>(t)]) * emb_scale +
               p.position_embedding.row(t);
  if (cache.dropout) {
    cache.mask_in = dropout_mask(T, d, cfg.dropout, rng);
    h.array() *= cache.mask_in.array();
  }

  cache.blocks.resize(p.blocks.size());
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const auto& blk = p.blocks[b];
    auto& c = cache.blocks[b];
    c.h_in = h;
    c.a = norm_forward(h, blk.attn_norm, c.attn_norm);
    c.q = linear_forward(c.a, blk.query);
    c.k = linear_forward(c.a, blk.key);
    c.v = linear_forward(c.a, blk.value);
    c.o = Matrix::Zero(T, d);
    c.probs.assign(heads, Matrix());
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const Eigen::Index off = static_cast<Eigen::Index>(hd) * dh;
      Matrix s = (c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose()) * scale;
      Matrix& a = c.probs[hd];
      a = Matrix::Zero(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          a(i, j) = std::exp(s(i, j) - mx);
          sum += a(i, j);
        }
        a.row(i).head(i + 1) /= sum;
      }
      c.o.middleCols(off, dh) = a * c.v.middleCols(off, dh);
    }
    Matrix attn = linear_forward(c.o, blk.output);
    if (cache.dropout) {
      c.mask_attn = dropout_mask(T, d, cfg.dropout, rng);
      attn.array() *= c.mask_attn.array();
    }
    h += attn;
    c.h_mid = h;
    c.a2 = norm_forward(h, blk.ffn_norm, c.ffn_norm);
    c.z = linear_forward(c.a2, blk.ffn_in);
    c.hidden = c.z.cwiseMax(0.0);
    if (cache.dropout) {
      c.mask_hidden = dropout_mask(T, d, cfg.dropout, rng);
      c.hidden.array() *= c.mask_hidden.array();
    }
    Matrix ffn = linear_forward(c.hidden, blk.ffn_out);
    if (cache.dropout) {
      c.mask_ffn = dropout_mask(T, d, cfg.dropout, rng);
      ffn.array() *= c.mask_ffn.array();
    }
    h += ffn;
  }
  return norm_forward(h, p.final_norm, cache.final_norm);
}

void backward(const SrsParams& p, const SrsConfig& cfg, std::span<const int> rows,
              const ForwardCache& cache, Matrix dh, SrsParams& g) {
  const auto T = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const std::size_t heads = cfg.num_heads;
  const Eigen::Index dhead = d / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dhead));

  dh = norm_backward(dh, p.final_norm, cache.final_norm, g.final_norm);
  for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
    const auto& blk = p.blocks[bi];
    auto& gb = g.blocks[bi];
    const auto& c = cache.blocks[bi];

    // Feed-forward sublayer.
    Matrix dffn = dh;
    if (cache.dropout) dffn.array() *= c.mask_ffn.array();
    Matrix dhidden = linear_backward(c.hidden, dffn, blk.ffn_out, gb.ffn_out);
    if (cache.dropout) dhidden.array() *= c.mask_hidden.array();
    Matrix dz = (c.z.array() > 0.0).select(dhidden, 0.0);
    Matrix da2 = linear_backward(c.a2, dz, blk.ffn_in, gb.ffn_in);
    dh += norm_backward(da2, blk.ffn_norm, c.ffn_norm, gb.ffn_norm);

    // Attention sublayer.
    Matrix dattn = dh;
    if (cache.dropout) dattn.array() *= c.mask_attn.array();
    Matrix d_o = linear_backward(c.o, dattn, blk.output, gb.output);
    Matrix dq = Matrix::Zero(T, d), dk = Matrix::Zero(T, d), dv = Matrix::Zero(T, d);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const Eigen::Index off = static_cast<Eigen::Index>(hd) * dhead;
      const Matrix& a = c.probs[hd];
      const Matrix doh = d_o.middleCols(off, dhead);
      Matrix da = doh * c.v.middleCols(off, dhead).transpose();
      dv.middleCols(off, dhead) = a.transpose() * doh;
      const Vector rowdot = (da.array() * a.array()).rowwise().sum().matrix();
      Matrix ds = (a.array() * (da.colwise() - rowdot).array()).matrix() * scale;
      dq.middleCols(off, dhead) = ds * c.k.middleCols(off, dhead);
      dk.middleCols(off, dhead) = ds.transpose() * c.q.middleCols(off, dhead);
    }
    Matrix da = linear_backward(c.a, dq, blk.query, gb.query);
    da += linear_backward(c.a, dk, blk.key, gb.key);
    da += linear_backward(c.a, dv, blk.value, gb.value);
    dh += norm_backward(da, blk.attn_norm, c.attn_norm, gb.attn_norm);
  }

  if (cache.dropout) dh.array() *= cache.mask_in.array();
  const double emb_scale = std::sqrt(static_cast<double>(d));
  for (Eigen::Index t = 0; t < T; ++t) {
    g.item_embedding.row(rows[static_cast<std::size_t>(t)]) += dh.row(t) * emb_scale;
    g.position_embedding.row(t) += dh.row(t);
  }
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

LossSum loss_and_grad_range(const SrsParams& p, const SrsConfig& cfg,
                            std::span<const TrainingExample> examples, std::size_t index_offset,
                            SrsParams* grad, std::uint64_t dropout_seed, bool training) {
  LossSum total;
  ForwardCache cache;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    if (ex.inputs.empty()) continue;
    if (ex.inputs.size() > cfg.max_seq_len)
      throw Error(ErrorCode::invalid_argument, "training example longer than max_seq_len");
    std::mt19937_64 rng(mix_seed(dropout_seed, index_offset + e));
    const Matrix out = forward(p, cfg, ex.inputs, training, rng, cache);
    const auto T = static_cast<Eigen::Index>(ex.inputs.size());
    Matrix dout = Matrix::Zero(T, out.cols());
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto pos = ex.positives[static_cast<std::size_t>(t)];
      const auto neg = ex.negatives[static_cast<std::size_t>(t)];
      const double lp = out.row(t).dot(p.item_embedding.row(pos));
      const double ln = out.row(t).dot(p.item_embedding.row(neg));
      total.loss += softplus(-lp) + softplus(ln);
      ++total.positions;
      if (grad) {
        const double gp = sigmoid(lp) - 1.0;
        const double gn = sigmoid(ln);
        dout.row(t) += gp * p.item_embedding.row(pos) + gn * p.item_embedding.row(neg);
        grad->item_embedding.row(pos) += gp * out.row(t);
        grad->item_embedding.row(neg) += gn * out.row(t);
      }
    }
    if (grad) backward(p, cfg, ex.inputs, cache, std::move(dout), *grad);
  }
  return total;
}

void add_into(SrsParams& dst, SrsParams& src) {
  auto a = dst.tensors();
  auto b = src.tensors();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].second.size(); ++j) a[i].second[j] += b[i].second[j];
}

}  // namespace

LossSum srs_loss_and_grad(const SrsParams& params, const SrsConfig& config,
                          std::span<const TrainingExample> examples, SrsParams* grad,
                          std::uint64_t dropout_seed, bool training) {
  return loss_and_grad_range(params, config, examples, 0, grad, dropout_seed, training);
}

// ---------------------------------------------------------------------------
// Model

SrsModel::SrsModel(SrsConfig config, std::vector<ItemId> vocabulary)
    : config_(config), vocabulary_(std::move(vocabulary)) {
  config_.validate();
  for (std::size_t i = 0; i < vocabulary_.size(); ++i)
    if (!rows_.emplace(vocabulary_[i], static_cast<int>(i + 1)).second)
      throw Error(ErrorCode::invalid_argument, "duplicate item in SRS vocabulary",
                  {vocabulary_[i].str()});
  params_ = init_srs_params(config_, vocabulary_.size());
  state_.seed = config_.seed;
}

SrsModel::SrsModel(SrsConfig config, std::vector<ItemId> vocabulary, SrsParams params,
                   SrsTrainingState state)
    : SrsModel(config, std::move(vocabulary)) {
  params_ = std::move(params);
  state_ = std::move(state);
}

std::optional<int> SrsModel::row_of(const ItemId& id) const {
  auto it = rows_.find(id);
  if (it == rows_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> SrsModel::to_rows(std::span<const ItemId> ids) const {
  std::vector<int> rows;
  rows.reserve(ids.size());
  std::vector<std::string> unknown;
  for (const auto& id : ids) {
    if (auto r = row_of(id))
      rows.push_back(*r);
    else
      unknown.push_back(id.str());
  }
  if (!unknown.empty())
    throw Error(ErrorCode::not_found,
                fmt::format("sequence contains {} unknown item id(s): {}", unknown.size(),
                            fmt::join(unknown, ", ")),
                unknown);
  return rows;
}

Matrix SrsModel::encode(std::span<const int> rows) const {
  if (rows.empty()) throw Error(ErrorCode::invalid_argument, "cannot encode an empty sequence");
  if (rows.size() > config_.max_seq_len)
    throw Error(ErrorCode::invalid_argument, "sequence longer than max_seq_len; truncate first");
  std::mt19937_64 unused(0);
  ForwardCache cache;
  return forward(params_, config_, rows, false, unused, cache);
}

Vector SrsModel::represent(std::span<const ItemId> sequence) const {
  auto rows = to_rows(sequence);
  if (rows.empty()) throw Error(ErrorCode::invalid_argument, "cannot score an empty sequence");
  if (rows.size() > config_.max_seq_len)
    rows.erase(rows.begin(), rows.end() - static_cast<std::ptrdiff_t>(config_.max_seq_len));
  const Matrix out = encode(rows);
  return out.row(out.rows() - 1).transpose();
}

// ---------------------------------------------------------------------------
// Training

namespace {

constexpr std::size_t kGradChunks = 8;

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;

  void update(SrsParams& params, SrsParams& grad, double lr) {
    auto ps = params.tensors();
    auto gs = grad.tensors();
    if (m.empty()) {
      for (auto& [n, t] : ps) {
        m.emplace_back(t.size(), 0.0);
        v.emplace_back(t.size(), 0.0);
      }
    }
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto p = ps[i].second;
      auto g = gs[i].second;
      auto& mi = m[i];
      auto& vi = v[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
        vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
        p[j] -= lr * (mi[j] / c1) / (std::sqrt(vi[j] / c2) + eps);
      }
    }
  }
};

struct UserSequence {
  std::vector<int> rows;
  std::unordered_set<int> history;
};

TrainingExample make_example(const UserSequence& u, std::size_t max_len, std::size_t num_items,
                             std::mt19937_64& rng) {
  TrainingExample ex;
  const auto& r = u.rows;
  if (r.size() < 2) return ex;
  const std::size_t n = std::min(r.size() - 1, max_len);
  const std::size_t start = r.size() - 1 - n;
  std::uniform_int_distribution<int> pick(1, static_cast<int>(num_items));
  for (std::size_t t = start; t < start + n; ++t) {
    ex.inputs.push_back(r[t]);
    ex.positives.push_back(r[t + 1]);
    int neg = pick(rng);
    // History covering the whole catalog leaves no valid negative; fall back
    // to any row after a bounded number of draws.
    for (int tries = 0; u.history.contains(neg) && tries < 64; ++tries) neg = pick(rng);
    ex.negatives.push_back(neg);
  }
  return ex;
}

double valid_ndcg10(const SrsModel& model, std::span<const SplitTriple> triples,
                    const std::vector<CandidateSet>& sets) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    if (sets[i].candidates.empty()) continue;
    auto hist = triples[i].train.item_ids();
    if (hist.empty()) continue;
    auto ranked = score_candidates(model, hist, sets[i]);
    if (*ranked.target_rank <= 10) total += 1.0 / std::log2(static_cast<double>(*ranked.target_rank) + 1.0);
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace

SrsModel train_srs(std::span<const SplitTriple> triples, const Catalog& catalog,
                   const SrsConfig& config, const SrsTrainHooks& hooks) {
  config.validate();
  if (triples.empty()) throw Error(ErrorCode::invalid_argument, "empty training set");
  std::vector<ItemId> vocab;
  vocab.reserve(catalog.size());
  for (const auto& item : catalog.items()) vocab.push_back(item.id);
  SrsModel model(config, std::move(vocab));

  std::vector<UserSequence> users;
  users.reserve(triples.size());
  for (const auto& t : triples) {
    UserSequence u;
    u.rows = model.to_rows(t.train.item_ids());
    u.history.insert(u.rows.begin(), u.rows.end());
    users.push_back(std::move(u));
  }

  std::vector<CandidateSet> valid_sets;
  if (config.early_stopping) {
    valid_sets.resize(triples.size());
    for (std::size_t i = 0; i < triples.size(); ++i) {
      auto hist = triples[i].full_history();
      try {
        valid_sets[i] = sample_candidates(hist, catalog, triples[i].valid_target,
                                          kDefaultCandidateSize, mix_seed(config.seed, 7000 + i));
      } catch (const Error&) {
        valid_sets[i] = {};
      }
    }
  }

  const std::size_t threads =
      std::max<std::size_t>(1, config.threads ? config.threads : std::thread::hardware_concurrency());
  Adam adam;
  std::vector<std::size_t> order(users.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 order_rng(mix_seed(config.seed, 0x0de7));
  SrsParams best;
  double best_ndcg = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    std::size_t epoch_positions = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += config.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<TrainingExample> examples;
      examples.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        std::mt19937_64 rng(mix_seed(mix_seed(config.seed, epoch), order[i]));
        examples.push_back(make_example(users[order[i]], config.max_seq_len, model.num_items(), rng));
      }
      const std::uint64_t dropout_seed = mix_seed(mix_seed(config.seed ^ 0xd40f, epoch), batch);

      // Fixed chunking keeps the floating-point reduction order independent
      // of the thread count.
      const std::size_t chunks = std::min(kGradChunks, examples.size());
      std::vector<SrsParams> grads(chunks);
      std::vector<LossSum> sums(chunks);
      auto run_chunk = [&](std::size_t c) {
        const std::size_t lo = examples.size() * c / chunks;
        const std::size_t hi = examples.size() * (c + 1) / chunks;
        grads[c] = model.params().zeros_like();
        sums[c] = loss_and_grad_range(model.params(), config,
                                      std::span(examples).subspan(lo, hi - lo), lo, &grads[c],
                                      dropout_seed, true);
      };
      if (threads > 1 && chunks > 1) {
        std::vector<std::jthread> pool;
        const std::size_t workers = std::min(threads, chunks);
        for (std::size_t w = 0; w < workers; ++w)
          pool.emplace_back([&, w] {
            for (std::size_t c = w; c < chunks; c += workers) run_chunk(c);
          });
      } else {
        for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
      }
      LossSum total;
      for (std::size_t c = 0; c < chunks; ++c) {
        total.loss += sums[c].loss;
        total.positions += sums[c].positions;
        if (c > 0) add_into(grads[0], grads[c]);
      }
      if (!std::isfinite(total.loss))
        throw Error(ErrorCode::numeric,
                    fmt::format("SRS training diverged: non-finite loss at epoch {} batch {} "
                                "(lr {}, embed_dim {})",
                                epoch, batch, config.lr, config.embed_dim));
      if (total.positions == 0) continue;
      const double inv = 1.0 / static_cast<double>(total.positions);
      for (auto& [n, t] : grads[0].tensors())
        for (double& x : t) x *= inv;
      adam.update(model.mutable_params(), grads[0], config.lr);
      epoch_loss += total.loss;
      epoch_positions += total.positions;
    }
    if (epoch_positions == 0)
      throw Error(ErrorCode::invalid_argument,
                  "training set has no sequence with at least two items");
    const double mean_loss = epoch_loss / static_cast<double>(epoch_positions);
    auto& state = model.mutable_state();
    state.loss_history.push_back(mean_loss);
    state.epochs_completed = epoch;
    if (hooks.on_epoch) hooks.on_epoch(epoch, mean_loss);

    if (config.early_stopping) {
      const double ndcg = valid_ndcg10(model, triples, valid_sets);
      state.valid_ndcg10.push_back(ndcg);
      if (ndcg > best_ndcg) {
        best_ndcg = ndcg;
        best = model.params();
        since_best = 0;
      } else if (++since_best >= config.patience) {
        spdlog::info("early stopping at epoch {} (best valid NDCG@10 {:.4f})", epoch, best_ndcg);
        break;
      }
    }
  }
  if (config.early_stopping && best_ndcg >= 0.0) model.mutable_params() = std::move(best);
  return model;
}

// ---------------------------------------------------------------------------
// Scoring and export

RankedResult score_items(const SrsModel& model, std::span<const ItemId> sequence,
                         std::span<const ItemId> candidates, const std::optional<ItemId>& target) {
  const Vector rep = model.represent(sequence);
  const auto rows = model.to_rows(candidates);
  std::vector<ScoredItem> scored;
  scored.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    scored.push_back({candidates[i], model.params().item_embedding.row(rows[i]).dot(rep.transpose())});
  return rank_items(std::move(scored), target);
}

RankedResult score_candidates(const SrsModel& model, std::span<const ItemId> sequence,
                              const CandidateSet& candidates) {
  return score_items(model, sequence, candidates.candidates, candidates.target());
}

EmbeddingTable export_collaborative_embeddings(const SrsModel& model) {
  EmbeddingTable table(EmbeddingSpace::collaborative, model.config().embed_dim);
  const auto& emb = model.params().item_embedding;
  for (std::size_t i = 0; i < model.num_items(); ++i) {
    const auto row = emb.row(static_cast<Eigen::Index>(i + 1));
    table.set(model.vocabulary()[i], std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
  }
  return table;
}

void save_srs(const SrsModel& model, const std::filesystem::path& path) {
  Checkpoint ckpt;
  ckpt.kind = "srs";
  std::vector<std::string> vocab;
  for (const auto& id : model.vocabulary()) vocab.push_back(id.str());
  ckpt.header["config"] = model.config();
  ckpt.header["vocabulary"] = vocab;
  ckpt.header["seed"] = model.state().seed;
  ckpt.header["epochs_completed"] = model.state().epochs_completed;
  ckpt.header["loss_history"] = model.state().loss_history;
  ckpt.header["valid_ndcg10"] = model.state().valid_ndcg10;
  SrsParams params = model.params();
  for (auto& [name, t] : params.tensors())
    ckpt.tensors.push_back(Tensor{name, t.size(), 1, std::vector<double>(t.begin(), t.end())});
  write_checkpoint(path, ckpt);
}

SrsModel load_srs(const std::filesystem::path& path) {
  const auto ckpt = read_checkpoint(path, "srs");
  try {
    auto config = ckpt.header.at("config").get<SrsConfig>();
    std::vector<ItemId> vocab;
    for (const auto& s : ckpt.header.at("vocabulary")) vocab.emplace_back(s.get<std::string>());
    SrsParams params = init_srs_params(config, vocab.size());
    for (auto& [name, t] : params.tensors()) {
      const auto& stored = ckpt.tensor(name);
      if (stored.data.size() != t.size())
        throw Error(ErrorCode::format,
                    fmt::format("{}: tensor '{}' has {} values, expected {}", path.string(), name,
                                stored.data.size(), t.size()));
      std::copy(stored.data.begin(), stored.data.end(), t.begin());
    }
    SrsTrainingState state;
    state.seed = ckpt.header.value("seed", config.seed);
    state.epochs_completed = ckpt.header.value("epochs_completed", std::size_t{0});
    state.loss_history = ckpt.header.value("loss_history", std::vector<double>{});
    state.valid_ndcg10 = ckpt.header.value("valid_ndcg10", std::vector<double>{});
    return SrsModel(config, std::move(vocab), std::move(params), std::move(state));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::format, fmt::format("{}: corrupt SRS checkpoint: {}", path.string(), e.what()));
  }
}

}  // namespace cesrec
