#include "cesrec/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cesrec/checkpoint.hpp"
#include "cesrec/error.hpp"

namespace cesrec {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Adapter

AdapterParams init_adapter(std::size_t input_dim, std::size_t output_dim, const AdapterHyper& hyper) {
  if (input_dim == 0 || output_dim == 0 || hyper.hidden_dim == 0)
    throw Error(ErrorCode::invalid_argument, "adapter dims must be positive");
  std::mt19937_64 rng(mix_seed(hyper.seed, 0xada));
  auto fill = [&rng](auto& m, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  };
  const auto h = static_cast<Eigen::Index>(hyper.hidden_dim);
  AdapterParams p;
  p.w1.resize(h, static_cast<Eigen::Index>(input_dim));
  p.b1.resize(h);
  p.w2.resize(static_cast<Eigen::Index>(output_dim), h);
  p.b2.resize(static_cast<Eigen::Index>(output_dim));
  fill(p.w1, input_dim);
  fill(p.b1, input_dim);
  fill(p.w2, hyper.hidden_dim);
  fill(p.b2, hyper.hidden_dim);
  p.seed = hyper.seed;
  return p;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * pdf;
}

Matrix apply_adapter(const AdapterParams& a, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != a.input_dim())
    throw Error(ErrorCode::invalid_argument,
                fmt::format("adapter expects input dim {}, got {}", a.input_dim(), x.cols()));
  Matrix z = x * a.w1.transpose();
  z.rowwise() += a.b1.transpose();
  z = z.unaryExpr([](double v) { return gelu(v); });
  Matrix y = z * a.w2.transpose();
  y.rowwise() += a.b2.transpose();
  return y;
}

Vector apply_adapter(const AdapterParams& a, std::span<const double> semantic) {
  if (semantic.size() != a.input_dim())
    throw Error(ErrorCode::invalid_argument,
                fmt::format("adapter expects input dim {}, got {}", a.input_dim(), semantic.size()));
  const Eigen::Map<const Vector> e(semantic.data(), static_cast<Eigen::Index>(semantic.size()));
  const Vector h = (a.w1 * e + a.b1).unaryExpr([](double v) { return gelu(v); });
  return a.w2 * h + a.b2;
}

double adapter_loss_and_grad(const AdapterParams& a, const Matrix& x, const Matrix& y,
                             AdapterParams* grad) {
  if (x.rows() != y.rows() || x.rows() == 0)
    throw Error(ErrorCode::invalid_argument, "adapter loss needs matching, non-empty batches");
  if (static_cast<std::size_t>(y.cols()) != a.output_dim())
    throw Error(ErrorCode::invalid_argument,
                fmt::format("adapter output dim {} but target dim {}", a.output_dim(), y.cols()));
  const double n = static_cast<double>(x.rows());
  Matrix z = x * a.w1.transpose();
  z.rowwise() += a.b1.transpose();
  const Matrix h = z.unaryExpr([](double v) { return gelu(v); });
  Matrix out = h * a.w2.transpose();
  out.rowwise() += a.b2.transpose();
  const Matrix diff = out - y;
  const double loss = diff.squaredNorm() / n;
  if (grad) {
    const Matrix dout = diff * (2.0 / n);
    grad->w2 = dout.transpose() * h;
    grad->b2 = dout.colwise().sum().transpose();
    const Matrix dh = dout * a.w2;
    const Matrix dz = dh.cwiseProduct(z.unaryExpr([](double v) { return gelu_grad(v); }));
    grad->w1 = dz.transpose() * x;
    grad->b1 = dz.colwise().sum().transpose();
  }
  return loss;
}

namespace {

std::vector<ItemId> check_same_items(const EmbeddingTable& semantic, const EmbeddingTable& collab) {
  std::set<ItemId> s(semantic.ids().begin(), semantic.ids().end());
  std::set<ItemId> c(collab.ids().begin(), collab.ids().end());
  if (s == c) return semantic.ids();
  std::vector<std::string> only_semantic, only_collab;
  for (const auto& id : s)
    if (!c.contains(id)) only_semantic.push_back(id.str());
  for (const auto& id : c)
    if (!s.contains(id)) only_collab.push_back(id.str());
  std::vector<std::string> details;
  for (const auto& id : only_semantic) details.push_back("semantic-only:" + id);
  for (const auto& id : only_collab) details.push_back("collaborative-only:" + id);
  throw Error(ErrorCode::invalid_argument,
              fmt::format("embedding tables cover different items: {} semantic-only [{}], {} "
                          "collaborative-only [{}]",
                          only_semantic.size(), fmt::join(only_semantic, ", "), only_collab.size(),
                          fmt::join(only_collab, ", ")),
              details);
}

struct AdamState {
  std::size_t step = 0;
  Matrix m_w1, v_w1, m_w2, v_w2;
  Vector m_b1, v_b1, m_b2, v_b2;

  explicit AdamState(const AdapterParams& p)
      : m_w1(Matrix::Zero(p.w1.rows(), p.w1.cols())),
        v_w1(m_w1),
        m_w2(Matrix::Zero(p.w2.rows(), p.w2.cols())),
        v_w2(m_w2),
        m_b1(Vector::Zero(p.b1.size())),
        v_b1(m_b1),
        m_b2(Vector::Zero(p.b2.size())),
        v_b2(m_b2) {}

  template <typename P, typename G, typename S>
  static void apply(P& param, const G& g, S& m, S& v, double lr, double c1, double c2) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }

  void update(AdapterParams& p, const AdapterParams& g, double lr) {
    ++step;
    const double c1 = 1.0 - std::pow(0.9, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(0.999, static_cast<double>(step));
    apply(p.w1, g.w1, m_w1, v_w1, lr, c1, c2);
    apply(p.b1, g.b1, m_b1, v_b1, lr, c1, c2);
    apply(p.w2, g.w2, m_w2, v_w2, lr, c1, c2);
    apply(p.b2, g.b2, m_b2, v_b2, lr, c1, c2);
  }
};

}  // namespace

AdapterParams train_adapter(const EmbeddingTable& semantic, const EmbeddingTable& collaborative,
                            const AdapterHyper& hyper) {
  if (semantic.empty()) throw Error(ErrorCode::invalid_argument, "empty semantic table");
  if (hyper.lr <= 0.0) throw Error(ErrorCode::invalid_argument, "adapter lr must be positive");
  const auto ids = check_same_items(semantic, collaborative);
  const Matrix x = semantic.gather(ids);
  const Matrix y = collaborative.gather(ids);

  AdapterParams p = init_adapter(semantic.dim(), collaborative.dim(), hyper);
  p.loss_curve.push_back(adapter_loss_and_grad(p, x, y, nullptr));
  AdamState adam(p);
  std::mt19937_64 rng(mix_seed(hyper.seed, 0xba7c4));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const std::size_t batch = std::max<std::size_t>(1, hyper.batch);
  AdapterParams grad;
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t lo = 0; lo < order.size(); lo += batch) {
      const std::size_t hi = std::min(order.size(), lo + batch);
      const auto n = static_cast<Eigen::Index>(hi - lo);
      Matrix bx(n, x.cols()), by(n, y.cols());
      for (Eigen::Index r = 0; r < n; ++r) {
        bx.row(r) = x.row(order[lo + static_cast<std::size_t>(r)]);
        by.row(r) = y.row(order[lo + static_cast<std::size_t>(r)]);
      }
      adapter_loss_and_grad(p, bx, by, &grad);
      adam.update(p, grad, hyper.lr);
    }
    const double loss = adapter_loss_and_grad(p, x, y, nullptr);
    if (!std::isfinite(loss))
      throw Error(ErrorCode::numeric,
                  fmt::format("adapter training diverged at epoch {} (lr {})", epoch, hyper.lr));
    p.loss_curve.push_back(loss);
    p.epochs = epoch;
  }
  return p;
}

EmbeddingTable build_hybrid_table(const AdapterParams& adapter, const EmbeddingTable& semantic) {
  EmbeddingTable out(EmbeddingSpace::hybrid, adapter.output_dim());
  if (semantic.empty()) return out;
  const Matrix y = apply_adapter(adapter, semantic.gather(semantic.ids()));
  for (std::size_t i = 0; i < semantic.size(); ++i) {
    const auto row = y.row(static_cast<Eigen::Index>(i));
    out.set(semantic.ids()[i], std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
  }
  return out;
}

void save_adapter(const AdapterParams& a, const std::filesystem::path& path) {
  Checkpoint ckpt;
  ckpt.kind = "adapter";
  ckpt.header["seed"] = a.seed;
  ckpt.header["epochs"] = a.epochs;
  ckpt.header["loss_curve"] = a.loss_curve;
  ckpt.header["input_dim"] = a.input_dim();
  ckpt.header["hidden_dim"] = a.hidden_dim();
  ckpt.header["output_dim"] = a.output_dim();
  ckpt.put("w1", a.w1);
  ckpt.put("b1", a.b1);
  ckpt.put("w2", a.w2);
  ckpt.put("b2", a.b2);
  write_checkpoint(path, ckpt);
}

AdapterParams load_adapter(const std::filesystem::path& path) {
  const auto ckpt = read_checkpoint(path, "adapter");
  AdapterParams a;
  try {
    a.seed = ckpt.header.value("seed", std::uint64_t{0});
    a.epochs = ckpt.header.value("epochs", std::size_t{0});
    a.loss_curve = ckpt.header.value("loss_curve", std::vector<double>{});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::format, fmt::format("{}: corrupt adapter header: {}", path.string(), e.what()));
  }
  a.w1 = ckpt.matrix("w1");
  a.b1 = ckpt.vector("b1");
  a.w2 = ckpt.matrix("w2");
  a.b2 = ckpt.vector("b2");
  if (a.b1.size() != a.w1.rows() || a.w2.cols() != a.w1.rows() || a.b2.size() != a.w2.rows())
    throw Error(ErrorCode::format, fmt::format("{}: inconsistent adapter tensor shapes", path.string()));
  return a;
}

// ---------------------------------------------------------------------------
// Fusion, similarity, masking

Vector fuse_vectors(const Matrix& rows) {
  if (rows.rows() == 0) throw Error(ErrorCode::invalid_argument, "cannot fuse an empty sequence");
  return rows.colwise().mean().transpose();
}

Vector fuse_user(std::span<const ItemId> sequence, const EmbeddingTable& hybrid) {
  if (sequence.empty()) throw Error(ErrorCode::invalid_argument, "cannot fuse an empty sequence");
  Vector sum = Vector::Zero(static_cast<Eigen::Index>(hybrid.dim()));
  for (const auto& id : sequence) sum += hybrid.vec(id);
  return sum / static_cast<double>(sequence.size());
}

const char* to_string(SimilarityFn fn) {
  return fn == SimilarityFn::cosine ? "cosine" : "euclidean";
}

SimilarityFn parse_similarity(std::string_view text) {
  if (text == "cosine") return SimilarityFn::cosine;
  if (text == "euclidean") return SimilarityFn::euclidean;
  throw Error(ErrorCode::invalid_argument, fmt::format("unknown similarity '{}'", text));
}

SimilarityScore similarity(std::span<const double> item, std::span<const double> user, SimilarityFn fn) {
  if (item.size() != user.size())
    throw Error(ErrorCode::invalid_argument,
                fmt::format("similarity dims differ: {} vs {}", item.size(), user.size()));
  const Eigen::Map<const Vector> a(item.data(), static_cast<Eigen::Index>(item.size()));
  const Eigen::Map<const Vector> b(user.data(), static_cast<Eigen::Index>(user.size()));
  if (fn == SimilarityFn::euclidean) {
    const double d = -(a - b).norm();
    return {d, d};
  }
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    spdlog::warn("cosine similarity with a zero-norm vector; scoring 0");
    return {0.0, 0.5};
  }
  const double cos = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return {cos, (cos + 1.0) / 2.0};
}

MaskingReport detect_and_mask(std::span<const ItemId> sequence, const EmbeddingTable& hybrid,
                              std::size_t k, const MaskOptions& options) {
  if (sequence.empty()) throw Error(ErrorCode::invalid_argument, "cannot mask an empty sequence");
  if (k >= sequence.size())
    throw Error(ErrorCode::invalid_argument,
                fmt::format("mask count k={} must be below the sequence length {}", k, sequence.size()));
  std::vector<std::string> unknown;
  for (const auto& id : sequence)
    if (!hybrid.contains(id)) unknown.push_back(id.str());
  if (!unknown.empty())
    throw Error(ErrorCode::not_found,
                fmt::format("no hybrid embedding for: {}", fmt::join(unknown, ", ")), unknown);

  MaskingReport report;
  report.fn = options.fn;
  report.input.assign(sequence.begin(), sequence.end());
  const Vector user = options.user_vector ? *options.user_vector : fuse_user(sequence, hybrid);
  const std::span<const double> u(user.data(), static_cast<std::size_t>(user.size()));
  for (const auto& id : sequence) {
    const auto s = similarity(hybrid.row(id), u, options.fn);
    report.scores.push_back(s.raw);
    report.report_scores.push_back(s.report);
  }

  std::vector<bool> locked(sequence.size(), false);
  for (auto p : options.protected_positions)
    if (p < locked.size()) locked[p] = true;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < sequence.size(); ++i)
    if (!locked[i]) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (report.scores[a] != report.scores[b]) return report.scores[a] < report.scores[b];
    if (sequence[a] != sequence[b]) return sequence[a] < sequence[b];
    return a < b;
  });
  order.resize(std::min(k, order.size()));
  for (auto i : order) report.masked.push_back(sequence[i]);
  report.masked_positions = order;
  std::sort(report.masked_positions.begin(), report.masked_positions.end());
  std::vector<bool> drop(sequence.size(), false);
  for (auto i : order) drop[i] = true;
  for (std::size_t i = 0; i < sequence.size(); ++i)
    if (!drop[i]) report.retained.push_back(sequence[i]);
  return report;
}

}  // namespace cesrec
