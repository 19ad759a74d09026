#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cesrec/alignment.hpp"
#include "cesrec/error.hpp"
#include "cesrec/semantic.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace cesrec;
using testing::ids;

namespace {

AdapterParams random_adapter(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed) {
  AdapterHyper h;
  h.hidden_dim = hidden;
  h.seed = seed;
  auto p = init_adapter(in, out, h);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0, 0.7);
  for (auto* m : {&p.w1, &p.w2})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = n(rng);
  for (auto* v : {&p.b1, &p.b2})
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = n(rng);
  return p;
}

std::vector<std::vector<double>> rows_of(const Matrix& m) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(r)].push_back(m(r, c));
  return out;
}

std::vector<double> vec_of(const Vector& v) { return {v.data(), v.data() + v.size()}; }

EmbeddingTable table_from(const Matrix& m, EmbeddingSpace space) {
  EmbeddingTable t(space, static_cast<std::size_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const RowVector row = m.row(r);
    t.set(ItemId(std::to_string(r)), std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
  }
  return t;
}

}  // namespace

TEST_CASE("gelu closed form") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(gelu(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(gelu(-1.0) == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
  const double h = 1e-6;
  for (double x : {-3.0, -0.5, 0.0, 0.3, 2.0})
    CHECK(gelu_grad(x) == doctest::Approx((gelu(x + h) - gelu(x - h)) / (2 * h)).epsilon(1e-7));
}

TEST_CASE("adapter degenerate cases") {
  SUBCASE("zero weights output the bias") {
    auto p = random_adapter(3, 4, 2, 1);
    p.w1.setZero();
    p.w2.setZero();
    p.b2 << 0.25, -7.0;
    const auto y = apply_adapter(p, std::vector<double>{1, 2, 3});
    CHECK(y[0] == 0.25);
    CHECK(y[1] == -7.0);
  }
  SUBCASE("identity-like 1-d case") {
    auto p = random_adapter(1, 1, 1, 1);
    p.w1(0, 0) = 1;
    p.b1[0] = 0;
    p.w2(0, 0) = 1;
    p.b2[0] = 0;
    CHECK(apply_adapter(p, std::vector<double>{1.0})[0] == doctest::Approx(0.84134).epsilon(1e-5));
  }
}

TEST_CASE("adapter matches the straight-line oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = random_adapter(7, 5, 3, seed);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    Matrix x(4, 7);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
    const Matrix batch = apply_adapter(p, x);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const RowVector xr = x.row(r);
      std::vector<double> in(xr.data(), xr.data() + xr.size());
      const auto expected = oracle::adapter(rows_of(p.w1), vec_of(p.b1), rows_of(p.w2), vec_of(p.b2), in);
      const auto single = apply_adapter(p, in);
      for (std::size_t c = 0; c < expected.size(); ++c) {
        CHECK(std::abs(single[static_cast<Eigen::Index>(c)] - expected[c]) < 1e-10);
        CHECK(std::abs(batch(r, static_cast<Eigen::Index>(c)) - expected[c]) < 1e-10);
      }
    }
  }
}

TEST_CASE("alignment loss gradient matches central differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CAPTURE(seed);
    auto p = random_adapter(6, 5, 4, seed);
    std::mt19937_64 rng(seed + 10);
    std::normal_distribution<double> n;
    Matrix x(7, 6), y(7, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = n(rng);
    AdapterParams grad;
    const double loss = adapter_loss_and_grad(p, x, y, &grad);
    // Oracle loss: mean squared error norm.
    double expected = 0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const RowVector xr = x.row(r);
      const auto out = oracle::adapter(rows_of(p.w1), vec_of(p.b1), rows_of(p.w2), vec_of(p.b2),
                                       std::vector<double>(xr.data(), xr.data() + xr.size()));
      for (std::size_t c = 0; c < out.size(); ++c) expected += std::pow(out[c] - y(r, static_cast<Eigen::Index>(c)), 2);
    }
    CHECK(loss == doctest::Approx(expected / 7).epsilon(1e-12));

    const double h = 1e-6;
    double worst = 0;
    auto check_tensor = [&](double* values, const double* analytic, Eigen::Index size) {
      for (Eigen::Index i = 0; i < size; ++i) {
        const double orig = values[i];
        values[i] = orig + h;
        const double up = adapter_loss_and_grad(p, x, y, nullptr);
        values[i] = orig - h;
        const double down = adapter_loss_and_grad(p, x, y, nullptr);
        values[i] = orig;
        const double numeric = (up - down) / (2 * h);
        const double err = std::abs(numeric - analytic[i]) / std::max({1e-6, std::abs(numeric), std::abs(analytic[i])});
        worst = std::max(worst, err);
      }
    };
    check_tensor(p.w1.data(), grad.w1.data(), p.w1.size());
    check_tensor(p.b1.data(), grad.b1.data(), p.b1.size());
    check_tensor(p.w2.data(), grad.w2.data(), p.w2.size());
    check_tensor(p.b2.data(), grad.b2.data(), p.b2.size());
    CHECK(worst < 1e-4);
  }
}

namespace {

// Semantic rows from the attribute mock; collaborative rows an affine map of them.
std::pair<EmbeddingTable, EmbeddingTable> affine_pairs(std::size_t n, std::size_t d_in, std::size_t d_out,
                                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d_in));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng) / std::sqrt(static_cast<double>(d_in));
  Matrix a(static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d_out));
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  RowVector b(static_cast<Eigen::Index>(d_out));
  for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = g(rng) * 0.1;
  Matrix y = x * a;
  y.rowwise() += b;
  return {table_from(x, EmbeddingSpace::semantic), table_from(y, EmbeddingSpace::collaborative)};
}

}  // namespace

TEST_CASE("training on an affine-realizable pairing") {
  const auto [sem, col] = affine_pairs(200, 16, 8, 4);
  AdapterHyper h;
  h.hidden_dim = 64;
  h.lr = 1e-2;
  h.epochs = 200;
  h.batch = 32;
  h.seed = 3;
  const auto p = train_adapter(sem, col, h);
  REQUIRE(p.loss_curve.size() == 201);
  CHECK(p.final_loss() <= 0.01 * p.loss_curve.front());
  // Determinism.
  const auto q = train_adapter(sem, col, h);
  CHECK(q.loss_curve == p.loss_curve);
  CHECK(q.w1 == p.w1);
}

TEST_CASE("epochs=0 keeps the seeded init") {
  const auto [sem, col] = affine_pairs(20, 6, 4, 1);
  AdapterHyper h;
  h.hidden_dim = 5;
  h.epochs = 0;
  h.seed = 9;
  const auto p = train_adapter(sem, col, h);
  const auto init = init_adapter(6, 4, h);
  CHECK(p.loss_curve.size() == 1);
  CHECK(p.w1 == init.w1);
  CHECK(p.b2 == init.b2);
  const double bound = 1.0 / std::sqrt(6.0);
  CHECK(init.w1.cwiseAbs().maxCoeff() <= bound);
  CHECK(init.w2.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(5.0));
}

TEST_CASE("loss strictly decreases over the first 10 epochs with defaults") {
  MockAttributeProvider provider(32, 1);
  Catalog c({"genre", "director"});
  for (int i = 0; i < 500; ++i)
    c.add(testing::make_item(std::to_string(i), "Film " + std::to_string(i),
                             {{"genre", "g" + std::to_string(i % 7)}, {"director", "d" + std::to_string(i % 11)}}));
  const auto sem = embed_catalog(c, provider);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  EmbeddingTable col(EmbeddingSpace::collaborative, 8);
  for (const auto& id : sem.ids()) {
    std::vector<double> v(8);
    const auto s = sem.row(id);
    for (std::size_t k = 0; k < 8; ++k) v[k] = s[k] * 2.0 - s[k + 8] + 0.1 * g(rng);
    col.set(id, v);
  }
  AdapterHyper h;
  h.epochs = 10;
  const auto p = train_adapter(sem, col, h);
  for (std::size_t e = 1; e < p.loss_curve.size(); ++e) CHECK(p.loss_curve[e] < p.loss_curve[e - 1]);
}

TEST_CASE("mismatched item sets are reported") {
  EmbeddingTable a(EmbeddingSpace::semantic, 2), b(EmbeddingSpace::collaborative, 2);
  a.set(ItemId("1"), std::vector<double>{1, 0});
  a.set(ItemId("2"), std::vector<double>{0, 1});
  b.set(ItemId("2"), std::vector<double>{1, 0});
  b.set(ItemId("3"), std::vector<double>{0, 1});
  try {
    train_adapter(a, b, {});
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::invalid_argument);
    CHECK(e.details() == std::vector<std::string>{"semantic-only:1", "collaborative-only:3"});
  }
}

TEST_CASE("adapter checkpoint round trip") {
  testing::TempDir tmp;
  auto p = random_adapter(5, 3, 2, 4);
  p.loss_curve = {1.0, 0.5};
  p.epochs = 1;
  save_adapter(p, tmp / "a.ckpt");
  const auto q = load_adapter(tmp / "a.ckpt");
  CHECK(q.w1 == p.w1);
  CHECK(q.b1 == p.b1);
  CHECK(q.w2 == p.w2);
  CHECK(q.b2 == p.b2);
  CHECK(q.loss_curve == p.loss_curve);
  CHECK(q.epochs == 1);
  EmbeddingTable sem(EmbeddingSpace::semantic, 5);
  sem.set(ItemId("x"), std::vector<double>{1, 2, 3, 4, 5});
  const auto hybrid = build_hybrid_table(q, sem);
  CHECK(hybrid.space() == EmbeddingSpace::hybrid);
  CHECK(hybrid.dim() == 2);
  const auto direct = apply_adapter(p, std::vector<double>{1, 2, 3, 4, 5});
  CHECK(hybrid.row(ItemId("x"))[1] == direct[1]);
}

TEST_CASE("fusion is the component-wise mean") {
  EmbeddingTable t(EmbeddingSpace::hybrid, 2);
  t.set(ItemId("a"), std::vector<double>{1, 2});
  t.set(ItemId("b"), std::vector<double>{-1, -2});
  t.set(ItemId("c"), std::vector<double>{3, 7});
  t.set(ItemId("d"), std::vector<double>{2, 0});
  CHECK(fuse_user(ids({"c"}), t) == Vector{{3, 7}});
  CHECK(fuse_user(ids({"a", "b"}), t).isZero(0.0));
  const Vector m = fuse_user(ids({"a", "c", "d"}), t);
  CHECK(m[0] == doctest::Approx(2.0));
  CHECK(m[1] == doctest::Approx(3.0));
  CHECK_THROWS_AS(fuse_user(std::vector<ItemId>{}, t), Error);
}

TEST_CASE("similarity functions") {
  const std::vector<double> a{1, 0}, b{0, 1}, c{-1, 0}, d{3, 4};
  CHECK(similarity(a, a, SimilarityFn::cosine).raw == doctest::Approx(1.0));
  CHECK(similarity(a, a, SimilarityFn::cosine).report == doctest::Approx(1.0));
  CHECK(similarity(a, b, SimilarityFn::cosine).raw == doctest::Approx(0.0));
  CHECK(similarity(a, b, SimilarityFn::cosine).report == doctest::Approx(0.5));
  CHECK(similarity(a, c, SimilarityFn::cosine).raw == doctest::Approx(-1.0));
  CHECK(similarity(a, c, SimilarityFn::cosine).report == doctest::Approx(0.0));
  CHECK(similarity(a, d, SimilarityFn::euclidean).raw == doctest::Approx(-std::sqrt(20.0)));
  CHECK(parse_similarity("euclidean") == SimilarityFn::euclidean);
  CHECK(std::string(to_string(SimilarityFn::cosine)) == "cosine");
  CHECK_THROWS_AS(parse_similarity("manhattan"), Error);
  CHECK_THROWS_AS(similarity(a, std::vector<double>{1, 2, 3}, SimilarityFn::cosine), Error);
}

namespace {

EmbeddingTable random_table(std::size_t n, std::size_t dim, std::uint64_t seed, bool coarse = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::uniform_int_distribution<int> small(-2, 2);
  EmbeddingTable t(EmbeddingSpace::hybrid, dim);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(dim);
    for (auto& x : v) x = coarse ? small(rng) : g(rng);
    if (coarse && std::all_of(v.begin(), v.end(), [](double x) { return x == 0; })) v[0] = 1;
    t.set(ItemId(std::to_string(i)), v);
  }
  return t;
}

}  // namespace

TEST_CASE("masking properties over random sequences") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const bool coarse = trial % 2 == 1;  // coarse vectors force score ties
    const auto table = random_table(12, 3, static_cast<std::uint64_t>(trial), coarse);
    const auto n = std::uniform_int_distribution<std::size_t>(1, 15)(rng);
    std::vector<ItemId> seq;
    for (std::size_t i = 0; i < n; ++i)
      seq.emplace_back(std::to_string(std::uniform_int_distribution<int>(0, 11)(rng)));
    const auto k = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    const auto fn = trial % 3 == 0 ? SimilarityFn::euclidean : SimilarityFn::cosine;
    const auto r = detect_and_mask(seq, table, k, {.fn = fn, .protected_positions = {}, .user_vector = nullptr});

    CHECK(r.masked.size() == std::min(k, n - 1));
    CHECK(r.retained.size() == n - r.masked.size());
    CHECK(std::is_sorted(r.masked_positions.begin(), r.masked_positions.end()));
    // Multiset union and order preservation.
    std::vector<ItemId> rebuilt;
    std::size_t mp = 0;
    std::vector<ItemId> retained_expected;
    for (std::size_t i = 0; i < n; ++i) {
      if (mp < r.masked_positions.size() && r.masked_positions[mp] == i) {
        ++mp;
      } else {
        retained_expected.push_back(seq[i]);
      }
    }
    CHECK(r.retained == retained_expected);
    auto all = r.retained;
    all.insert(all.end(), r.masked.begin(), r.masked.end());
    auto orig = seq;
    std::sort(all.begin(), all.end());
    std::sort(orig.begin(), orig.end());
    CHECK(all == orig);

    // Oracle: sort positions by the normalized report score (a strictly
    // increasing transform of the raw cosine), then id, then position.
    const auto& key = fn == SimilarityFn::cosine ? r.report_scores : r.scores;
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), 0u);
    std::sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
      if (key[a] != key[b]) return key[a] < key[b];
      if (seq[a] != seq[b]) return seq[a] < seq[b];
      return a < b;
    });
    pos.resize(k);
    std::sort(pos.begin(), pos.end());
    CHECK(pos == r.masked_positions);

    // Scores are computed against the fused pre-mask sequence.
    const Vector u = fuse_user(seq, table);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(r.scores[i] == doctest::Approx(similarity(table.row(seq[i]),
                                                      std::span<const double>(u.data(), static_cast<std::size_t>(u.size())), fn)
                                               .raw));
  }
}

TEST_CASE("masking edge cases") {
  const auto table = random_table(6, 4, 1);
  const auto seq = ids({"0", "1", "2", "3"});
  const auto none = detect_and_mask(seq, table, 0);
  CHECK(none.masked.empty());
  CHECK(none.retained == seq);
  CHECK_THROWS_AS(detect_and_mask(seq, table, 4), Error);
  CHECK_THROWS_AS(detect_and_mask(ids({"0", "zz"}), table, 1), Error);

  SUBCASE("protected positions are skipped") {
    const auto plain = detect_and_mask(seq, table, 1);
    const auto worst = plain.masked_positions.front();
    const auto guarded = detect_and_mask(seq, table, 1, {.protected_positions = {worst}});
    CHECK(guarded.masked_positions.front() != worst);
    // Every position protected: nothing to mask.
    const auto all = detect_and_mask(seq, table, 2, {.protected_positions = {0, 1, 2, 3}});
    CHECK(all.masked.empty());
  }
  SUBCASE("explicit user vector overrides fusion") {
    const auto row = table.row(ItemId("2"));
    const Vector u = Eigen::Map<const Vector>(row.data(), static_cast<Eigen::Index>(row.size()));
    const auto r = detect_and_mask(seq, table, 3, {.fn = SimilarityFn::cosine, .protected_positions = {}, .user_vector = &u});
    CHECK(r.retained == ids({"2"}));
  }
}

TEST_CASE("an injected off-genre item is masked after alignment") {
  MockAttributeProvider provider(64, 2);
  Catalog c({"genre"});
  for (int i = 0; i < 30; ++i) c.add(testing::make_item("h" + std::to_string(i), "Horror " + std::to_string(i), {{"genre", "Horror"}}));
  for (int i = 0; i < 30; ++i) c.add(testing::make_item("c" + std::to_string(i), "Comedy " + std::to_string(i), {{"genre", "Comedy"}}));
  const auto sem = embed_catalog(c, provider);
  // Collaborative target: a fixed random linear image of the semantic space.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Matrix a(64, 8);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  EmbeddingTable col(EmbeddingSpace::collaborative, 8);
  for (const auto& id : sem.ids()) {
    const RowVector y = sem.vec(id).transpose() * a;
    col.set(id, std::span<const double>(y.data(), 8));
  }
  AdapterHyper h;
  h.hidden_dim = 32;
  h.lr = 1e-2;
  h.epochs = 150;
  h.batch = 16;
  const auto adapter = train_adapter(sem, col, h);
  const auto hybrid = build_hybrid_table(adapter, sem);
  std::vector<ItemId> seq;
  for (int i = 0; i < 19; ++i) seq.emplace_back("h" + std::to_string(i));
  seq.insert(seq.begin() + 7, ItemId("c4"));
  const auto r = detect_and_mask(seq, hybrid, 1);
  CHECK(r.masked == ids({"c4"}));
  CHECK(r.masked_positions == std::vector<std::size_t>{7});
}
