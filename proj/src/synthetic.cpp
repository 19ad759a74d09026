#include <algorithm>
#include <random>

#include <fmt/format.h>

#include "cesrec/error.hpp"
#include "cesrec/eval.hpp"

namespace cesrec {

namespace {

const std::vector<std::string> kGenres = {"Horror", "Comedy", "Drama",   "Action",
                                          "Romance", "Sci-Fi", "Western", "Musical"};
const std::vector<std::string> kDirectors = {"Avery Stone", "Blake Rivera", "Casey Moreau",
                                             "Devon Park",  "Emery Walsh",  "Finley Ortiz",
                                             "Gray Sato",   "Harper Quinn"};

std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::size_t pick_other(std::mt19937_64& rng, std::size_t n, std::initializer_list<std::size_t> avoid) {
  std::vector<std::size_t> options;
  for (std::size_t i = 0; i < n; ++i)
    if (std::find(avoid.begin(), avoid.end(), i) == avoid.end()) options.push_back(i);
  if (options.empty()) throw Error(ErrorCode::invalid_argument, "not enough distinct values to choose from");
  return options[pick(rng, options.size())];
}

}  // namespace

Dataset make_preference_shift_dataset(const PreferenceShiftConfig& cfg) {
  if (cfg.genres < 4 || cfg.genres > kGenres.size())
    throw Error(ErrorCode::invalid_argument, fmt::format("genres must be in [4, {}]", kGenres.size()));
  if (cfg.directors < 2 || cfg.directors > kDirectors.size())
    throw Error(ErrorCode::invalid_argument, fmt::format("directors must be in [2, {}]", kDirectors.size()));
  if (cfg.min_history == 0 || cfg.min_history > cfg.max_history || cfg.max_history + 1 > cfg.items_per_cell)
    throw Error(ErrorCode::invalid_argument, "history bounds must satisfy 0 < min <= max < items_per_cell");

  Dataset ds;
  ds.catalog = Catalog({"genre", "director"});
  // cell[g][d] -> item ids
  std::vector<std::vector<std::vector<ItemId>>> cell(cfg.genres, std::vector<std::vector<ItemId>>(cfg.directors));
  std::size_t next_id = 1;
  for (std::size_t g = 0; g < cfg.genres; ++g)
    for (std::size_t d = 0; d < cfg.directors; ++d)
      for (std::size_t n = 0; n < cfg.items_per_cell; ++n) {
        Item item;
        item.id = ItemId(std::to_string(next_id++));
        item.title = fmt::format("{} Picture {} by {}", kGenres[g], n + 1, kDirectors[d]);
        item.attributes["genre"] = {kGenres[g]};
        item.attributes["director"] = {kDirectors[d]};
        cell[g][d].push_back(item.id);
        ds.catalog.add(std::move(item));
      }

  std::vector<std::pair<std::string, Event>> rows;
  for (std::size_t u = 0; u < cfg.users; ++u) {
    std::mt19937_64 rng(mix_seed(cfg.seed, u));
    const std::size_t dir = pick(rng, cfg.directors);
    const std::size_t main = pick(rng, cfg.genres);
    const std::size_t shift = pick_other(rng, cfg.genres, {main});
    const bool mixed = std::bernoulli_distribution(cfg.mixed_user_share)(rng);
    const std::size_t second = mixed ? pick_other(rng, cfg.genres, {main, shift}) : main;
    const std::size_t n = std::uniform_int_distribution<std::size_t>(cfg.min_history, cfg.max_history)(rng);

    std::vector<std::vector<ItemId>> pools = {cell[main][dir], mixed ? cell[second][dir] : std::vector<ItemId>{}};
    for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);
    std::vector<ItemId> seq;
    std::bernoulli_distribution use_second(cfg.secondary_rate);
    for (std::size_t i = 0; i < n + 1; ++i) {  // history plus the valid item
      std::size_t which = mixed && use_second(rng) ? 1 : 0;
      if (pools[which].empty()) which = 1 - which;
      if (pools[which].empty()) break;
      seq.push_back(pools[which].back());
      pools[which].pop_back();
    }
    if (cfg.inject_outlier) {
      const std::size_t og = pick_other(rng, cfg.genres, {main, shift, second});
      const std::size_t od = pick_other(rng, cfg.directors, {dir});
      const auto& oc = cell[og][od];
      const std::size_t pos = pick(rng, seq.size());  // never after the valid item
      seq.insert(seq.begin() + static_cast<std::ptrdiff_t>(pos), oc[pick(rng, oc.size())]);
    }
    const auto& tc = cell[shift][dir];
    seq.push_back(tc[pick(rng, tc.size())]);

    const std::string user = std::to_string(u + 1);
    for (std::size_t t = 0; t < seq.size(); ++t)
      rows.emplace_back(user, Event{seq[t], static_cast<std::int64_t>(1'000'000 + u * 1000 + t)});
  }
  ds.sequences = build_sequences(std::move(rows));
  return ds;
}

Dataset make_cycle_dataset(const CycleConfig& cfg) {
  if (cfg.items < 2 || cfg.min_length < 3 || cfg.min_length > cfg.max_length)
    throw Error(ErrorCode::invalid_argument, "cycle dataset needs >= 2 items and 3 <= min_length <= max_length");
  Dataset ds;
  ds.catalog = Catalog({"genre"});
  for (std::size_t i = 0; i < cfg.items + cfg.filler_items; ++i) {
    Item item;
    item.id = ItemId(std::to_string(i));
    const bool filler = i >= cfg.items;
    item.title = fmt::format("{} item {}", filler ? "Filler" : "Cycle", i);
    item.attributes["genre"] = {filler ? "filler" : fmt::format("phase {}", i % 5)};
    ds.catalog.add(std::move(item));
  }
  std::vector<std::pair<std::string, Event>> rows;
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t u = 0; u < cfg.users; ++u) {
    const std::size_t start = pick(rng, cfg.items);
    const std::size_t len = std::uniform_int_distribution<std::size_t>(cfg.min_length, cfg.max_length)(rng);
    for (std::size_t t = 0; t < len; ++t)
      rows.emplace_back(std::to_string(u + 1),
                        Event{ItemId(std::to_string((start + t) % cfg.items)), static_cast<std::int64_t>(t)});
  }
  ds.sequences = build_sequences(std::move(rows));
  return ds;
}

// ---------------------------------------------------------------------------
// Movie fixtures

namespace {

struct MovieSpec {
  const char* title;
  std::vector<std::string> genres;
};

// Genre sets are chosen so that Super Mario Bros. shares no genre with the
// rest of the session and Cops and Robbersons is the comedy with the
// rarest companion genre.
const std::vector<MovieSpec> kCaseStudyHistory = {
    {"I Still Know What You Did Last Summer", {"Horror", "Mystery", "Thriller"}},
    {"Jungle 2 Jungle", {"Children's", "Comedy"}},
    {"Two if by Sea", {"Comedy", "Romance"}},
    {"M. Butterfly", {"Drama", "Romance"}},
    {"Super Mario Bros.", {"Action", "Adventure", "Animation"}},
    {"Blank Check", {"Children's", "Comedy"}},
    {"Repossessed", {"Comedy"}},
    {"The Evening Star", {"Comedy", "Drama"}},
    {"The Beautician and the Beast", {"Comedy", "Romance"}},
    {"Mr. Wrong", {"Comedy"}},
    {"A Night at the Roxbury", {"Comedy"}},
    {"Halloween: The Curse of Michael Myers", {"Horror", "Thriller"}},
    {"Stop! Or My Mom Will Shoot", {"Comedy"}},
    {"Cops and Robbersons", {"Comedy", "Crime"}},
};

const std::vector<MovieSpec> kCaseStudyExtra = {
    {"Halloween: H20", {"Horror", "Thriller"}},
    {"Carnosaur 2", {"Horror", "Sci-Fi"}},
    {"Sleepy Hollow", {"Horror", "Mystery"}},
    {"Scream", {"Horror", "Thriller"}},
    {"The Exorcist", {"Horror"}},
    {"A Nightmare on Elm Street", {"Horror"}},
    {"Candyman", {"Horror"}},
    {"The Fog", {"Horror"}},
    {"Child's Play", {"Horror"}},
    {"Hellraiser", {"Horror"}},
    {"The Shining", {"Horror"}},
    {"Psycho", {"Horror", "Thriller"}},
    {"Jack Frost", {"Comedy"}},
    {"Dogma", {"Comedy"}},
    {"Airplane!", {"Comedy"}},
    {"Tommy Boy", {"Comedy"}},
    {"Billy Madison", {"Comedy"}},
    {"Dumb and Dumber", {"Comedy"}},
    {"Kingpin", {"Comedy"}},
    {"Happy Gilmore", {"Comedy"}},
    {"The Nutty Professor", {"Comedy", "Romance"}},
    {"Mrs. Doubtfire", {"Comedy"}},
    {"Toy Story", {"Animation", "Children's"}},
    {"The Lion King", {"Animation", "Children's"}},
    {"Die Hard", {"Action", "Thriller"}},
    {"Speed", {"Action", "Thriller"}},
    {"Jurassic Park", {"Action", "Adventure", "Sci-Fi"}},
    {"Street Fighter", {"Action"}},
    {"Mortal Kombat", {"Action", "Adventure"}},
    {"Double Dragon", {"Action", "Adventure"}},
    {"Sense and Sensibility", {"Drama", "Romance"}},
    {"The English Patient", {"Drama", "Romance"}},
    {"Titanic", {"Drama", "Romance"}},
    {"Heat", {"Action", "Crime"}},
    {"Pulp Fiction", {"Crime", "Drama"}},
    {"Fargo", {"Crime", "Drama"}},
};

void add_movie(Catalog& catalog, std::size_t id, const MovieSpec& m) {
  Item item;
  item.id = ItemId(std::to_string(id));
  item.title = m.title;
  item.attributes["genre"] = std::set<std::string>(m.genres.begin(), m.genres.end());
  catalog.add(std::move(item));
}

}  // namespace

CaseStudyFixture make_case_study_fixture(std::size_t training_users, std::uint64_t seed) {
  CaseStudyFixture fx;
  fx.dataset.catalog = Catalog({"genre"});
  std::size_t id = 1;
  for (const auto& m : kCaseStudyHistory) {
    fx.history.push_back(ItemId(std::to_string(id)));
    add_movie(fx.dataset.catalog, id++, m);
  }
  for (const auto& m : kCaseStudyExtra) {
    if (std::string_view(m.title) == "Halloween: H20") fx.target = ItemId(std::to_string(id));
    add_movie(fx.dataset.catalog, id++, m);
  }

  // Training users watch runs of one genre at a time, so the genre of the
  // latest items predicts the next one. The last pool mixes horror and
  // comedy, the taste of the case-study viewer.
  const auto& catalog = fx.dataset.catalog;
  const std::vector<std::string> run_genres = {"Horror", "Comedy", "Action", "Drama", "Romance",
                                               "Children's", "Thriller", "Crime"};
  std::vector<std::vector<ItemId>> by_genre;
  for (const auto& g : run_genres) by_genre.push_back(catalog.items_with("genre", g));
  {
    auto mixed = catalog.items_with("genre", "Horror");
    for (const auto& id : catalog.items_with("genre", "Comedy"))
      if (std::find(mixed.begin(), mixed.end(), id) == mixed.end()) mixed.push_back(id);
    std::sort(mixed.begin(), mixed.end());
    by_genre.push_back(std::move(mixed));
  }
  std::vector<std::pair<std::string, Event>> rows;
  std::mt19937_64 rng(seed);
  for (std::size_t u = 0; u < training_users; ++u) {
    const std::string user = fmt::format("viewer-{}", u + 1);
    std::set<ItemId> seen;
    std::int64_t t = 0;
    const std::size_t runs = 2 + pick(rng, 3);
    // Half the viewers share the case-study taste and watch one long
    // interleaved horror/comedy run.
    const bool fan = std::uniform_real_distribution<double>(0, 1)(rng) < 0.5;
    std::size_t prev = by_genre.size();
    for (std::size_t r = 0; r < (fan ? 1 : runs); ++r) {
      std::size_t g = fan ? by_genre.size() - 1 : pick(rng, by_genre.size());
      while (!fan && g == prev) g = pick(rng, by_genre.size());
      prev = g;
      auto pool = by_genre[g];
      std::shuffle(pool.begin(), pool.end(), rng);
      const std::size_t len = fan ? 8 + pick(rng, 8) : 3 + pick(rng, 4);
      std::size_t taken = 0;
      for (const auto& item : pool) {
        if (taken == len) break;
        if (!seen.insert(item).second) continue;
        rows.emplace_back(user, Event{item, t++});
        ++taken;
      }
    }
  }
  // The case-study viewer, ending on the target.
  std::int64_t t = 0;
  for (const auto& item : fx.history) rows.emplace_back("case-study", Event{item, t++});
  rows.emplace_back("case-study", Event{fx.target, t++});
  fx.dataset.sequences = build_sequences(std::move(rows));
  return fx;
}

PolarityFixture make_polarity_fixture() {
  static const std::vector<MovieSpec> sequence = {
      {"Dumb and Dumber", {"Comedy"}},
      {"The Hangover", {"Comedy"}},
      {"Bridesmaids", {"Comedy", "Romance"}},
      {"Anchorman", {"Comedy"}},
      {"The Exorcist", {"Horror"}},
      {"Hereditary", {"Horror"}},
      {"The Conjuring", {"Horror", "Mystery"}},
      {"A Nightmare on Elm Street", {"Horror"}},
      {"The Babadook", {"Horror"}},
      {"It", {"Horror"}},
      {"Superbad", {"Comedy"}},
      {"Step Brothers", {"Comedy"}},
  };
  static const std::vector<MovieSpec> extra = {
      {"Dogma", {"Comedy"}},
      {"Sleepy Hollow", {"Horror"}},
  };
  PolarityFixture fx;
  fx.catalog = Catalog({"genre"});
  std::size_t id = 1;
  for (const auto& m : sequence) {
    fx.sequence.push_back(ItemId(std::to_string(id)));
    add_movie(fx.catalog, id++, m);
  }
  for (const auto& m : extra) add_movie(fx.catalog, id++, m);
  return fx;
}

}  // namespace cesrec
