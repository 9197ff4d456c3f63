#include "doctest.h"
#include "support.hpp"

#include "bincf/eval.hpp"
#include "bincf/kvfile.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace bincf;
using namespace bincf::testing;

namespace {

using List = std::vector<Index>;

// A random ranking over `n` items and a nonempty sorted relevant set.
std::pair<List, List> random_instance(Rng& rng, Index n) {
  List ranked(n);
  std::iota(ranked.begin(), ranked.end(), 0);
  for (Index i = n; i > 1; --i) std::swap(ranked[i - 1], ranked[uniform_below(rng, i)]);
  ranked.resize(1 + uniform_below(rng, n));
  List relevant;
  for (Index i = 0; i < n; ++i) {
    if (uniform_unit(rng) < 0.3) relevant.push_back(i);
  }
  if (relevant.empty()) relevant.push_back(static_cast<Index>(uniform_below(rng, n)));
  return {ranked, relevant};
}

SplitDataset tiny_split() {
  SplitDataset s;
  s.train = build_graph(to_interactions({{0, 0}, {1, 1}, {2, 2}, {2, 0}}));
  // items: i0, i1, i2 plus i3 only in test below
  s.train.item_keys.push_back("i3");
  s.test_positives = {{1}, {3}, {}};
  return s;
}

}  // namespace

TEST_CASE("metric examples") {
  const List rel{10, 20};
  CHECK(recall_at_k(List{10, 5}, rel, 2) == 0.5);
  CHECK(ndcg_at_k(List{5, 10}, List{10}, 2) == doctest::Approx(0.63093).epsilon(1e-5));
  CHECK(average_precision_at_k(List{10, 5, 20}, rel, 3) == doctest::Approx(0.83333).epsilon(1e-5));
  CHECK(recall_at_k(List{10, 20}, rel, 2) == 1.0);
  CHECK(ndcg_at_k(List{10, 20}, rel, 2) == 1.0);
  CHECK(average_precision_at_k(List{10, 20}, rel, 2) == 1.0);
  CHECK(recall_at_k(List{1, 2, 3}, rel, 3) == 0.0);
  CHECK(ndcg_at_k(List{1, 2, 3}, rel, 3) == 0.0);
  CHECK(average_precision_at_k(List{1, 2, 3}, rel, 3) == 0.0);
  // ideal DCG uses min(K, |relevant|) hits
  CHECK(ndcg_at_k(List{10}, List{10, 20, 30}, 1) == 1.0);
  CHECK_THROWS_AS((void)recall_at_k(List{1}, List{}, 1), std::invalid_argument);
}

TEST_CASE("metrics agree with brute-force definitions") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const auto [ranked, relevant] = random_instance(rng, 1 + static_cast<Index>(uniform_below(rng, 40)));
    const std::set<Index> rel(relevant.begin(), relevant.end());
    const std::size_t k = 1 + uniform_below(rng, 30);
    REQUIRE(std::abs(recall_at_k(ranked, relevant, k) - ref_recall(ranked, rel, k)) <= 1e-12);
    REQUIRE(std::abs(ndcg_at_k(ranked, relevant, k) - ref_ndcg(ranked, rel, k)) <= 1e-12);
    REQUIRE(std::abs(average_precision_at_k(ranked, relevant, k) - ref_average_precision(ranked, rel, k)) <= 1e-12);
  }
}

TEST_CASE("metrics lie in [0, 1] and recall grows with K") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed + 5000);
    const auto [ranked, relevant] = random_instance(rng, 1 + static_cast<Index>(uniform_below(rng, 40)));
    double prev = 0;
    for (std::size_t k = 1; k <= 45; ++k) {
      const double r = recall_at_k(ranked, relevant, k);
      const double n = ndcg_at_k(ranked, relevant, k);
      const double a = average_precision_at_k(ranked, relevant, k);
      REQUIRE(r >= prev);
      prev = r;
      for (double v : {r, n, a}) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("NDCG and AP can fall as K grows") {
  // A hit at rank 1 scores perfectly at K = 1, but the second relevant item
  // enters the ideal at K = 2 while the list misses it.
  const List ranked{1, 9};
  const List relevant{1, 2};
  CHECK(ndcg_at_k(ranked, relevant, 1) == 1.0);
  CHECK(ndcg_at_k(ranked, relevant, 2) == doctest::Approx(1.0 / (1.0 + 1.0 / std::log2(3.0))));
  CHECK(ndcg_at_k(ranked, relevant, 2) < ndcg_at_k(ranked, relevant, 1));
  CHECK(average_precision_at_k(ranked, relevant, 1) == 1.0);
  CHECK(average_precision_at_k(ranked, relevant, 2) == 0.5);
}

TEST_CASE("metrics ignore the order beyond K") {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    Rng rng(seed + 9000);
    auto [ranked, relevant] = random_instance(rng, 30);
    const std::size_t k = 1 + uniform_below(rng, ranked.size());
    List shuffled = ranked;
    for (std::size_t i = shuffled.size(); i > k + 1; --i) {
      std::swap(shuffled[i - 1], shuffled[k + uniform_below(rng, i - k)]);
    }
    CHECK(recall_at_k(ranked, relevant, k) == recall_at_k(shuffled, relevant, k));
    CHECK(ndcg_at_k(ranked, relevant, k) == ndcg_at_k(shuffled, relevant, k));
    CHECK(average_precision_at_k(ranked, relevant, k) == average_precision_at_k(shuffled, relevant, k));
  }
}

TEST_CASE("evaluate: a scorer that ranks the test item first is perfect") {
  const auto split = tiny_split();
  DenseMatrix users = DenseMatrix::Zero(3, 4), items = DenseMatrix::Identity(4, 4);
  users(0, 1) = 1;
  users(1, 3) = 1;
  const std::vector<std::size_t> ks{1, 3};
  const auto reports = evaluate(RealScorer{&users, &items}, split, ks);
  REQUIRE(reports.size() == 2);
  for (const auto& r : reports) {
    CHECK(r.recall == 1.0);
    CHECK(r.map == 1.0);
    CHECK(r.ndcg == 1.0);
    CHECK(r.users_evaluated == 2);
    CHECK(r.users_skipped == 1);
  }
  const auto bu = binarize(DenseMatrix(2 * users.array() - 1)), bi = binarize(DenseMatrix(2 * items.array() - 1));
  const auto binary = evaluate(BinaryScorer{&bu, &bi}, split, ks);
  CHECK(binary[0].recall == 1.0);
}

TEST_CASE("evaluate excludes train positives and averages over users") {
  Rng rng(3);
  const auto g = random_graph(rng, 30, 40, 0.2);
  SplitDataset split;
  split.train = g;
  split.test_positives.resize(30);
  for (Index u = 0; u < 30; ++u) {
    for (Index i = 0; i < 40; ++i) {
      if (!g.is_positive(u, i) && uniform_unit(rng) < 0.1) split.test_positives[u].push_back(i);
    }
  }
  const DenseMatrix users = random_matrix(rng, 30, 8), items = random_matrix(rng, 40, 8);
  const std::vector<std::size_t> ks{5, 20};
  const auto reports = evaluate(RealScorer{&users, &items}, split, ks);
  for (std::size_t c = 0; c < ks.size(); ++c) {
    double recall = 0, ndcg = 0, ap = 0;
    std::size_t count = 0;
    for (Index u = 0; u < 30; ++u) {
      if (split.test_positives[u].empty()) continue;
      std::vector<double> scores(40);
      for (Index i = 0; i < 40; ++i) scores[i] = users.row(u).dot(items.row(i));
      const auto& seen = g.user_positives[u];
      const auto ranked = full_sort_ranking(scores, std::set<Index>(seen.begin(), seen.end()));
      const std::set<Index> rel(split.test_positives[u].begin(), split.test_positives[u].end());
      recall += ref_recall(ranked, rel, ks[c]);
      ndcg += ref_ndcg(ranked, rel, ks[c]);
      ap += ref_average_precision(ranked, rel, ks[c]);
      ++count;
    }
    CHECK(reports[c].users_evaluated == count);
    CHECK(reports[c].recall == doctest::Approx(recall / count).epsilon(1e-12));
    CHECK(reports[c].ndcg == doctest::Approx(ndcg / count).epsilon(1e-12));
    CHECK(reports[c].map == doctest::Approx(ap / count).epsilon(1e-12));
  }
}

TEST_CASE("evaluate rejects mismatched scorers and empty cutoffs") {
  const auto split = tiny_split();
  const DenseMatrix users = DenseMatrix::Zero(2, 4), items = DenseMatrix::Zero(4, 4);
  const std::vector<std::size_t> ks{1};
  CHECK_THROWS_AS(evaluate(RealScorer{&users, &items}, split, ks), ShapeError);
  const DenseMatrix ok = DenseMatrix::Zero(3, 4);
  CHECK_THROWS_AS(evaluate(RealScorer{&ok, &items}, split, std::vector<std::size_t>{}), ConfigError);
}

TEST_CASE("write_eval writes kv and csv") {
  const auto dir = std::filesystem::temp_directory_path() / "bincf_eval_test";
  std::filesystem::remove_all(dir);
  const std::vector<EvalReport> reports{{10, 0.25, 0.125, 0.5, 4, 1}};
  write_eval(dir, reports, {"toy", "student", 7});
  const auto kv = KvFile::read(dir / "eval.kv");
  CHECK(kv.require_double("recall@10") == 0.25);
  CHECK(kv.require_double("map@10") == 0.125);
  CHECK(kv.require_double("ndcg@10") == 0.5);
  CHECK(kv.require("model") == "student");
  std::ifstream csv(dir / "eval.csv");
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  CHECK(header == "dataset,model,seed,K,recall,map,ndcg");
  CHECK(row == "toy,student,7,10,0.25,0.125,0.5");
  std::filesystem::remove_all(dir);
}
