#pragma once

#include "bincf/binindex.hpp"
#include "bincf/common.hpp"
#include "bincf/data.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace bincf {

// Ranking metrics over the first K entries of `ranked` with binary relevance.
// `relevant` must be sorted and nonempty.

/// |top-K ∩ relevant| / |relevant|
double recall_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k);

/// DCG with 1 / log2(rank + 1) discounts, normalized by the ideal DCG of
/// min(K, |relevant|) leading hits.
double ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k);

/// Sum of precision at each hit rank, divided by min(K, |relevant|).
double average_precision_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k);

struct EvalReport {
  std::size_t k = 0;
  double recall = 0;
  double map = 0;
  double ndcg = 0;
  std::size_t users_evaluated = 0;
  /// Users without test positives; excluded from the averages.
  std::size_t users_skipped = 0;
};

struct BinaryScorer {
  const PackedCodes* users;
  const PackedCodes* items;
};

struct RealScorer {
  const DenseMatrix* users;
  const DenseMatrix* items;
};

using Scorer = std::variant<BinaryScorer, RealScorer>;

/// Ranks every item except the user's train positives and scores the list
/// against the test positives. One report per cutoff in `ks`.
std::vector<EvalReport> evaluate(const Scorer& scorer, const SplitDataset& split, std::span<const std::size_t> ks);

/// Top-K candidates for one user under either scorer; excludes `exclude`.
std::vector<Index> rank_items(const Scorer& scorer, Index user, std::size_t k, std::span<const Index> exclude);

struct EvalEcho {
  std::string dataset;
  std::string model;
  std::uint64_t seed = 0;
};

/// eval.kv (key=value, suffixed by K) and eval.csv
/// (dataset,model,seed,K,recall,map,ndcg).
void write_eval(const std::filesystem::path& dir, std::span<const EvalReport> reports, const EvalEcho& echo);

}  // namespace bincf
