#pragma once

#include "bincf/common.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bincf {

struct Interaction {
  std::string user;
  std::string item;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

enum class RatingFormat { movielens, tsv };

/// "movielens" or "tsv"; throws ConfigError otherwise.
RatingFormat parse_rating_format(std::string_view name);
std::string_view to_string(RatingFormat format);

class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what);
  [[nodiscard]] std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Every rating counts as an observed interaction. Duplicated (user, item)
/// pairs keep their first occurrence. Blank lines are ignored.
std::vector<Interaction> parse_ratings(std::istream& source, RatingFormat format);

/// Drops users with fewer than `min_user` interactions, then items with fewer
/// than `min_item` among the survivors. One pass of each, in that order.
std::vector<Interaction> filter_min_degree(std::span<const Interaction> interactions, std::size_t min_user = 20,
                                           std::size_t min_item = 20);

/// Keeps each distinct user independently with probability `fraction`.
std::vector<Interaction> subsample_users(std::span<const Interaction> interactions, double fraction,
                                         std::uint64_t seed);

/// User-item bipartite graph with dense indices. Users occupy vertices
/// [0, M) and items [M, M + N) whenever the graph is viewed as one vertex set.
struct BipartiteGraph {
  std::vector<std::string> user_keys;
  std::vector<std::string> item_keys;
  /// Sorted item indices per user.
  std::vector<std::vector<Index>> user_positives;

  [[nodiscard]] Index num_users() const { return static_cast<Index>(user_keys.size()); }
  [[nodiscard]] Index num_items() const { return static_cast<Index>(item_keys.size()); }
  [[nodiscard]] std::size_t num_interactions() const;
  [[nodiscard]] bool is_positive(Index user, Index item) const;
};

/// Key lookups for a graph's index maps.
class KeyIndex {
 public:
  KeyIndex() = default;
  explicit KeyIndex(std::span<const std::string> keys);
  [[nodiscard]] const Index* find(const std::string& key) const;

 private:
  std::unordered_map<std::string, Index> map_;
};

/// Indices are assigned in first-appearance order.
BipartiteGraph build_graph(std::span<const Interaction> interactions);

struct SplitDataset {
  BipartiteGraph train;
  std::vector<std::vector<Index>> test_positives;
  std::uint64_t split_seed = 0;
  double ratio = 0.5;
};

/// Per user, a uniformly random ceil(ratio * n) of the positives go to train
/// and the rest to test. Users with a single interaction are dropped with a
/// warning on stderr; DataError when nobody is left.
SplitDataset split_per_user(std::span<const Interaction> interactions, double ratio, std::uint64_t seed);

/// Symmetric normalized adjacency D^{-1/2} A D^{-1/2} over M + N vertices.
/// Zero-degree vertices get all-zero rows and columns.
SparseMatrix build_laplacian(const BipartiteGraph& graph);

struct BprTriple {
  Index user;
  Index positive;
  Index negative;

  friend bool operator==(const BprTriple&, const BprTriple&) = default;
};

/// One triple per (user, train positive) with a uniformly drawn unobserved
/// negative. Users that own every item are skipped with a warning on stderr.
std::vector<BprTriple> sample_bpr_epoch(const BipartiteGraph& graph, std::uint64_t seed);

/// Uniform sample without replacement of min(count, N - |I+|) unobserved items
/// of `user`, in draw order.
std::vector<Index> sample_negatives(const BipartiteGraph& graph, Index user, std::size_t count, Rng& rng);

struct PrepareOptions {
  RatingFormat format = RatingFormat::movielens;
  std::size_t min_user = 20;
  std::size_t min_item = 20;
  double ratio = 0.5;
  std::uint64_t seed = 1;
  double user_fraction = 1.0;
};

struct PrepareSummary {
  std::size_t raw_interactions = 0;
  std::size_t filtered_interactions = 0;
  std::size_t train_interactions = 0;
  std::size_t test_interactions = 0;
};

/// Writes users.tsv, items.tsv, train.tsv, test.tsv and meta.kv into `dir`.
void write_split(const std::filesystem::path& dir, const SplitDataset& split, const PrepareOptions& options,
                 const PrepareSummary& summary);
SplitDataset read_split(const std::filesystem::path& dir);

}  // namespace bincf
