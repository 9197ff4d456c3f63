#pragma once

// Packed {-1, +1} codes and exact top-K retrieval by XOR/popcount scoring.
//
// Bit b of word w in a row encodes dimension 64 w + b; a set bit means +1.
// Bits past `dim` in the last word are always zero, so for two rows
//   <a, b> = dim - 2 popcount(a XOR b).

#include "bincf/common.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <span>
#include <vector>

namespace bincf {

struct PackedCodes {
  Index rows = 0;
  Index dim = 0;
  Index words_per_row = 0;
  std::vector<std::uint64_t> words;

  [[nodiscard]] static constexpr Index words_for(Index dim) { return (dim + 63) / 64; }

  [[nodiscard]] std::span<const std::uint64_t> row(Index r) const {
    return {words.data() + static_cast<std::size_t>(r) * words_per_row, words_per_row};
  }

  friend bool operator==(const PackedCodes&, const PackedCodes&) = default;
};

/// Entries must be exactly -1 or +1.
template <typename Derived>
PackedCodes pack_codes(const Eigen::MatrixBase<Derived>& signs) {
  using Scalar = typename Derived::Scalar;
  PackedCodes out;
  out.rows = static_cast<Index>(signs.rows());
  out.dim = static_cast<Index>(signs.cols());
  out.words_per_row = PackedCodes::words_for(out.dim);
  out.words.assign(static_cast<std::size_t>(out.rows) * out.words_per_row, 0);
  for (Index r = 0; r < out.rows; ++r) {
    std::uint64_t* dst = out.words.data() + static_cast<std::size_t>(r) * out.words_per_row;
    for (Index c = 0; c < out.dim; ++c) {
      const Scalar v = signs(r, c);
      if (v == Scalar(1)) {
        dst[c / 64] |= std::uint64_t{1} << (c % 64);
      } else if (v != Scalar(-1)) {
        throw std::invalid_argument("pack_codes: entry (" + std::to_string(r) + ", " + std::to_string(c) +
                                    ") is not +1 or -1");
      }
    }
  }
  return out;
}

template <typename Scalar = double>
Matrix<Scalar> unpack_codes(const PackedCodes& codes) {
  Matrix<Scalar> out(codes.rows, codes.dim);
  for (Index r = 0; r < codes.rows; ++r) {
    const auto row = codes.row(r);
    for (Index c = 0; c < codes.dim; ++c) {
      out(r, c) = (row[c / 64] >> (c % 64)) & 1U ? Scalar(1) : Scalar(-1);
    }
  }
  return out;
}

/// Elementwise sign with sign(0) = +1, packed.
template <typename Derived>
PackedCodes binarize(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Matrix<Scalar> signs = x.derived().unaryExpr([](Scalar v) { return v >= Scalar(0) ? Scalar(1) : Scalar(-1); });
  return pack_codes(signs);
}

/// Inner product of two packed {-1, +1} rows of length `dim`.
[[nodiscard]] inline int dot_binary(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b, Index dim) {
  if (a.size() != b.size() || a.size() != PackedCodes::words_for(dim)) {
    throw std::invalid_argument("dot_binary: rows of " + std::to_string(a.size()) + " and " +
                                std::to_string(b.size()) + " words for dim " + std::to_string(dim));
  }
  int differing = 0;
  for (std::size_t w = 0; w < a.size(); ++w) differing += std::popcount(a[w] ^ b[w]);
  return static_cast<int>(dim) - 2 * differing;
}

template <typename Score>
struct Ranked {
  Index item;
  Score score;

  friend bool operator==(const Ranked&, const Ranked&) = default;
};

using RankedList = std::vector<Ranked<int>>;

/// Bounded selection of the best K (score descending, item ascending).
template <typename Score>
class TopKSelector {
 public:
  explicit TopKSelector(std::size_t k) : k_(k) { heap_.reserve(k); }

  static bool better(const Ranked<Score>& a, const Ranked<Score>& b) {
    return a.score > b.score || (a.score == b.score && a.item < b.item);
  }

  void push(Index item, Score score) {
    if (k_ == 0) return;
    const Ranked<Score> cand{item, score};
    if (heap_.size() < k_) {
      heap_.push_back(cand);
      std::push_heap(heap_.begin(), heap_.end(), better);
    } else if (better(cand, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), better);
      heap_.back() = cand;
      std::push_heap(heap_.begin(), heap_.end(), better);
    }
  }

  /// Worst retained score once K entries are held.
  [[nodiscard]] bool full() const { return heap_.size() == k_; }
  [[nodiscard]] const Ranked<Score>& worst() const { return heap_.front(); }

  [[nodiscard]] std::vector<Ranked<Score>> take() && {
    std::sort_heap(heap_.begin(), heap_.end(), better);
    return std::move(heap_);
  }

 private:
  std::size_t k_;
  std::vector<Ranked<Score>> heap_;
};

/// Top-K over precomputed scores; `exclude` must be sorted ascending.
template <typename Score>
std::vector<Ranked<Score>> select_topk(std::span<const Score> scores, std::size_t k, std::span<const Index> exclude = {}) {
  TopKSelector<Score> sel(k);
  auto ex = exclude.begin();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    while (ex != exclude.end() && *ex < i) ++ex;
    if (ex != exclude.end() && *ex == i) continue;
    sel.push(static_cast<Index>(i), scores[i]);
  }
  return std::move(sel).take();
}

/// Exact top-K items for one packed user row; `exclude` must be sorted.
RankedList topk(std::span<const std::uint64_t> user, const PackedCodes& items, std::size_t k,
                std::span<const Index> exclude = {});

/// Float32 dense baseline: scores = items * user, then the same selection.
std::vector<Ranked<float>> topk_dense(const Matrix<float>& items, const Eigen::Ref<const RowVector<float>>& user,
                                      std::size_t k, std::span<const Index> exclude = {});

struct BenchReport {
  Index dim = 0;
  Index users = 0;
  Index items = 0;
  std::size_t k = 0;
  std::size_t repetitions = 0;
  double qps_binary = 0;
  double qps_dense = 0;
  double speedup = 0;
  bool identical = true;
  /// False when no query was timed.
  bool valid = false;
};

/// Times top-K for every user row `repetitions` times through both paths and
/// cross-checks the lists.
BenchReport bench(const PackedCodes& users, const PackedCodes& items, std::size_t k, std::size_t repetitions);

}  // namespace bincf
