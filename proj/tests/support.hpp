#pragma once

// Shared fixtures and brute-force reference implementations for the tests.
// The references deliberately avoid the library code paths they check.

#include "bincf/common.hpp"
#include "bincf/data.hpp"
#include "bincf/student.hpp"
#include "bincf/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace bincf::testing {

inline DenseMatrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
  DenseMatrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = lo + (hi - lo) * uniform_unit(rng);
  }
  return m;
}

inline DenseMatrix random_signs(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  DenseMatrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = uniform_below(rng, 2) ? 1.0 : -1.0;
  }
  return m;
}

inline std::vector<Interaction> to_interactions(const std::vector<std::pair<int, int>>& edges) {
  std::vector<Interaction> out;
  for (auto [u, i] : edges) out.push_back({"u" + std::to_string(u), "i" + std::to_string(i)});
  return out;
}

// Planted preferences: users 0-2 and items 0-2 form one community where every
// user misses exactly one in-block item; users 3-4 and items 3-4 form the
// other. Each in-block user's best unseen item is the missing in-block one.
inline const std::vector<std::pair<int, int>>& toy_edges() {
  static const std::vector<std::pair<int, int>> edges = {{0, 0}, {0, 1}, {1, 1}, {1, 2}, {2, 0},
                                                         {2, 2}, {3, 3}, {4, 3}, {4, 4}};
  return edges;
}

inline BipartiteGraph toy_graph() { return build_graph(to_interactions(toy_edges())); }

inline TeacherConfig toy_teacher_config() {
  TeacherConfig c;
  c.dim = 16;
  c.epochs = 200;
  c.tolerance = 0;  // fixed-length curves
  c.adam.lr = 0.01;
  return c;
}

// Coefficients (alpha, T, tau, beta, nu) stay at their defaults.
inline StudentConfig toy_student_config(std::size_t epochs) {
  StudentConfig c;
  c.epochs = epochs;
  c.tolerance = 0;
  c.adam.lr = 0.1;
  return c;
}

inline constexpr std::size_t kToyConvergenceEpochs = 200;
inline constexpr std::size_t kToyDistillEpochs = 10000;

// Random graph where every user owns at least one and at most N - 1 items
// and every item has an owner. Needs users >= 2 or items == 1.
inline BipartiteGraph random_graph(Rng& rng, Index users, Index items, double density) {
  std::vector<std::set<Index>> owned(users);
  for (Index u = 0; u < users; ++u) {
    for (Index i = 0; i < items; ++i) {
      if (uniform_unit(rng) < density) owned[u].insert(i);
    }
    if (owned[u].empty()) owned[u].insert(static_cast<Index>(uniform_below(rng, items)));
    if (owned[u].size() == items && items > 1) owned[u].erase(static_cast<Index>(uniform_below(rng, items)));
  }
  for (Index i = 0; i < items; ++i) {
    if (std::any_of(owned.begin(), owned.end(), [&](const auto& o) { return o.count(i) > 0; })) continue;
    auto owners = [&](Index j) {
      return std::count_if(owned.begin(), owned.end(), [&](const auto& o) { return o.count(j) > 0; });
    };
    for (Index step = 0; step < users; ++step) {
      auto& o = owned[(i + step) % users];
      if (o.size() + 1 < items) {
        o.insert(i);
        break;
      }
      // full user: trade an item somebody else also owns
      const auto shared = std::find_if(o.begin(), o.end(), [&](Index j) { return owners(j) > 1; });
      if (shared != o.end()) {
        o.erase(shared);
        o.insert(i);
        break;
      }
    }
  }
  std::vector<Interaction> xs;
  for (Index u = 0; u < users; ++u) {
    for (Index i : owned[u]) xs.push_back({"u" + std::to_string(u), "i" + std::to_string(i)});
  }
  return build_graph(xs);
}

// ---- ranking references -------------------------------------------------

// Full ordering by (score desc, item asc) over non-excluded items.
template <typename Score>
std::vector<Index> full_sort_ranking(const std::vector<Score>& scores, const std::set<Index>& exclude) {
  std::vector<Index> items;
  for (Index i = 0; i < scores.size(); ++i) {
    if (!exclude.count(i)) items.push_back(i);
  }
  std::stable_sort(items.begin(), items.end(), [&](Index a, Index b) { return scores[a] > scores[b]; });
  return items;
}

inline double ref_recall(const std::vector<Index>& ranked, const std::set<Index>& relevant, std::size_t k) {
  std::set<Index> top(ranked.begin(), ranked.begin() + static_cast<long>(std::min(k, ranked.size())));
  std::size_t inter = 0;
  for (Index r : relevant) inter += top.count(r);
  return double(inter) / double(relevant.size());
}

inline double ref_ndcg(const std::vector<Index>& ranked, const std::set<Index>& relevant, std::size_t k) {
  std::vector<double> gains;
  for (std::size_t pos = 1; pos <= k; ++pos) {
    gains.push_back(pos <= ranked.size() && relevant.count(ranked[pos - 1]) ? 1.0 : 0.0);
  }
  double dcg = 0;
  for (std::size_t pos = 1; pos <= gains.size(); ++pos) dcg += gains[pos - 1] / std::log2(double(pos) + 1.0);
  std::vector<double> ideal(k, 0.0);
  for (std::size_t pos = 0; pos < std::min(k, relevant.size()); ++pos) ideal[pos] = 1.0;
  double idcg = 0;
  for (std::size_t pos = 1; pos <= ideal.size(); ++pos) idcg += ideal[pos - 1] / std::log2(double(pos) + 1.0);
  return dcg / idcg;
}

inline double ref_average_precision(const std::vector<Index>& ranked, const std::set<Index>& relevant, std::size_t k) {
  double total = 0;
  for (std::size_t pos = 1; pos <= std::min(k, ranked.size()); ++pos) {
    if (!relevant.count(ranked[pos - 1])) continue;
    std::size_t hits = 0;
    for (std::size_t q = 1; q <= pos; ++q) hits += relevant.count(ranked[q - 1]);
    total += double(hits) / double(pos);
  }
  return total / double(std::min(k, relevant.size()));
}

// ---- penalty references -------------------------------------------------

inline double ref_corner(const std::vector<double>& x) {
  double g = 0;
  for (double v : x) g += (std::fabs(v) - 1.0) * (std::fabs(v) - 1.0);
  return g;
}

}  // namespace bincf::testing
