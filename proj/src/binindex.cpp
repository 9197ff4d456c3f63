#include "bincf/binindex.hpp"

#include <chrono>

namespace bincf {

namespace {

void check_sorted(std::span<const Index> exclude) {
  if (!std::is_sorted(exclude.begin(), exclude.end())) throw std::invalid_argument("exclude list must be sorted");
}

}  // namespace

RankedList topk(std::span<const std::uint64_t> user, const PackedCodes& items, std::size_t k,
                std::span<const Index> exclude) {
  if (k == 0) throw std::invalid_argument("topk: K must be at least 1");
  if (user.size() != items.words_per_row) throw std::invalid_argument("topk: user code length differs from items");
  check_sorted(exclude);
  TopKSelector<int> sel(k);
  const std::size_t words = items.words_per_row;
  const int dim = static_cast<int>(items.dim);
  const std::uint64_t* row = items.words.data();
  auto ex = exclude.begin();
  for (Index i = 0; i < items.rows; ++i, row += words) {
    while (ex != exclude.end() && *ex < i) ++ex;
    if (ex != exclude.end() && *ex == i) continue;
    int differing = 0;
    for (std::size_t w = 0; w < words; ++w) differing += std::popcount(user[w] ^ row[w]);
    sel.push(i, dim - 2 * differing);
  }
  return std::move(sel).take();
}

std::vector<Ranked<float>> topk_dense(const Matrix<float>& items, const Eigen::Ref<const RowVector<float>>& user,
                                      std::size_t k, std::span<const Index> exclude) {
  if (k == 0) throw std::invalid_argument("topk_dense: K must be at least 1");
  if (user.size() != items.cols()) throw std::invalid_argument("topk_dense: user length differs from items");
  check_sorted(exclude);
  const Eigen::VectorXf scores = items * user.transpose();
  return select_topk(std::span<const float>(scores.data(), static_cast<std::size_t>(scores.size())), k, exclude);
}

BenchReport bench(const PackedCodes& users, const PackedCodes& items, std::size_t k, std::size_t repetitions) {
  if (users.dim != items.dim) throw std::invalid_argument("bench: user and item code lengths differ");
  BenchReport report;
  report.dim = items.dim;
  report.users = users.rows;
  report.items = items.rows;
  report.k = k;
  report.repetitions = repetitions;
  if (repetitions == 0 || users.rows == 0) return report;

  const Matrix<float> dense_items = unpack_codes<float>(items);
  const Matrix<float> dense_users = unpack_codes<float>(users);

  using Clock = std::chrono::steady_clock;
  std::vector<RankedList> binary_lists(users.rows);
  auto start = Clock::now();
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    for (Index u = 0; u < users.rows; ++u) binary_lists[u] = topk(users.row(u), items, k);
  }
  const double binary_seconds = std::chrono::duration<double>(Clock::now() - start).count();

  std::vector<std::vector<Ranked<float>>> dense_lists(users.rows);
  start = Clock::now();
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    for (Index u = 0; u < users.rows; ++u) dense_lists[u] = topk_dense(dense_items, dense_users.row(u), k);
  }
  const double dense_seconds = std::chrono::duration<double>(Clock::now() - start).count();

  for (Index u = 0; u < users.rows && report.identical; ++u) {
    const auto& b = binary_lists[u];
    const auto& d = dense_lists[u];
    if (b.size() != d.size()) {
      report.identical = false;
      break;
    }
    for (std::size_t r = 0; r < b.size(); ++r) {
      if (b[r].item != d[r].item || static_cast<float>(b[r].score) != d[r].score) {
        report.identical = false;
        break;
      }
    }
  }

  const double queries = static_cast<double>(repetitions) * users.rows;
  report.qps_binary = queries / binary_seconds;
  report.qps_dense = queries / dense_seconds;
  report.speedup = report.qps_binary / report.qps_dense;
  report.valid = true;
  return report;
}

}  // namespace bincf
