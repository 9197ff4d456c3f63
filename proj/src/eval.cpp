#include "bincf/eval.hpp"

#include "bincf/kvfile.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace bincf {

namespace {

bool contains(std::span<const Index> sorted, Index item) {
  return std::binary_search(sorted.begin(), sorted.end(), item);
}

std::size_t row_count(const PackedCodes& c) { return c.rows; }
std::size_t row_count(const DenseMatrix& m) { return static_cast<std::size_t>(m.rows()); }

std::size_t cutoff(std::span<const Index> ranked, std::size_t k) { return std::min(k, ranked.size()); }

void check_relevant(std::span<const Index> relevant) {
  if (relevant.empty()) throw std::invalid_argument("ranking metric: relevant set is empty");
}

}  // namespace

double recall_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k) {
  check_relevant(relevant);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < cutoff(ranked, k); ++r) hits += contains(relevant, ranked[r]);
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

double ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k) {
  check_relevant(relevant);
  double dcg = 0;
  for (std::size_t r = 0; r < cutoff(ranked, k); ++r) {
    if (contains(relevant, ranked[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  double ideal = 0;
  const std::size_t ideal_hits = std::min(k, relevant.size());
  for (std::size_t r = 0; r < ideal_hits; ++r) ideal += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return ideal == 0 ? 0.0 : dcg / ideal;
}

double average_precision_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k) {
  check_relevant(relevant);
  if (k == 0) return 0.0;
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < cutoff(ranked, k); ++r) {
    if (contains(relevant, ranked[r])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(std::min(k, relevant.size()));
}

std::vector<Index> rank_items(const Scorer& scorer, Index user, std::size_t k, std::span<const Index> exclude) {
  std::vector<Index> out;
  if (const auto* bin = std::get_if<BinaryScorer>(&scorer)) {
    for (const auto& r : topk(bin->users->row(user), *bin->items, k, exclude)) out.push_back(r.item);
    return out;
  }
  const auto& real = std::get<RealScorer>(scorer);
  const Eigen::VectorXd scores = *real.items * real.users->row(user).transpose();
  const auto best = select_topk(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), k,
                                exclude);
  for (const auto& r : best) out.push_back(r.item);
  return out;
}

std::vector<EvalReport> evaluate(const Scorer& scorer, const SplitDataset& split, std::span<const std::size_t> ks) {
  if (ks.empty()) throw ConfigError("evaluate: no cutoffs requested");
  const Index m = split.train.num_users();
  const Index n = split.train.num_items();
  std::visit(
      [&](const auto& s) {
        const std::size_t user_rows = row_count(*s.users);
        const std::size_t item_rows = row_count(*s.items);
        if (user_rows != m || item_rows != n) {
          throw ShapeError("evaluate: scorer has " + std::to_string(user_rows) + " users / " +
                           std::to_string(item_rows) + " items, split has " + std::to_string(m) + " / " +
                           std::to_string(n));
        }
      },
      scorer);

  const std::size_t max_k = *std::max_element(ks.begin(), ks.end());
  if (max_k == 0) throw ConfigError("evaluate: cutoffs must be positive");
  std::vector<EvalReport> reports(ks.size());
  for (std::size_t c = 0; c < ks.size(); ++c) reports[c].k = ks[c];

  for (Index u = 0; u < m; ++u) {
    const auto& relevant = split.test_positives[u];
    if (relevant.empty()) {
      for (auto& rep : reports) ++rep.users_skipped;
      continue;
    }
    const std::vector<Index> ranked = rank_items(scorer, u, max_k, split.train.user_positives[u]);
    for (auto& rep : reports) {
      rep.recall += recall_at_k(ranked, relevant, rep.k);
      rep.map += average_precision_at_k(ranked, relevant, rep.k);
      rep.ndcg += ndcg_at_k(ranked, relevant, rep.k);
      ++rep.users_evaluated;
    }
  }
  for (auto& rep : reports) {
    if (rep.users_evaluated == 0) continue;
    const auto count = static_cast<double>(rep.users_evaluated);
    rep.recall /= count;
    rep.map /= count;
    rep.ndcg /= count;
  }
  return reports;
}

void write_eval(const std::filesystem::path& dir, std::span<const EvalReport> reports, const EvalEcho& echo) {
  std::filesystem::create_directories(dir);
  KvFile kv;
  kv.set("dataset", echo.dataset);
  kv.set("model", echo.model);
  kv.set("seed", echo.seed);
  for (const auto& r : reports) {
    const std::string suffix = "@" + std::to_string(r.k);
    kv.set("recall" + suffix, r.recall);
    kv.set("map" + suffix, r.map);
    kv.set("ndcg" + suffix, r.ndcg);
    kv.set("users_evaluated" + suffix, std::uint64_t{r.users_evaluated});
    kv.set("users_skipped" + suffix, std::uint64_t{r.users_skipped});
  }
  kv.write(dir / "eval.kv");

  std::ofstream csv(dir / "eval.csv", std::ios::binary);
  if (!csv) throw DataError("cannot write " + (dir / "eval.csv").string());
  csv << "dataset,model,seed,K,recall,map,ndcg\n";
  for (const auto& r : reports) {
    csv << echo.dataset << ',' << echo.model << ',' << echo.seed << ',' << r.k << ',' << format_double(r.recall) << ','
        << format_double(r.map) << ',' << format_double(r.ndcg) << '\n';
  }
}

}  // namespace bincf
