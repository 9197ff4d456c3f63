#include "bincf/data.hpp"

#include "bincf/kvfile.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <unordered_map>
#include <unordered_set>

namespace bincf {

namespace {

std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

bool is_number(std::string_view s) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

Index parse_index(std::string_view s, std::size_t line, const std::string& file) {
  Index v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw DataError(file + ":" + std::to_string(line) + ": bad index '" + std::string(s) + "'");
  }
  return v;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  return is;
}

std::vector<std::string> read_keys(const std::filesystem::path& path) {
  auto is = open_input(path);
  std::vector<std::string> keys;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_fields(line, "\t");
    if (fields.size() != 2) throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected key\\tindex");
    const Index idx = parse_index(fields[1], line_no, path.string());
    if (idx != keys.size()) throw DataError(path.string() + ":" + std::to_string(line_no) + ": indices not dense");
    keys.emplace_back(fields[0]);
  }
  return keys;
}

std::vector<std::vector<Index>> read_pairs(const std::filesystem::path& path, Index users, Index items) {
  auto is = open_input(path);
  std::vector<std::vector<Index>> lists(users);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_fields(line, "\t");
    if (fields.size() != 2) throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected user\\titem");
    const Index u = parse_index(fields[0], line_no, path.string());
    const Index i = parse_index(fields[1], line_no, path.string());
    if (u >= users || i >= items) throw DataError(path.string() + ":" + std::to_string(line_no) + ": index out of range");
    lists[u].push_back(i);
  }
  for (auto& l : lists) {
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
  }
  return lists;
}

void write_pairs(const std::filesystem::path& path, const std::vector<std::vector<Index>>& lists) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  for (std::size_t u = 0; u < lists.size(); ++u) {
    for (Index i : lists[u]) os << u << '\t' << i << '\n';
  }
}

void write_keys(const std::filesystem::path& path, const std::vector<std::string>& keys) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  for (std::size_t k = 0; k < keys.size(); ++k) os << keys[k] << '\t' << k << '\n';
}

}  // namespace

ParseError::ParseError(std::size_t line, const std::string& what)
    : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}

RatingFormat parse_rating_format(std::string_view name) {
  if (name == "movielens" || name == "movielens-dat") return RatingFormat::movielens;
  if (name == "tsv") return RatingFormat::tsv;
  throw ConfigError("unknown rating format '" + std::string(name) + "' (expected movielens or tsv)");
}

std::string_view to_string(RatingFormat format) {
  return format == RatingFormat::movielens ? "movielens" : "tsv";
}

std::vector<Interaction> parse_ratings(std::istream& source, RatingFormat format) {
  const std::string_view sep = format == RatingFormat::movielens ? "::" : "\t";
  std::vector<Interaction> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(source, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line, sep);
    if (fields.size() < 3 || fields.size() > 4) {
      throw ParseError(line_no, "expected 3 or 4 fields, found " + std::to_string(fields.size()));
    }
    if (fields[0].empty() || fields[1].empty()) throw ParseError(line_no, "empty user or item key");
    if (!is_number(fields[2])) throw ParseError(line_no, "rating is not numeric: '" + std::string(fields[2]) + "'");
    std::string key;
    key.reserve(fields[0].size() + fields[1].size() + 1);
    key.append(fields[0]).push_back('\0');
    key.append(fields[1]);
    if (seen.insert(std::move(key)).second) out.push_back({std::string(fields[0]), std::string(fields[1])});
  }
  return out;
}

std::vector<Interaction> filter_min_degree(std::span<const Interaction> interactions, std::size_t min_user,
                                           std::size_t min_item) {
  std::unordered_map<std::string_view, std::size_t> user_count;
  for (const auto& x : interactions) ++user_count[x.user];
  std::vector<Interaction> kept;
  for (const auto& x : interactions) {
    if (user_count[x.user] >= min_user) kept.push_back(x);
  }
  std::unordered_map<std::string_view, std::size_t> item_count;
  for (const auto& x : kept) ++item_count[x.item];
  std::vector<Interaction> out;
  for (const auto& x : kept) {
    if (item_count[x.item] >= min_item) out.push_back(x);
  }
  return out;
}

std::vector<Interaction> subsample_users(std::span<const Interaction> interactions, double fraction,
                                         std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("user fraction must lie in (0, 1]");
  if (fraction == 1.0) return {interactions.begin(), interactions.end()};
  Rng rng(derive_seed(seed, 0x5ab5ULL));
  std::unordered_map<std::string_view, bool> keep;
  std::vector<Interaction> out;
  for (const auto& x : interactions) {
    auto [it, inserted] = keep.try_emplace(x.user, false);
    if (inserted) it->second = uniform_unit(rng) < fraction;
    if (it->second) out.push_back(x);
  }
  return out;
}

std::size_t BipartiteGraph::num_interactions() const {
  std::size_t n = 0;
  for (const auto& p : user_positives) n += p.size();
  return n;
}

bool BipartiteGraph::is_positive(Index user, Index item) const {
  const auto& p = user_positives[user];
  return std::binary_search(p.begin(), p.end(), item);
}

KeyIndex::KeyIndex(std::span<const std::string> keys) {
  map_.reserve(keys.size());
  for (std::size_t k = 0; k < keys.size(); ++k) map_.emplace(keys[k], static_cast<Index>(k));
}

const Index* KeyIndex::find(const std::string& key) const {
  auto it = map_.find(key);
  return it == map_.end() ? nullptr : &it->second;
}

BipartiteGraph build_graph(std::span<const Interaction> interactions) {
  BipartiteGraph g;
  std::unordered_map<std::string, Index> users;
  std::unordered_map<std::string, Index> items;
  for (const auto& x : interactions) {
    auto [u, new_user] = users.try_emplace(x.user, static_cast<Index>(g.user_keys.size()));
    if (new_user) {
      g.user_keys.push_back(x.user);
      g.user_positives.emplace_back();
    }
    auto [i, new_item] = items.try_emplace(x.item, static_cast<Index>(g.item_keys.size()));
    if (new_item) g.item_keys.push_back(x.item);
    g.user_positives[u->second].push_back(i->second);
  }
  for (auto& p : g.user_positives) {
    std::sort(p.begin(), p.end());
    p.erase(std::unique(p.begin(), p.end()), p.end());
  }
  return g;
}

SplitDataset split_per_user(std::span<const Interaction> interactions, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("split ratio must lie in (0, 1]");
  // Users that cannot contribute to both halves are dropped with a diagnostic.
  std::unordered_map<std::string_view, std::size_t> per_user;
  for (const auto& x : interactions) ++per_user[x.user];
  std::vector<Interaction> kept;
  kept.reserve(interactions.size());
  std::size_t dropped = 0;
  for (const auto& x : interactions) {
    if (per_user[x.user] >= 2) {
      kept.push_back(x);
    } else {
      if (dropped == 0) std::cerr << "warning: user '" << x.user << "' has 1 interaction; dropped from the split\n";
      ++dropped;
    }
  }
  if (dropped > 1) std::cerr << "warning: " << dropped << " users with a single interaction dropped in total\n";
  if (kept.empty()) throw DataError("no user has the 2 interactions needed to split");

  SplitDataset split;
  split.train = build_graph(kept);
  split.split_seed = seed;
  split.ratio = ratio;
  split.test_positives.resize(split.train.num_users());
  Rng rng(derive_seed(seed, 0x511dULL));
  for (Index u = 0; u < split.train.num_users(); ++u) {
    auto& positives = split.train.user_positives[u];
    const std::size_t n = positives.size();
    for (std::size_t k = n - 1; k > 0; --k) std::swap(positives[k], positives[uniform_below(rng, k + 1)]);
    const auto n_train = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n)));
    std::vector<Index> test(positives.begin() + static_cast<std::ptrdiff_t>(n_train), positives.end());
    positives.resize(n_train);
    std::sort(positives.begin(), positives.end());
    std::sort(test.begin(), test.end());
    split.test_positives[u] = std::move(test);
  }
  return split;
}

SparseMatrix build_laplacian(const BipartiteGraph& graph) {
  const Index m = graph.num_users();
  const Index n = graph.num_items();
  const auto size = static_cast<Eigen::Index>(m) + n;
  std::vector<double> degree(static_cast<std::size_t>(size), 0.0);
  for (Index u = 0; u < m; ++u) {
    degree[u] = static_cast<double>(graph.user_positives[u].size());
    for (Index i : graph.user_positives[u]) degree[static_cast<std::size_t>(m) + i] += 1.0;
  }
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(2 * graph.num_interactions());
  for (Index u = 0; u < m; ++u) {
    for (Index i : graph.user_positives[u]) {
      const auto item_vertex = static_cast<Eigen::Index>(m) + i;
      // Both orientations get the identical product, so L is exactly symmetric.
      const double w = 1.0 / std::sqrt(degree[u] * degree[static_cast<std::size_t>(item_vertex)]);
      entries.emplace_back(u, item_vertex, w);
      entries.emplace_back(item_vertex, u, w);
    }
  }
  SparseMatrix lap(size, size);
  lap.setFromTriplets(entries.begin(), entries.end());
  lap.makeCompressed();
  return lap;
}

std::vector<Index> sample_negatives(const BipartiteGraph& graph, Index user, std::size_t count, Rng& rng) {
  const auto& pos = graph.user_positives[user];
  const std::size_t n_items = graph.num_items();
  const std::size_t available = n_items - pos.size();
  count = std::min(count, available);
  std::vector<Index> out;
  if (count == 0) return out;
  out.reserve(count);
  if (2 * count <= available) {
    std::vector<Index> taken;
    while (out.size() < count) {
      const auto item = static_cast<Index>(uniform_below(rng, n_items));
      if (std::binary_search(pos.begin(), pos.end(), item)) continue;
      auto it = std::lower_bound(taken.begin(), taken.end(), item);
      if (it != taken.end() && *it == item) continue;
      taken.insert(it, item);
      out.push_back(item);
    }
    return out;
  }
  std::vector<Index> complement;
  complement.reserve(available);
  auto p = pos.begin();
  for (Index i = 0; i < n_items; ++i) {
    if (p != pos.end() && *p == i) {
      ++p;
      continue;
    }
    complement.push_back(i);
  }
  for (std::size_t k = 0; k < count; ++k) {
    std::swap(complement[k], complement[k + uniform_below(rng, complement.size() - k)]);
    out.push_back(complement[k]);
  }
  return out;
}

std::vector<BprTriple> sample_bpr_epoch(const BipartiteGraph& graph, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xb9aULL));
  const Index n_items = graph.num_items();
  std::vector<BprTriple> out;
  out.reserve(graph.num_interactions());
  for (Index u = 0; u < graph.num_users(); ++u) {
    const auto& pos = graph.user_positives[u];
    if (pos.empty()) continue;
    if (pos.size() >= n_items) {
      std::cerr << "warning: user '" << graph.user_keys[u] << "' has no unobserved items; skipped\n";
      continue;
    }
    for (Index j : pos) {
      Index neg = 0;
      if (2 * pos.size() <= n_items) {
        do {
          neg = static_cast<Index>(uniform_below(rng, n_items));
        } while (std::binary_search(pos.begin(), pos.end(), neg));
      } else {
        // Dense rows: pick the r-th unobserved item directly.
        std::uint64_t r = uniform_below(rng, n_items - pos.size());
        auto p = pos.begin();
        for (Index i = 0;; ++i) {
          if (p != pos.end() && *p == i) {
            ++p;
            continue;
          }
          if (r-- == 0) {
            neg = i;
            break;
          }
        }
      }
      out.push_back({u, j, neg});
    }
  }
  return out;
}

void write_split(const std::filesystem::path& dir, const SplitDataset& split, const PrepareOptions& options,
                 const PrepareSummary& summary) {
  std::filesystem::create_directories(dir);
  write_keys(dir / "users.tsv", split.train.user_keys);
  write_keys(dir / "items.tsv", split.train.item_keys);
  write_pairs(dir / "train.tsv", split.train.user_positives);
  write_pairs(dir / "test.tsv", split.test_positives);

  KvFile meta;
  meta.set("M", std::uint64_t{split.train.num_users()});
  meta.set("N", std::uint64_t{split.train.num_items()});
  meta.set("seed", split.split_seed);
  meta.set("ratio", split.ratio);
  meta.set("format", std::string(to_string(options.format)));
  meta.set("min_user", std::uint64_t{options.min_user});
  meta.set("min_item", std::uint64_t{options.min_item});
  meta.set("user_fraction", options.user_fraction);
  meta.set("raw_interactions", std::uint64_t{summary.raw_interactions});
  meta.set("filtered_interactions", std::uint64_t{summary.filtered_interactions});
  meta.set("train_interactions", std::uint64_t{summary.train_interactions});
  meta.set("test_interactions", std::uint64_t{summary.test_interactions});
  meta.write(dir / "meta.kv");
}

SplitDataset read_split(const std::filesystem::path& dir) {
  const KvFile meta = KvFile::read(dir / "meta.kv");
  SplitDataset split;
  split.split_seed = meta.require_uint("seed");
  split.ratio = meta.require_double("ratio");
  split.train.user_keys = read_keys(dir / "users.tsv");
  split.train.item_keys = read_keys(dir / "items.tsv");
  const Index m = split.train.num_users();
  const Index n = split.train.num_items();
  if (meta.require_uint("M") != m || meta.require_uint("N") != n) {
    throw DataError(dir.string() + ": meta.kv counts disagree with users.tsv/items.tsv");
  }
  split.train.user_positives = read_pairs(dir / "train.tsv", m, n);
  split.test_positives = read_pairs(dir / "test.tsv", m, n);
  return split;
}

}  // namespace bincf
