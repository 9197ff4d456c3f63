// bincf: prepare -> train-teacher -> distill -> export-codes -> recommend / evaluate / bench.
//
// Every subcommand takes --config FILE (flat key=value, keys are long flag
// names without dashes; flags on the command line win) and --out DIR, and
// writes DIR/run.kv echoing the resolved options and the build tag.

#include "bincf/binindex.hpp"
#include "bincf/checkpoint.hpp"
#include "bincf/data.hpp"
#include "bincf/eval.hpp"
#include "bincf/kvfile.hpp"
#include "bincf/student.hpp"
#include "bincf/teacher.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#ifndef BINCF_BUILD_TAG
#define BINCF_BUILD_TAG "unknown"
#endif

namespace fs = std::filesystem;
using namespace bincf;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct AdamFlags {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--adam-beta1", beta1, "Adam first-moment decay");
    app->add_option("--adam-beta2", beta2, "Adam second-moment decay");
    app->add_option("--adam-eps", eps, "Adam epsilon");
  }
  [[nodiscard]] AdamConfig<double> config() const { return {lr, beta1, beta2, eps}; }
};

// Where scores come from: packed codes or real-valued factors.
struct ModelFlags {
  fs::path codes, student, teacher;

  void add(CLI::App* app) {
    auto* group = app->add_option_group("model", "exactly one scoring source");
    group->add_option("--codes", codes, "directory holding users.codes and items.codes");
    group->add_option("--student", student, "student checkpoint; scored through its binarized codes");
    group->add_option("--teacher", teacher, "teacher checkpoint; scored with real-valued factors");
    group->require_option(1);
  }
};

struct LoadedModel {
  PackedCodes user_codes, item_codes;
  DenseMatrix users, items;
  bool binary = true;

  [[nodiscard]] Scorer scorer() const {
    if (binary) return BinaryScorer{&user_codes, &item_codes};
    return RealScorer{&users, &items};
  }
};

LoadedModel load_model(const ModelFlags& m) {
  LoadedModel out;
  if (!m.codes.empty()) {
    out.user_codes = load_codes(m.codes / "users.codes");
    out.item_codes = load_codes(m.codes / "items.codes");
    if (out.user_codes.dim != out.item_codes.dim) throw DataError("user and item code lengths differ");
  } else if (!m.student.empty()) {
    const auto s = load_student(m.student);
    out.user_codes = binarize(s.params.users);
    out.item_codes = binarize(s.params.items);
  } else {
    auto t = load_teacher(m.teacher);
    out.users = std::move(t.embeddings.users);
    out.items = std::move(t.embeddings.items);
    out.binary = false;
  }
  return out;
}

void write_loss(const fs::path& dir, const TrainingTrace& trace) {
  std::ofstream os(dir / "loss.tsv", std::ios::binary);
  if (!os) throw DataError("cannot write " + (dir / "loss.tsv").string());
  os << "epoch\tloss\n";
  for (std::size_t e = 0; e < trace.loss.size(); ++e) os << e + 1 << '\t' << format_double(trace.loss[e]) << '\n';
}

std::string joined(const std::vector<std::string>& parts) {
  std::string s;
  for (const auto& p : parts) s += (s.empty() ? "" : ",") + p;
  return s;
}

void write_run_kv(const CLI::App& sub, const fs::path& dir) {
  KvFile kv;
  kv.set("command", sub.get_name());
  kv.set("build", std::string(BINCF_BUILD_TAG));
  std::function<void(const CLI::App&)> visit = [&](const CLI::App& app) {
    for (const CLI::Option* opt : app.get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string& name = opt->get_lnames().front();
      if (name == "help") continue;
      const std::string value = opt->count() > 0 ? joined(opt->results()) : opt->get_default_str();
      kv.set(name, value);
    }
    for (const CLI::App* group : app.get_subcommands([](const CLI::App* a) { return a->get_name().empty(); })) {
      visit(*group);
    }
  };
  visit(sub);
  kv.write(dir / "run.kv");
}

std::vector<std::size_t> parse_k_list(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t pos = 0;
    unsigned long long k = 0;
    try {
      k = std::stoull(part, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != part.size() || k == 0) throw ConfigError("--k: '" + part + "' is not a positive integer");
    ks.push_back(static_cast<std::size_t>(k));
  }
  if (ks.empty()) throw ConfigError("--k: no cutoffs given");
  return ks;
}

// ---- commands -------------------------------------------------------------

struct PrepareFlags {
  fs::path input;
  std::string format = "movielens";
  PrepareOptions options;
};

void run_prepare(const PrepareFlags& f, const fs::path& out) {
  PrepareOptions opts = f.options;
  opts.format = parse_rating_format(f.format);
  if (!(opts.user_fraction > 0 && opts.user_fraction <= 1)) throw ConfigError("--user-fraction must lie in (0, 1]");
  std::ifstream is(f.input, std::ios::binary);
  if (!is) throw DataError("cannot open ratings file " + f.input.string());
  std::vector<Interaction> raw;
  try {
    raw = parse_ratings(is, opts.format);
  } catch (const ParseError& e) {
    throw DataError(f.input.string() + ": " + e.what());
  }
  const auto sampled = opts.user_fraction < 1 ? subsample_users(raw, opts.user_fraction, opts.seed) : raw;
  const auto filtered = filter_min_degree(sampled, opts.min_user, opts.min_item);
  if (filtered.empty()) throw DataError("no interactions survive the degree filter");
  const auto split = split_per_user(filtered, opts.ratio, opts.seed);
  PrepareSummary summary{raw.size(), filtered.size(), split.train.num_interactions(), 0};
  for (const auto& t : split.test_positives) summary.test_interactions += t.size();
  write_split(out, split, opts, summary);
  std::cerr << "prepare: " << split.train.num_users() << " users, " << split.train.num_items() << " items, "
            << summary.train_interactions << " train / " << summary.test_interactions << " test\n";
}

struct TeacherFlags {
  fs::path data;
  TeacherConfig config;
  std::string activation = "sigmoid";
  AdamFlags adam;
};

void run_train_teacher(TeacherFlags f, const fs::path& out) {
  f.config.activation = parse_activation(f.activation);
  f.config.adam = f.adam.config();
  const auto split = read_split(f.data);
  const auto run = train_teacher(split.train, f.config, [](std::size_t epoch, double loss) {
    if (epoch % 10 == 0) std::cerr << "teacher epoch " << epoch << " loss " << loss << '\n';
  });
  fs::create_directories(out);
  save_teacher(out / "teacher.ckpt", run.checkpoint);
  write_loss(out, run.trace);
}

struct DistillFlags {
  fs::path data, teacher;
  StudentConfig config;
  AdamFlags adam;
};

void run_distill(DistillFlags f, const fs::path& out) {
  f.config.adam = f.adam.config();
  const auto split = read_split(f.data);
  const auto teacher = load_teacher(f.teacher);
  if (teacher.params.num_users() != split.train.num_users() || teacher.params.num_items() != split.train.num_items()) {
    throw DataError("teacher checkpoint was trained on a different split");
  }
  const auto run = train_student(teacher.embeddings, split.train, f.config, [](std::size_t epoch, double loss) {
    if (epoch % 10 == 0) std::cerr << "student epoch " << epoch << " loss " << loss << '\n';
  });
  fs::create_directories(out);
  save_student(out / "student.ckpt", run.checkpoint);
  write_loss(out, run.trace);
}

void run_export_codes(const fs::path& student, const fs::path& out) {
  const auto s = load_student(student);
  fs::create_directories(out);
  save_codes(out / "users.codes", binarize(s.params.users));
  save_codes(out / "items.codes", binarize(s.params.items));
}

struct RecommendFlags {
  fs::path data;
  ModelFlags model;
  std::string user;
  std::size_t k = 10;
};

void run_recommend(const RecommendFlags& f, const fs::path& out) {
  if (f.k == 0) throw ConfigError("--k must be positive");
  const auto split = read_split(f.data);
  const auto model = load_model(f.model);
  const KeyIndex users(split.train.user_keys);
  const Index* u = users.find(f.user);
  if (!u) throw DataError("unknown user key '" + f.user + "'");
  std::ostringstream lines;
  if (model.binary) {
    if (model.user_codes.rows != split.train.num_users() || model.item_codes.rows != split.train.num_items()) {
      throw ShapeError("codes do not match the split's users and items");
    }
    for (const auto& r : topk(model.user_codes.row(*u), model.item_codes, f.k, split.train.user_positives[*u])) {
      lines << split.train.item_keys[r.item] << '\t' << r.score << '\n';
    }
  } else {
    if (model.users.rows() != split.train.num_users() || model.items.rows() != split.train.num_items()) {
      throw ShapeError("teacher factors do not match the split's users and items");
    }
    const Eigen::VectorXd scores = model.items * model.users.row(*u).transpose();
    const auto best = select_topk(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), f.k,
                                  split.train.user_positives[*u]);
    for (const auto& r : best) lines << split.train.item_keys[r.item] << '\t' << format_double(r.score) << '\n';
  }
  std::cout << lines.str();
  fs::create_directories(out);
  std::ofstream os(out / "recommend.tsv", std::ios::binary);
  os << lines.str();
}

struct EvaluateFlags {
  fs::path data;
  ModelFlags model;
  std::string k = "10,50,100";
  std::string dataset = "unnamed";
  std::string model_name;
  std::uint64_t seed = 1;
};

void run_evaluate(const EvaluateFlags& f, const fs::path& out) {
  const auto ks = parse_k_list(f.k);
  const auto split = read_split(f.data);
  const auto model = load_model(f.model);
  const auto reports = evaluate(model.scorer(), split, ks);
  std::string name = f.model_name;
  if (name.empty()) name = model.binary ? "binary" : "teacher";
  write_eval(out, reports, {f.dataset, name, f.seed});
  for (const auto& r : reports) {
    std::cout << "Recall@" << r.k << ' ' << format_double(r.recall) << "  MAP@" << r.k << ' ' << format_double(r.map)
              << "  NDCG@" << r.k << ' ' << format_double(r.ndcg) << '\n';
  }
}

struct BenchFlags {
  fs::path codes;
  Index dim = 192;
  Index items = 100000;
  Index users = 100;
  std::uint64_t seed = 1;
  std::size_t k = 100;
  std::size_t repetitions = 1;
};

PackedCodes random_codes(Rng& rng, Index rows, Index dim) {
  Matrix<double> signs(rows, dim);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < dim; ++c) signs(r, c) = uniform_below(rng, 2) ? 1.0 : -1.0;
  }
  return pack_codes(signs);
}

void run_bench(const BenchFlags& f, const fs::path& out) {
  if (f.k == 0) throw ConfigError("--k must be positive");
  if (f.repetitions == 0) throw ConfigError("--repetitions must be positive");
  PackedCodes users, items;
  if (!f.codes.empty()) {
    users = load_codes(f.codes / "users.codes");
    items = load_codes(f.codes / "items.codes");
  } else {
    if (f.dim == 0 || f.items == 0 || f.users == 0) throw ConfigError("--dim, --items and --users must be positive");
    Rng rng(f.seed);
    items = random_codes(rng, f.items, f.dim);
    users = random_codes(rng, f.users, f.dim);
  }
  const auto r = bench(users, items, f.k, f.repetitions);
  KvFile kv;
  kv.set("d", std::uint64_t{r.dim});
  kv.set("N", std::uint64_t{r.items});
  kv.set("K", std::uint64_t{r.k});
  kv.set("users", std::uint64_t{r.users});
  kv.set("repetitions", std::uint64_t{r.repetitions});
  kv.set("qps_binary", r.qps_binary);
  kv.set("qps_dense", r.qps_dense);
  kv.set("speedup", r.speedup);
  kv.set("identical", std::uint64_t{r.identical ? 1u : 0u});
  fs::create_directories(out);
  kv.write(out / "bench.kv");
  std::cout << kv.str();
  if (!r.identical) throw NumericError("binary and dense top-K lists differ");
}

// ---- wiring -----------------------------------------------------------------

CLI::App* subcommand(CLI::App& app, const std::string& name, const std::string& help, fs::path& out,
                     fs::path& config) {
  auto* sub = app.add_subcommand(name, help);
  sub->add_option("--config", config, "flat key=value file; command-line flags override it");
  sub->add_option("--out", out, "output directory")->required();
  return sub;
}

bool flag_given(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.starts_with(flag + "="); });
}

// Splices the --config file into the argument list ahead of parsing: every
// key must name a flag of the chosen subcommand, and flags already present
// on the command line keep their value.
std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args) {
  if (args.size() < 2) return args;
  const CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(args[1]);
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  std::optional<std::string> path;
  for (std::size_t a = 2; a < args.size(); ++a) {
    if (args[a] == "--config" && a + 1 < args.size()) path = args[a + 1];
    if (args[a].starts_with("--config=")) path = args[a].substr(9);
  }
  if (!path) return args;
  KvFile kv;
  try {
    kv = KvFile::read(*path);
  } catch (const DataError& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
  std::vector<std::string> extra;
  for (const auto& [key, value] : kv.entries()) {
    const std::string flag = "--" + key;
    if (key == "config" || sub->get_option_no_throw(flag) == nullptr) {
      throw ConfigError(*path + ": unknown key '" + key + "' for " + sub->get_name());
    }
    if (!flag_given(args, flag)) extra.push_back(flag + "=" + value);
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binary-code collaborative filtering distilled from a graph-convolutional teacher"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", std::string(BINCF_BUILD_TAG));

  fs::path out, config;

  PrepareFlags prep;
  auto* prepare = subcommand(app, "prepare", "parse, filter and split a ratings file", out, config);
  prepare->add_option("--input", prep.input, "ratings file")->required();
  prepare->add_option("--format", prep.format, "movielens (user::item::rating::ts) or tsv");
  prepare->add_option("--min-user", prep.options.min_user, "drop users with fewer ratings");
  prepare->add_option("--min-item", prep.options.min_item, "then drop items with fewer ratings");
  prepare->add_option("--split", prep.options.ratio, "fraction of each user's items kept for training");
  prepare->add_option("--user-fraction", prep.options.user_fraction, "keep each user with this probability first");
  prepare->add_option("--seed", prep.options.seed, "split and subsample seed");

  TeacherFlags tf;
  auto* teacher = subcommand(app, "train-teacher", "train the graph-convolutional teacher", out, config);
  teacher->add_option("--data", tf.data, "prepared split directory")->required();
  teacher->add_option("--dim", tf.config.dim, "embedding dimension D; factors have 3D columns");
  teacher->add_option("--lambda", tf.config.lambda, "L2 coefficient on the final factors");
  teacher->add_option("--epochs", tf.config.epochs, "maximum epochs");
  teacher->add_option("--tolerance", tf.config.tolerance, "relative loss change that stops training (0 disables)");
  teacher->add_option("--window", tf.config.window, "epochs spanned by the stopping rule");
  teacher->add_option("--activation", tf.activation, "sigmoid, tanh or identity");
  teacher->add_option("--cross", tf.config.cross, "train the cross layers (false pins W1 = W2 = 0)");
  teacher->add_option("--seed", tf.config.seed, "initialization and sampling seed");
  tf.adam.add(teacher);

  DistillFlags df;
  auto* distill = subcommand(app, "distill", "distill binary codes from a trained teacher", out, config);
  distill->add_option("--data", df.data, "prepared split directory")->required();
  distill->add_option("--teacher", df.teacher, "teacher checkpoint")->required();
  distill->add_option("--alpha", df.config.alpha, "distillation weight (0 gives plain binary BPR)");
  distill->add_option("--temperature", df.config.temperature, "softmax temperature T");
  distill->add_option("--tau", df.config.tau, "rounding-noise temperature");
  distill->add_option("--beta", df.config.beta, "corner penalty weight");
  distill->add_option("--nu", df.config.nu, "rounding-noise weight");
  distill->add_option("--epochs", df.config.epochs, "maximum epochs");
  distill->add_option("--tolerance", df.config.tolerance, "relative loss change that stops training (0 disables)");
  distill->add_option("--window", df.config.window, "epochs spanned by the stopping rule");
  distill->add_option("--code-length", df.config.code_length, "expected code length d (0 takes the teacher width)");
  distill->add_option("--seed", df.config.seed, "sampling seed");
  df.adam.add(distill);

  fs::path student_ckpt;
  auto* exporter = subcommand(app, "export-codes", "binarize a student into packed code files", out, config);
  exporter->add_option("--student", student_ckpt, "student checkpoint")->required();

  RecommendFlags rf;
  auto* recommend = subcommand(app, "recommend", "top-K unseen items for one user", out, config);
  recommend->add_option("--data", rf.data, "prepared split directory")->required();
  rf.model.add(recommend);
  recommend->add_option("--user", rf.user, "external user key")->required();
  recommend->add_option("--k", rf.k, "list length");

  EvaluateFlags ef;
  auto* evaluator = subcommand(app, "evaluate", "Recall, MAP and NDCG at K on the test split", out, config);
  evaluator->add_option("--data", ef.data, "prepared split directory")->required();
  ef.model.add(evaluator);
  evaluator->add_option("--k", ef.k, "comma-separated cutoffs");
  evaluator->add_option("--dataset", ef.dataset, "dataset label for eval.csv");
  evaluator->add_option("--model", ef.model_name, "model label for eval.csv (default binary or teacher)");
  evaluator->add_option("--seed", ef.seed, "seed label for eval.csv");

  BenchFlags bf;
  auto* bencher = subcommand(app, "bench", "packed-binary vs float32 dense top-K throughput", out, config);
  bencher->add_option("--codes", bf.codes, "code directory; synthetic random codes when absent");
  bencher->add_option("--dim", bf.dim, "synthetic code length");
  bencher->add_option("--items", bf.items, "synthetic item count");
  bencher->add_option("--users", bf.users, "synthetic query count");
  bencher->add_option("--seed", bf.seed, "synthetic code seed");
  bencher->add_option("--k", bf.k, "list length");
  bencher->add_option("--repetitions", bf.repetitions, "passes over all queries");

  try {
    std::vector<std::string> args = expand_config(app, std::vector<std::string>(argv, argv + argc));
    std::vector<char*> ptrs;
    for (auto& a : args) ptrs.push_back(a.data());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string cmd = sub->get_name();
    if (cmd == "prepare") {
      run_prepare(prep, out);
    } else if (cmd == "train-teacher") {
      run_train_teacher(tf, out);
    } else if (cmd == "distill") {
      run_distill(df, out);
    } else if (cmd == "export-codes") {
      run_export_codes(student_ckpt, out);
    } else if (cmd == "recommend") {
      run_recommend(rf, out);
    } else if (cmd == "evaluate") {
      run_evaluate(ef, out);
    } else {
      run_bench(bf, out);
    }
    write_run_kv(*sub, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
