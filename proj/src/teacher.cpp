#include "bincf/teacher.hpp"

#include <array>
#include <cmath>
#include <sstream>

namespace bincf {

namespace {

DenseMatrix glorot_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  DenseMatrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = limit * (2.0 * uniform_unit(rng) - 1.0);
  }
  return m;
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected sigmoid, tanh or identity)");
}

std::string_view to_string(Activation activation) {
  switch (activation) {
    case Activation::sigmoid:
      return "sigmoid";
    case Activation::tanh:
      return "tanh";
    case Activation::identity:
      return "identity";
  }
  return "unknown";
}

TeacherParams init_teacher(Index users, Index items, Index dim, Activation activation, std::uint64_t seed,
                           bool cross) {
  if (dim < 1) throw ConfigError("teacher dimension must be at least 1");
  const Eigen::Index vertices = static_cast<Eigen::Index>(users) + items;
  Rng rng(derive_seed(seed, 0x7eac4e5ULL));
  TeacherParams p;
  p.user_embedding = glorot_uniform(users, dim, rng);
  p.item_embedding = glorot_uniform(items, dim, rng);
  p.filter0 = glorot_uniform(dim, dim, rng);
  p.filter1 = glorot_uniform(dim, dim, rng);
  if (cross) {
    p.cross0 = glorot_uniform(vertices, dim, rng);
    p.cross1 = glorot_uniform(vertices, dim, rng);
  } else {
    p.cross0 = DenseMatrix::Zero(vertices, dim);
    p.cross1 = DenseMatrix::Zero(vertices, dim);
  }
  p.norm0 = ad::BatchNormState<double>::fresh(dim);
  p.norm1 = ad::BatchNormState<double>::fresh(dim);
  p.activation = activation;
  return p;
}

ad::Var activate(const ad::Var& x, Activation activation) {
  switch (activation) {
    case Activation::sigmoid:
      return ad::sigmoid(x);
    case Activation::tanh:
      return ad::tanh(x);
    case Activation::identity:
      return x;
  }
  throw ConfigError("invalid activation tag");
}

ad::Var spectral_conv(const ad::Var& x, const SparseMatrix& laplacian, const ad::Var& filter, Activation activation) {
  if (filter.rows() != x.cols() || filter.cols() != x.cols()) throw ShapeError(shape_message("spectral_conv", x, filter));
  const ad::Var propagated = x + ad::sparse_dense_matmul(laplacian, x);
  return activate(ad::matmul(propagated, filter), activation);
}

ad::Var cross_layer(const ad::Var& x, const ad::Var& weight) {
  if (x.rows() != weight.rows() || x.cols() != weight.cols()) throw ShapeError(shape_message("cross_layer", x, weight));
  return ad::scale_rows(x, ad::row_dot(x, weight)) + x;
}

TeacherVars attach(ad::Tape& tape, const TeacherParams& params, bool train_cross) {
  auto cross = [&](const DenseMatrix& w) { return train_cross ? tape.leaf(w) : tape.constant(w); };
  return TeacherVars{
      tape.leaf(params.user_embedding), tape.leaf(params.item_embedding),
      tape.leaf(params.filter0),        tape.leaf(params.filter1),
      cross(params.cross0),             cross(params.cross1),
      tape.leaf(params.norm0.gamma),    tape.leaf(params.norm0.beta),
      tape.leaf(params.norm1.gamma),    tape.leaf(params.norm1.beta),
  };
}

TeacherOutputs teacher_forward(const TeacherVars& vars, TeacherParams& params, const SparseMatrix& laplacian,
                               ad::BatchNormMode mode) {
  const Eigen::Index m = vars.user_embedding.rows();
  const Eigen::Index n = vars.item_embedding.rows();
  if (laplacian.rows() != m + n) {
    throw ShapeError("teacher_forward: laplacian has " + std::to_string(laplacian.rows()) + " vertices, expected " +
                     std::to_string(m + n));
  }
  const std::array stacked{vars.user_embedding, vars.item_embedding};
  const ad::Var layer0 = ad::concat_rows(std::span<const ad::Var>(stacked));

  const ad::Var normed0 = ad::batch_norm(layer0, vars.gamma0, vars.beta0, params.norm0, mode);
  const ad::Var layer1 = spectral_conv(normed0, laplacian, vars.filter0, params.activation);
  const ad::Var layer2 = cross_layer(layer1, vars.cross0);
  const ad::Var layer3 = cross_layer(layer2, vars.cross1);
  const ad::Var normed3 = ad::batch_norm(layer3, vars.gamma1, vars.beta1, params.norm1, mode);
  const ad::Var layer4 = spectral_conv(normed3, laplacian, vars.filter1, params.activation);

  const std::array user_parts{vars.user_embedding, ad::slice_rows(layer1, 0, m), ad::slice_rows(layer4, 0, m)};
  const std::array item_parts{vars.item_embedding, ad::slice_rows(layer1, m, n), ad::slice_rows(layer4, m, n)};
  return {ad::concat_cols(std::span<const ad::Var>(user_parts)), ad::concat_cols(std::span<const ad::Var>(item_parts))};
}

TeacherEmbeddings compute_embeddings(const TeacherParams& params, const SparseMatrix& laplacian) {
  TeacherParams copy = params;
  ad::Tape tape;
  const TeacherVars vars = attach(tape, copy, false);
  const TeacherOutputs out = teacher_forward(vars, copy, laplacian, ad::BatchNormMode::eval);
  return {out.users.value(), out.items.value()};
}

ad::Var bpr_loss(const ad::Var& users, const ad::Var& items, std::span<const BprTriple> triples, double lambda) {
  if (triples.empty()) throw std::invalid_argument("bpr_loss: empty triple batch");
  std::vector<Index> u(triples.size());
  std::vector<Index> pos(triples.size());
  std::vector<Index> neg(triples.size());
  for (std::size_t k = 0; k < triples.size(); ++k) {
    u[k] = triples[k].user;
    pos[k] = triples[k].positive;
    neg[k] = triples[k].negative;
  }
  const ad::Var margin = ad::pair_dot(users, items, u, pos) - ad::pair_dot(users, items, u, neg);
  const ad::Var ranking = ad::scale(ad::reduce_sum(ad::log_sigmoid(margin)), -1.0);
  if (lambda == 0.0) return ranking;
  const ad::Var norms = ad::reduce_sum(ad::square(users)) + ad::reduce_sum(ad::square(items));
  return ranking + ad::scale(norms, lambda);
}

bool loss_converged(std::span<const double> loss, std::size_t window, double tolerance) {
  if (window == 0 || loss.size() <= window) return false;
  const double before = loss[loss.size() - 1 - window];
  const double now = loss.back();
  const double denom = std::max(std::abs(before), 1e-300);
  return std::abs(now - before) / denom < tolerance;
}

TeacherRun train_teacher(const BipartiteGraph& train, const TeacherConfig& config, const EpochCallback& on_epoch) {
  if (config.lambda < 0) throw ConfigError("lambda must be non-negative");
  const SparseMatrix laplacian = build_laplacian(train);

  TeacherRun run;
  TeacherParams& params = run.checkpoint.params;
  params = init_teacher(train.num_users(), train.num_items(), config.dim, config.activation, config.seed, config.cross);

  AdamState<double> adam{config.adam, {}, {}, 0};
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto triples = sample_bpr_epoch(train, derive_seed(config.seed, 0x1000 + epoch));
    if (triples.empty()) throw DataError("train graph yields no BPR triples");

    ad::Tape tape;
    double value = 0;
    TeacherVars vars;
    try {
      vars = attach(tape, params, config.cross);
      const TeacherOutputs out = teacher_forward(vars, params, laplacian, ad::BatchNormMode::train);
      const ad::Var loss = bpr_loss(out.users, out.items, triples, config.lambda);
      value = loss.value()(0, 0);
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("teacher epoch " + std::to_string(epoch + 1) + ": " + e.what());
    }

    std::vector<DenseMatrix*> targets{&params.user_embedding, &params.item_embedding, &params.filter0,
                                      &params.filter1,        &params.norm0.gamma,    &params.norm0.beta,
                                      &params.norm1.gamma,    &params.norm1.beta};
    std::vector<DenseMatrix> grads{vars.user_embedding.grad(), vars.item_embedding.grad(), vars.filter0.grad(),
                                   vars.filter1.grad(),        vars.gamma0.grad(),         vars.beta0.grad(),
                                   vars.gamma1.grad(),         vars.beta1.grad()};
    if (config.cross) {
      targets.push_back(&params.cross0);
      targets.push_back(&params.cross1);
      grads.push_back(vars.cross0.grad());
      grads.push_back(vars.cross1.grad());
    }
    bool finite = true;
    for (const auto& g : grads) finite = finite && g.allFinite();
    if (!finite) {
      std::ostringstream msg;
      msg << "teacher epoch " << epoch + 1 << ": loss " << value << ", non-finite gradient; norms:";
      for (const auto& g : grads) msg << ' ' << g.norm();
      throw NumericError(msg.str());
    }
    adam_step<double>(targets, grads, adam);

    run.trace.loss.push_back(value);
    if (on_epoch) on_epoch(epoch + 1, value);
    if (loss_converged(run.trace.loss, config.window, config.tolerance)) {
      run.trace.converged = true;
      break;
    }
  }
  run.checkpoint.embeddings = compute_embeddings(params, laplacian);
  return run;
}

}  // namespace bincf
