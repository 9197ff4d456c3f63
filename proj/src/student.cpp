#include "bincf/student.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace bincf {

void StudentConfig::validate() const {
  if (!(temperature > 0)) throw ConfigError("temperature T must be positive");
  if (!(tau > 0)) throw ConfigError("noise temperature tau must be positive");
  if (alpha < 0 || beta < 0 || nu < 0) throw ConfigError("alpha, beta and nu must be non-negative");
}

void UserItemLists::append(Index user, std::span<const Index> list) {
  if (list.empty()) return;
  users.push_back(user);
  items.insert(items.end(), list.begin(), list.end());
  offsets.push_back(items.size());
}

std::vector<Index> UserItemLists::expanded_users() const {
  std::vector<Index> out(items.size());
  for (std::size_t s = 0; s < users.size(); ++s) {
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(offsets[s]),
              out.begin() + static_cast<std::ptrdiff_t>(offsets[s + 1]), users[s]);
  }
  return out;
}

DistillBatch make_distill_batch(const BipartiteGraph& train, std::uint64_t seed) {
  DistillBatch batch;
  batch.triples = sample_bpr_epoch(train, seed);
  Rng rng(derive_seed(seed, 0xd157ULL));
  for (Index u = 0; u < train.num_users(); ++u) {
    const auto& pos = train.user_positives[u];
    if (pos.empty()) continue;
    const std::vector<Index> neg = sample_negatives(train, u, pos.size(), rng);
    batch.positives.append(u, pos);
    batch.negatives.append(u, neg);
  }
  return batch;
}

namespace {

// Softmax of teacher scores / T within each segment, flattened.
DenseMatrix teacher_distribution(const DenseMatrix& users, const DenseMatrix& items, const UserItemLists& lists,
                                 double temperature) {
  DenseMatrix probs(static_cast<Eigen::Index>(lists.items.size()), 1);
  for (std::size_t s = 0; s < lists.segments(); ++s) {
    const std::size_t begin = lists.offsets[s];
    const std::size_t end = lists.offsets[s + 1];
    const auto u = users.row(lists.users[s]);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = begin; k < end; ++k) {
      const double z = u.dot(items.row(lists.items[k])) / temperature;
      probs(static_cast<Eigen::Index>(k), 0) = z;
      top = std::max(top, z);
    }
    double total = 0;
    for (std::size_t k = begin; k < end; ++k) {
      double& p = probs(static_cast<Eigen::Index>(k), 0);
      p = std::exp(p - top);
      total += p;
    }
    for (std::size_t k = begin; k < end; ++k) probs(static_cast<Eigen::Index>(k), 0) /= total;
  }
  return probs;
}

ad::Var list_cross_entropy(const DenseMatrix& teacher_users, const DenseMatrix& teacher_items,
                           const ad::Var& student_users, const ad::Var& student_items, const UserItemLists& lists,
                           double temperature) {
  auto* tape = student_users.tape();
  const DenseMatrix target = teacher_distribution(teacher_users, teacher_items, lists, temperature);
  const std::vector<Index> owners = lists.expanded_users();
  const ad::Var scores = ad::pair_dot(student_users, student_items, owners, lists.items);
  const ad::Var log_probs = ad::segment_log_softmax(scores, std::span<const std::size_t>(lists.offsets), temperature);
  return ad::scale(ad::reduce_sum(ad::hadamard(tape->constant(target), log_probs)), -1.0);
}

}  // namespace

ad::Var rank_distill_loss(const DenseMatrix& teacher_users, const DenseMatrix& teacher_items, const ad::Var& student_users,
                          const ad::Var& student_items, const DistillBatch& batch, double temperature) {
  if (!(temperature > 0)) throw ConfigError("temperature T must be positive");
  if (teacher_users.rows() != student_users.rows() || teacher_items.rows() != student_items.rows()) {
    throw ShapeError("rank_distill_loss: teacher and student disagree on user/item counts");
  }
  const ad::Var pos = list_cross_entropy(teacher_users, teacher_items, student_users, student_items, batch.positives,
                                         temperature);
  const ad::Var neg = list_cross_entropy(teacher_users, teacher_items, student_users, student_items, batch.negatives,
                                         temperature);
  return pos + neg;
}

ad::Var student_loss(const ad::Var& users, const ad::Var& items, const TeacherEmbeddings& teacher,
                     const DistillBatch& batch, const StudentConfig& config) {
  config.validate();
  const ad::Var codes_u = ad::tanh(users);
  const ad::Var codes_i = ad::tanh(items);
  ad::Var loss = bpr_loss(codes_u, codes_i, batch.triples, 0.0);
  if (config.alpha != 0.0) {
    const double weight = config.alpha * config.temperature * config.temperature;
    loss = loss + ad::scale(rank_distill_loss(teacher.users, teacher.items, codes_u, codes_i, batch, config.temperature),
                            weight);
  }
  if (config.nu != 0.0) {
    loss = loss + ad::scale(ad::noise_penalty(codes_u, config.tau) + ad::noise_penalty(codes_i, config.tau), config.nu);
  }
  if (config.beta != 0.0) {
    loss = loss + ad::scale(ad::corner_penalty(codes_u) + ad::corner_penalty(codes_i), config.beta);
  }
  return loss;
}

StudentParams init_student(const TeacherEmbeddings& teacher) {
  auto rescale = [](const DenseMatrix& m) {
    const double top = m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
    if (top == 0.0) return DenseMatrix(DenseMatrix::Zero(m.rows(), m.cols()));
    return DenseMatrix((m / top).cwiseMax(-0.99).cwiseMin(0.99).array().atanh());
  };
  return {rescale(teacher.users), rescale(teacher.items)};
}

StudentRun train_student(const TeacherEmbeddings& teacher, const BipartiteGraph& train, const StudentConfig& config,
                         const EpochCallback& on_epoch) {
  config.validate();
  if (teacher.users.cols() != teacher.items.cols()) throw ShapeError("teacher user/item factor widths differ");
  if (config.code_length != 0 && config.code_length != teacher.users.cols()) {
    throw ConfigError("student code length " + std::to_string(config.code_length) + " does not match teacher width " +
                      std::to_string(teacher.users.cols()));
  }
  if (teacher.users.rows() != train.num_users() || teacher.items.rows() != train.num_items()) {
    throw DataError("teacher factors do not match the training graph dimensions");
  }

  StudentRun run;
  run.checkpoint.config = config;
  StudentParams& params = run.checkpoint.params;
  params = init_student(teacher);

  AdamState<double> adam{config.adam, {}, {}, 0};
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const DistillBatch batch = make_distill_batch(train, derive_seed(config.seed, 0x2000 + epoch));
    if (batch.triples.empty()) throw DataError("train graph yields no BPR triples");

    ad::Tape tape;
    const ad::Var users = tape.leaf(params.users);
    const ad::Var items = tape.leaf(params.items);
    double value = 0;
    try {
      const ad::Var loss = student_loss(users, items, teacher, batch, config);
      value = loss.value()(0, 0);
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("student epoch " + std::to_string(epoch + 1) + ": " + e.what());
    }
    const std::vector<DenseMatrix> grads{users.grad(), items.grad()};
    if (!grads[0].allFinite() || !grads[1].allFinite()) {
      std::ostringstream msg;
      msg << "student epoch " << epoch + 1 << ": loss " << value << ", non-finite gradient; norms: "
          << grads[0].norm() << ' ' << grads[1].norm();
      throw NumericError(msg.str());
    }
    const std::vector<DenseMatrix*> targets{&params.users, &params.items};
    adam_step<double>(targets, grads, adam);

    run.trace.loss.push_back(value);
    if (on_epoch) on_epoch(epoch + 1, value);
    if (loss_converged(run.trace.loss, config.window, config.tolerance)) {
      run.trace.converged = true;
      break;
    }
  }
  return run;
}

}  // namespace bincf
