#pragma once

// Binary-code student: tanh-relaxed user/item codes trained on BPR plus a
// listwise distillation term against frozen teacher factors, with penalties
// that pull the relaxed codes onto the corners of the hypercube.

#include "bincf/autodiff.hpp"
#include "bincf/common.hpp"
#include "bincf/data.hpp"
#include "bincf/optim.hpp"
#include "bincf/teacher.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace bincf {

struct StudentConfig {
  double alpha = 10.0;
  double temperature = 1.0;
  double tau = 0.2;
  double beta = 1e-3;
  double nu = 1e-3;
  std::size_t epochs = 200;
  std::uint64_t seed = 1;
  /// Expected code length; 0 accepts whatever the teacher provides.
  Index code_length = 0;
  double tolerance = 1e-4;
  std::size_t window = 10;
  AdamConfig<double> adam;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

/// Unconstrained pre-activations; the relaxed codes are tanh(users), tanh(items).
struct StudentParams {
  DenseMatrix users;
  DenseMatrix items;
};

/// E|eps|^2 of the Bernoulli rounding noise, summed over entries:
/// sigma(x/tau) (1 - x)^2 + (1 - sigma(x/tau)) (1 + x)^2.
template <typename Scalar>
Scalar noise_penalty_entry(Scalar x, Scalar tau) {
  const Scalar s = ad::detail::stable_sigmoid(x / tau);
  return s * (Scalar(1) - x) * (Scalar(1) - x) + (Scalar(1) - s) * (Scalar(1) + x) * (Scalar(1) + x);
}

template <typename Derived>
typename Derived::Scalar noise_penalty(const Eigen::MatrixBase<Derived>& x, typename Derived::Scalar tau) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > 0)) throw ConfigError("noise penalty temperature tau must be positive");
  return x.derived().unaryExpr([tau](Scalar v) { return noise_penalty_entry(v, tau); }).sum();
}

/// Row-wise | |x| - 1 |_2^2 summed over rows; zero exactly on {-1, +1}^d.
template <typename Derived>
typename Derived::Scalar corner_penalty(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return (x.derived().array().abs() - Scalar(1)).square().sum();
}

namespace ad {

template <typename Scalar>
BasicVar<Scalar> noise_penalty(const BasicVar<Scalar>& x, Scalar tau) {
  auto* t = x.tape();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = bincf::noise_penalty(x.value(), tau);
  return t->record(std::move(out), {x}, [t, x, tau](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    Matrix<Scalar> d = x.value().unaryExpr([tau](Scalar v) {
      const Scalar s = detail::stable_sigmoid(v / tau);
      const Scalar ds = s * (Scalar(1) - s) / tau;
      return ds * Scalar(-4) * v - Scalar(2) * s * (Scalar(1) - v) + Scalar(2) * (Scalar(1) - s) * (Scalar(1) + v);
    });
    t->accumulate(x, g(0, 0) * d);
  });
}

template <typename Scalar>
BasicVar<Scalar> corner_penalty(const BasicVar<Scalar>& x) {
  auto* t = x.tape();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = bincf::corner_penalty(x.value());
  return t->record(std::move(out), {x}, [t, x](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    Matrix<Scalar> d = x.value().unaryExpr([](Scalar v) {
      const Scalar sign = v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0));
      return Scalar(2) * (std::abs(v) - Scalar(1)) * sign;
    });
    t->accumulate(x, g(0, 0) * d);
  });
}

}  // namespace ad

/// Per-user item lists stored as contiguous segments:
/// segment s belongs to users[s] and spans items[offsets[s] .. offsets[s+1]).
struct UserItemLists {
  std::vector<Index> users;
  std::vector<Index> items;
  std::vector<std::size_t> offsets{0};

  void append(Index user, std::span<const Index> list);
  [[nodiscard]] std::size_t segments() const { return users.size(); }
  /// Owning user of every item entry.
  [[nodiscard]] std::vector<Index> expanded_users() const;
};

struct DistillBatch {
  UserItemLists positives;
  UserItemLists negatives;
  std::vector<BprTriple> triples;
};

/// All train positives per user, an equally sized uniform sample (without
/// replacement) of unobserved items, and one BPR triple per positive.
DistillBatch make_distill_batch(const BipartiteGraph& train, std::uint64_t seed);

/// Cross-entropy between per-user softmax distributions of teacher scores
/// and student scores, taken separately over positive and negative lists.
ad::Var rank_distill_loss(const DenseMatrix& teacher_users, const DenseMatrix& teacher_items, const ad::Var& student_users,
                          const ad::Var& student_items, const DistillBatch& batch, double temperature);

/// BPR on tanh codes + alpha T^2 distillation + nu noise expectation +
/// beta corner penalty; `users`/`items` are the raw pre-activations.
ad::Var student_loss(const ad::Var& users, const ad::Var& items, const TeacherEmbeddings& teacher,
                     const DistillBatch& batch, const StudentConfig& config);

/// atanh of the teacher factors scaled into [-0.99, 0.99] by their largest magnitude.
StudentParams init_student(const TeacherEmbeddings& teacher);

struct StudentCheckpoint {
  StudentParams params;
  StudentConfig config;
};

struct StudentRun {
  StudentCheckpoint checkpoint;
  TrainingTrace trace;
};

/// The teacher stays frozen; each epoch draws a fresh DistillBatch and takes
/// one Adam step on student_loss.
StudentRun train_student(const TeacherEmbeddings& teacher, const BipartiteGraph& train, const StudentConfig& config,
                         const EpochCallback& on_epoch = {});

}  // namespace bincf
