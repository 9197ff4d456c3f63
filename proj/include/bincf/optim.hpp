#pragma once

#include "bincf/autodiff.hpp"
#include "bincf/common.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace bincf {

template <typename Scalar>
struct AdamConfig {
  Scalar lr = Scalar(1e-3);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);
};

template <typename Scalar>
struct AdamState {
  AdamConfig<Scalar> config;
  std::vector<Matrix<Scalar>> first_moment;
  std::vector<Matrix<Scalar>> second_moment;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every parameter in place. Moment buffers
/// are allocated on first use.
template <typename Scalar>
void adam_step(std::span<Matrix<Scalar>* const> params, std::span<const Matrix<Scalar>> grads,
               AdamState<Scalar>& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (state.first_moment.empty()) {
    for (const Matrix<Scalar>* p : params) {
      state.first_moment.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
      state.second_moment.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: state tracks a different parameter set");

  ++state.step;
  const auto& c = state.config;
  const Scalar bias1 = Scalar(1) - std::pow(c.beta1, static_cast<Scalar>(state.step));
  const Scalar bias2 = Scalar(1) - std::pow(c.beta2, static_cast<Scalar>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix<Scalar>& p = *params[k];
    const Matrix<Scalar>& g = grads[k];
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw ShapeError(shape_message("adam_step", p, g));
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    m = c.beta1 * m + (Scalar(1) - c.beta1) * g;
    v = c.beta2 * v + (Scalar(1) - c.beta2) * g.cwiseAbs2();
    p.array() -= c.lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + c.epsilon);
  }
}

template <typename Scalar>
struct GradCheckResult {
  Scalar max_relative_error = 0;
  std::size_t worst_param = 0;
  Eigen::Index worst_row = 0;
  Eigen::Index worst_col = 0;
};

/// Compares reverse-mode gradients with central differences on every
/// coordinate of every parameter. `loss` maps (tape, leaves) to a 1x1 node
/// and is rebuilt on a fresh tape for each evaluation.
/// Relative error is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
template <typename Scalar, typename LossFn>
GradCheckResult<Scalar> grad_check(LossFn&& loss, const std::vector<Matrix<Scalar>>& params,
                                   Scalar fd_epsilon = Scalar(1e-5)) {
  auto evaluate = [&](const std::vector<Matrix<Scalar>>& at, std::vector<Matrix<Scalar>>* grads) {
    ad::BasicTape<Scalar> tape;
    std::vector<ad::BasicVar<Scalar>> leaves;
    leaves.reserve(at.size());
    for (const auto& p : at) leaves.push_back(tape.leaf(p));
    const ad::BasicVar<Scalar> out = loss(tape, std::span<const ad::BasicVar<Scalar>>(leaves));
    const Scalar value = out.value()(0, 0);
    if (!std::isfinite(value)) throw NumericError("grad_check: non-finite loss");
    if (grads) {
      tape.backward(out);
      grads->clear();
      for (const auto& leaf : leaves) grads->push_back(leaf.grad());
    }
    return value;
  };

  std::vector<Matrix<Scalar>> analytic;
  evaluate(params, &analytic);

  GradCheckResult<Scalar> result;
  std::vector<Matrix<Scalar>> probe = params;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (Eigen::Index r = 0; r < probe[k].rows(); ++r) {
      for (Eigen::Index c = 0; c < probe[k].cols(); ++c) {
        const Scalar saved = probe[k](r, c);
        probe[k](r, c) = saved + fd_epsilon;
        const Scalar up = evaluate(probe, nullptr);
        probe[k](r, c) = saved - fd_epsilon;
        const Scalar down = evaluate(probe, nullptr);
        probe[k](r, c) = saved;

        const Scalar fd = (up - down) / (Scalar(2) * fd_epsilon);
        const Scalar an = analytic[k](r, c);
        const Scalar denom = std::max({Scalar(1), std::abs(an), std::abs(fd)});
        const Scalar rel = std::abs(an - fd) / denom;
        if (rel > result.max_relative_error) result = {rel, k, r, c};
      }
    }
  }
  return result;
}

}  // namespace bincf
