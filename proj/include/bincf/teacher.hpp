#pragma once

// Graph-convolutional collaborative filtering: two spectral convolutions with
// two cross layers in between, concatenated into user/item factors and
// trained with the BPR ranking loss.

#include "bincf/autodiff.hpp"
#include "bincf/common.hpp"
#include "bincf/data.hpp"
#include "bincf/optim.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace bincf {

enum class Activation : std::uint8_t { sigmoid = 0, tanh = 1, identity = 2 };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation activation);

struct TeacherConfig {
  Index dim = 64;
  double lambda = 1e-3;
  std::size_t epochs = 200;
  std::uint64_t seed = 1;
  Activation activation = Activation::sigmoid;
  /// false freezes both cross weight matrices at zero.
  bool cross = true;
  /// Stop once |loss[e] - loss[e - window]| / |loss[e - window]| < tolerance.
  double tolerance = 1e-4;
  std::size_t window = 10;
  AdamConfig<double> adam;
};

struct TeacherParams {
  DenseMatrix user_embedding;  // M x D
  DenseMatrix item_embedding;  // N x D
  DenseMatrix filter0;         // D x D
  DenseMatrix filter1;         // D x D
  DenseMatrix cross0;          // (M + N) x D
  DenseMatrix cross1;          // (M + N) x D
  ad::BatchNormState<double> norm0;
  ad::BatchNormState<double> norm1;
  Activation activation = Activation::sigmoid;

  [[nodiscard]] Index num_users() const { return static_cast<Index>(user_embedding.rows()); }
  [[nodiscard]] Index num_items() const { return static_cast<Index>(item_embedding.rows()); }
  [[nodiscard]] Index dim() const { return static_cast<Index>(user_embedding.cols()); }
};

/// Concatenated layer-0, layer-1 and layer-4 factors; 3D columns each.
struct TeacherEmbeddings {
  DenseMatrix users;
  DenseMatrix items;
};

/// Glorot-uniform matrices, identity batch norm. Cross weights are zero when
/// `cross` is false.
TeacherParams init_teacher(Index users, Index items, Index dim, Activation activation, std::uint64_t seed,
                           bool cross = true);

ad::Var activate(const ad::Var& x, Activation activation);

/// rho((X + L X) Theta); the identity is never materialized.
ad::Var spectral_conv(const ad::Var& x, const SparseMatrix& laplacian, const ad::Var& filter, Activation activation);

/// Row k becomes (w_k . x_k) x_k + x_k.
ad::Var cross_layer(const ad::Var& x, const ad::Var& weight);

/// Trainable leaves of a TeacherParams on one tape.
struct TeacherVars {
  ad::Var user_embedding;
  ad::Var item_embedding;
  ad::Var filter0;
  ad::Var filter1;
  ad::Var cross0;
  ad::Var cross1;
  ad::Var gamma0;
  ad::Var beta0;
  ad::Var gamma1;
  ad::Var beta1;
};

/// Cross weights become constants when `train_cross` is false.
TeacherVars attach(ad::Tape& tape, const TeacherParams& params, bool train_cross = true);

struct TeacherOutputs {
  ad::Var users;
  ad::Var items;
};

/// Full-graph forward pass. Train mode updates the running batch-norm
/// statistics held in `params`.
TeacherOutputs teacher_forward(const TeacherVars& vars, TeacherParams& params, const SparseMatrix& laplacian,
                               ad::BatchNormMode mode);

/// Value-only forward pass in eval mode.
TeacherEmbeddings compute_embeddings(const TeacherParams& params, const SparseMatrix& laplacian);

/// sum over triples of -ln sigma(u_i . (v_j - v_j')) + lambda (|U|_F^2 + |V|_F^2).
ad::Var bpr_loss(const ad::Var& users, const ad::Var& items, std::span<const BprTriple> triples, double lambda);

struct TeacherCheckpoint {
  TeacherParams params;
  TeacherEmbeddings embeddings;
};

struct TrainingTrace {
  /// Loss of every completed epoch, evaluated before its parameter update.
  std::vector<double> loss;
  bool converged = false;
};

struct TeacherRun {
  TeacherCheckpoint checkpoint;
  TrainingTrace trace;
};

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Full-batch training: every epoch resamples negatives, runs the forward
/// pass and takes one Adam step on the BPR objective.
TeacherRun train_teacher(const BipartiteGraph& train, const TeacherConfig& config, const EpochCallback& on_epoch = {});

/// True when the last `window` epochs changed the loss by less than
/// `tolerance` relative to the loss `window` epochs ago.
bool loss_converged(std::span<const double> loss, std::size_t window, double tolerance);

}  // namespace bincf
