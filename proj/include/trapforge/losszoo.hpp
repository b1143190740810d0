#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace trapforge::losszoo {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Rows are embedding vectors z; labels accompany supervised batches.
struct EmbeddingBatch {
  Matrix data;
  std::optional<std::vector<int>> labels;
};

struct ContrastiveConfig {
  double temperature = 0.1;
  double vmf_sigma = 0.5;
};

struct BarlowConfig {
  double lambda = 5e-3;
};

struct DinoConfig {
  double student_temp = 0.1;
  double teacher_temp = 0.04;
  Vector center;
  double center_momentum = 0.9;
};

// EMA momentum plus the FIFO queue of negative rows.
struct MomentumState {
  double momentum = 0.99;
  std::size_t capacity = 4096;
  Matrix queue;  // |queue| x d, oldest row first
};

struct SupervisedConfig {
  double arcface_scale = 64.0;
  double arcface_margin = 0.5;  // radians
  double triplet_margin = 0.2;
};

// Scalar loss plus gradients with respect to every input, in the input
// order of the operation. Stop-gradient inputs get explicit zero blocks.
struct LossOutput {
  double value = 0.0;
  std::vector<Matrix> grads;
};

// Rows with L2 norm below this are rejected before normalization.
inline constexpr double kNormFloor = 1e-12;
// Standardization denominator guard (Barlow Twins).
inline constexpr double kStandardizeEps = 1e-5;
// arccos argument clipping (ArcFace).
inline constexpr double kAcosClip = 1e-7;

// grads: [d/dzA, d/dzB]
LossOutput nt_xent(const Matrix& za, const Matrix& zb, const ContrastiveConfig& cfg);

// k_pos and the queue are stop-gradient; grads: [d/dq, 0, 0].
LossOutput nt_xent_queue(const Matrix& q, const Matrix& k_pos, const MomentumState& state,
                         const ContrastiveConfig& cfg);

// Decoupled contrastive loss with the von Mises-Fisher weight
// w_i = 2 - N * softmax_i(sim(zA_i, zB_i) / vmf_sigma). The weight is a
// function of the inputs and is differentiated through. grads: [d/dzA, d/dzB].
LossOutput dclw(const Matrix& za, const Matrix& zb, const ContrastiveConfig& cfg);

// grads: [d/dzA, d/dzB]
LossOutput barlow_twins(const Matrix& za, const Matrix& zb, const BarlowConfig& cfg);

// z_target is stop-gradient; grads: [d/dp, 0].
LossOutput negative_cosine(const Matrix& p, const Matrix& z_target);

// negative_cosine(pa, zb_target) + negative_cosine(pb, za_target);
// grads: [d/dpa, 0, d/dpb, 0].
LossOutput byol(const Matrix& pa, const Matrix& zb_target, const Matrix& pb, const Matrix& za_target);

// Cosine of p against the mean of L2-normalized target views (the mean is
// not re-normalized, so the value tracks target spread). Targets are
// stop-gradient; grads: [d/dp, 0...].
LossOutput fastsiam(const Matrix& p, const std::vector<Matrix>& targets);

struct DinoResult {
  LossOutput loss;  // grads: per student view, then zero blocks per teacher view
  Vector new_center;
};

// Cross-entropy between centered/sharpened teacher distributions and student
// distributions over all (teacher view t, student view s) pairs with
// differing view indices; teacher views are the leading global subset.
DinoResult dino(const std::vector<Matrix>& student_logits, const std::vector<Matrix>& teacher_logits,
                const DinoConfig& cfg);

// m*target + (1-m)*online, elementwise.
Vector ema_update(const Vector& target_params, const Vector& online_params, double momentum);

// Appends batch rows, evicting oldest rows beyond capacity.
MomentumState queue_push(const MomentumState& state, const Matrix& batch);

// grads: [d/dz, d/dcenters]
LossOutput arcface(const Matrix& z, const std::vector<int>& labels, const Matrix& class_centers,
                   const SupervisedConfig& cfg);

// grads: [d/danchor, d/dpositive, d/dnegative]
LossOutput triplet(const Matrix& anchor, const Matrix& positive, const Matrix& negative,
                   const SupervisedConfig& cfg);

// grads: [d/dz]
LossOutput supcon(const Matrix& z, const std::vector<int>& labels, const ContrastiveConfig& cfg);

// ---------------------------------------------------------------------------
// Gradient verification

using LossFn = std::function<LossOutput(const std::vector<Matrix>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  int input_index = -1;
  Eigen::Index row = -1;
  Eigen::Index col = -1;
};

// Central finite differences against the analytic gradient. Relative error
// uses max(|analytic|, |numeric|, 1e-8) as denominator. Stop-gradient inputs
// must report exactly zero gradient; a violation is reported as an infinite
// relative error at the offending coordinate. Throws if the loss is
// non-finite at a perturbed point.
GradCheckReport grad_check(const LossFn& loss, const std::vector<Matrix>& inputs,
                           const std::vector<bool>& stop_gradient, double eps);

// A ready-made random instance of one of the named losses, for the
// verification suite. Seed fixes the inputs.
struct GradCheckProblem {
  std::vector<Matrix> inputs;
  std::vector<bool> stop_gradient;
  LossFn eval;
};

// The ten method names: simclr_dclw, ntxent, moco, barlow, byol, fastsiam,
// dino, arcface, triplet, supcon.
const std::vector<std::string>& loss_methods();
GradCheckProblem make_gradcheck_problem(const std::string& method, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Shared numeric helpers (also used by microtrain's backward pass)

// Row-wise L2 normalization; throws ValidationError when a row norm is
// below kNormFloor. Norms are returned for gradient backpropagation.
Matrix normalize_rows(const Matrix& z, Vector* norms = nullptr);

// Maps a gradient w.r.t. normalized rows back to raw rows:
// g_z = (g_u - (g_u . u) u) / norm.
Matrix normalize_rows_backward(const Matrix& grad_u, const Matrix& u, const Vector& norms);

}  // namespace trapforge::losszoo
