#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trapforge/losszoo.hpp"

namespace trapforge::microtrain {

using losszoo::Matrix;
using losszoo::Vector;

// Defaults are pilot-calibrated so the retrieval task is nontrivial but
// solvable: a randomly initialized encoder lands well under 0.3 mAP while a
// trained one at least doubles it.
struct SynthConfig {
  int num_identities = 32;
  int views_per_identity = 20;
  int input_dim = 24;
  double view_noise_sigma = 0.18;
  double drift_sigma = 0.22;
  std::uint64_t seed = 0;
};

enum class PairMode { temporal, augmented, combined };
PairMode pair_mode_from_string(const std::string& name);
std::string pair_mode_name(PairMode mode);

// One training pair: two views of (presumably) the same identity.
struct PairItem {
  Vector view_a;
  Vector view_b;
  int identity = 0;
};

struct PairDataset {
  std::vector<PairItem> items;
  PairMode source_mode = PairMode::temporal;
};

struct AugmentConfig {
  double sigma = 0.1;
  double dropout_prob = 0.1;
  double scale_min = 0.8;
  double scale_max = 1.25;
};

// Two affine layers with a ReLU between (encoder f + projection g), an
// optional affine predictor h, and ArcFace class centers when trained.
// Unused blocks stay 0x0.
struct EncoderParams {
  Matrix w1;  // hidden x input
  Vector b1;
  Matrix w2;  // embed x hidden
  Vector b2;
  Matrix wp;  // embed x embed (predictor)
  Vector bp;
  Matrix centers;  // classes x embed (arcface)
};

struct TrainConfig {
  std::string method = "simclr_dclw";
  // absent: per-method default from default_learning_rate()
  std::optional<double> learning_rate;
  int batch_size = 64;
  int steps = 1000;
  int hidden_dim = 48;
  int embed_dim = 8;
  losszoo::ContrastiveConfig contrastive;
  losszoo::BarlowConfig barlow;
  losszoo::SupervisedConfig supervised;
  double dino_student_temp = 0.1;
  double dino_teacher_temp = 0.04;
  double dino_center_momentum = 0.9;
  int dino_logits = 32;
  int dino_local_views = 2;
  double dino_local_sigma_scale = 2.0;
  double ema_momentum = 0.99;
  std::size_t queue_capacity = 256;  // desk-scale; the 640-item task drowns in stale keys at 4096
  int fastsiam_targets = 3;
  double aug_sigma = 0.1;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> loss_trace;
  EncoderParams final_params;
  double elapsed_seconds = 0.0;
};

// Identity prototypes on the unit sphere; view_a = prototype + noise,
// view_b = view_a + temporal drift. Returns the dataset plus per-item labels.
std::pair<PairDataset, std::vector<int>> synth_dataset(const SynthConfig& cfg);

// Gaussian noise, coordinate dropout, then a random positive rescale.
Vector augment_view(const Vector& x, const AugmentConfig& cfg, std::uint64_t seed);

// temporal: unchanged. augmented: both views are fresh augmentations of
// view_a (view_b never read). combined: temporal + augmented, size doubled.
PairDataset build_pairs(const PairDataset& base, PairMode mode, const AugmentConfig& cfg,
                        std::uint64_t seed);

struct ForwardCache {
  Matrix x;
  Matrix a1;  // pre-activation of the hidden layer
  Matrix h;
  Matrix z;
  Matrix p;  // predictor output; empty unless requested
};

ForwardCache forward(const EncoderParams& params, const Matrix& x, bool with_predictor = false);

// Chain-rule gradients accumulated into `grads` (same shapes as params).
// dz/dp are the loss gradients w.r.t. the cache's z/p outputs.
void backward_into(const EncoderParams& params, const ForwardCache& cache, const Matrix& dz,
                   const Matrix* dp, EncoderParams& grads);

EncoderParams zero_like(const EncoderParams& params);
Vector flatten(const EncoderParams& params);
void unflatten(const Vector& flat, EncoderParams& params);

EncoderParams init_params(int input_dim, const TrainConfig& cfg, int num_classes);

// Mutable companions of the online parameters during training: the EMA (or
// refreshed) target network, the negatives queue, and the DINO center.
struct MethodState {
  EncoderParams target;
  losszoo::MomentumState queue;
  Vector dino_center;
};

MethodState init_state(const EncoderParams& params, const TrainConfig& cfg);

// One forward+loss+backward evaluation at fixed state. Target/teacher
// branches are computed from state.target and receive no gradient.
struct StepOutput {
  double loss = 0.0;
  EncoderParams grads;
  Matrix moco_keys;    // rows to enqueue (moco only)
  Vector dino_center;  // updated center (dino only)
};

StepOutput method_step(const EncoderParams& params, const MethodState& state, const Matrix& xa,
                       const Matrix& xb, const std::vector<int>& labels, const TrainConfig& cfg,
                       std::uint64_t step_seed);

double default_learning_rate(const std::string& method);

TrainReport train(const PairDataset& data, const TrainConfig& cfg);

// L2-normalized rows of g(f(x)).
Matrix embed(const EncoderParams& params, const Matrix& x);

// Stacks every item's view_a into a batch (rows follow item order).
Matrix dataset_views_a(const PairDataset& data);

// ---------------------------------------------------------------------------
// File formats

// CSV with header id,label,e0,...,e{d-1}; values at 9 significant digits.
std::string write_embeddings_csv(const std::vector<std::int64_t>& ids, const std::vector<int>& labels,
                                 const Matrix& embeddings);

std::string write_train_report(const TrainReport& report, const TrainConfig& cfg);

}  // namespace trapforge::microtrain
