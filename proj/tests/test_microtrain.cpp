#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <vector>

#include "trapforge/errors.hpp"
#include "trapforge/evalkit.hpp"
#include "trapforge/microtrain.hpp"
#include "trapforge/rng.hpp"

using namespace trapforge;
using namespace trapforge::microtrain;

namespace {

SynthConfig small_synth(std::uint64_t seed = 0) {
  SynthConfig cfg;
  cfg.num_identities = 16;
  cfg.views_per_identity = 8;
  cfg.input_dim = 12;
  cfg.seed = seed;
  return cfg;
}

bool datasets_identical(const PairDataset& a, const PairDataset& b) {
  if (a.items.size() != b.items.size()) return false;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    if (a.items[i].identity != b.items[i].identity) return false;
    if ((a.items[i].view_a - b.items[i].view_a).cwiseAbs().maxCoeff() != 0.0) return false;
    if ((a.items[i].view_b - b.items[i].view_b).cwiseAbs().maxCoeff() != 0.0) return false;
  }
  return true;
}

double mean_cosine_within_vs_cross(const PairDataset& data, bool within) {
  double total = 0.0;
  long long count = 0;
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    for (std::size_t j = i + 1; j < data.items.size(); ++j) {
      const bool same = data.items[i].identity == data.items[j].identity;
      if (same != within) continue;
      const Vector& a = data.items[i].view_a;
      const Vector& b = data.items[j].view_a;
      total += a.dot(b) / (a.norm() * b.norm());
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// small, well-conditioned config for finite-difference checks
TrainConfig fd_config(const std::string& method) {
  TrainConfig cfg;
  cfg.method = method;
  cfg.hidden_dim = 5;
  cfg.embed_dim = 4;
  cfg.dino_logits = 6;
  cfg.dino_local_views = 1;
  cfg.dino_student_temp = 0.5;
  cfg.dino_teacher_temp = 0.3;
  cfg.fastsiam_targets = 2;
  cfg.supervised.arcface_scale = 8.0;
  cfg.supervised.arcface_margin = 0.4;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("synth_dataset: zero sigmas reproduce the prototype exactly") {
  SynthConfig cfg = small_synth();
  cfg.view_noise_sigma = 0.0;
  cfg.drift_sigma = 0.0;
  const auto [data, labels] = synth_dataset(cfg);
  REQUIRE(data.items.size() == 16 * 8);
  for (const PairItem& item : data.items) {
    CHECK((item.view_a - item.view_b).cwiseAbs().maxCoeff() == 0.0);
    CHECK(item.view_a.norm() == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(labels.size() == data.items.size());
}

TEST_CASE("synth_dataset is deterministic in the seed") {
  const auto [first, l1] = synth_dataset(small_synth(42));
  const auto [second, l2] = synth_dataset(small_synth(42));
  CHECK(datasets_identical(first, second));
  CHECK(l1 == l2);
  const auto [other, l3] = synth_dataset(small_synth(43));
  CHECK(!datasets_identical(first, other));
}

TEST_CASE("synth_dataset: within-identity views are more aligned than cross-identity") {
  SynthConfig cfg = small_synth(1);
  cfg.view_noise_sigma = 0.1;
  const auto [data, labels] = synth_dataset(cfg);
  CHECK(mean_cosine_within_vs_cross(data, true) > mean_cosine_within_vs_cross(data, false));
}

TEST_CASE("augment_view: neutral config is the identity") {
  Rng rng(5);
  Vector x(6);
  for (int i = 0; i < 6; ++i) x[i] = rng.gaussian();
  AugmentConfig neutral;
  neutral.sigma = 0.0;
  neutral.dropout_prob = 0.0;
  neutral.scale_min = 1.0;
  neutral.scale_max = 1.0;
  CHECK((augment_view(x, neutral, 9) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("augment_view: seeded determinism") {
  Vector x = Vector::LinSpaced(8, -1.0, 1.0);
  const AugmentConfig cfg;
  CHECK((augment_view(x, cfg, 123) - augment_view(x, cfg, 123)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((augment_view(x, cfg, 123) - augment_view(x, cfg, 124)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("augment_view: expected squared distortion grows with sigma") {
  Vector x = Vector::Ones(10);
  AugmentConfig narrow, wide;
  narrow.sigma = 0.05;
  wide.sigma = 0.5;
  double narrow_total = 0.0, wide_total = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    narrow_total += (augment_view(x, narrow, seed) - x).squaredNorm();
    wide_total += (augment_view(x, wide, seed) - x).squaredNorm();
  }
  CHECK(wide_total > narrow_total);
}

TEST_CASE("build_pairs: combined doubles, augmented ignores view_b, temporal is identity") {
  const auto [base, labels] = synth_dataset(small_synth(2));
  const AugmentConfig aug;

  const PairDataset temporal = build_pairs(base, PairMode::temporal, aug, 7);
  CHECK(datasets_identical(temporal, base));

  const PairDataset combined = build_pairs(base, PairMode::combined, aug, 7);
  CHECK(combined.items.size() == 2 * base.items.size());
  CHECK(combined.source_mode == PairMode::combined);

  // poison view_b: augmented output must not change
  PairDataset poisoned = base;
  for (PairItem& item : poisoned.items) item.view_b.setConstant(1e9);
  const PairDataset from_clean = build_pairs(base, PairMode::augmented, aug, 7);
  const PairDataset from_poisoned = build_pairs(poisoned, PairMode::augmented, aug, 7);
  CHECK(datasets_identical(from_clean, from_poisoned));
}

TEST_CASE("forward: identity-initialized square layers pass nonnegative input through") {
  TrainConfig cfg;
  cfg.hidden_dim = 3;
  cfg.embed_dim = 3;
  EncoderParams params;
  params.w1 = Matrix::Identity(3, 3);
  params.b1 = Vector::Zero(3);
  params.w2 = Matrix::Identity(3, 3);
  params.b2 = Vector::Zero(3);

  Matrix x(2, 3);
  x << 0.5, 0.0, 1.5, 2.0, 0.25, 0.0;
  CHECK((forward(params, x).z - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward: zero weights broadcast the bias") {
  EncoderParams params;
  params.w1 = Matrix::Zero(4, 3);
  params.b1 = Vector::Zero(4);
  params.w2 = Matrix::Zero(2, 4);
  params.b2 = Vector(2);
  params.b2 << 0.7, -0.3;
  const ForwardCache cache = forward(params, Matrix::Random(5, 3));
  for (Eigen::Index i = 0; i < 5; ++i) {
    CHECK(cache.z(i, 0) == doctest::Approx(0.7));
    CHECK(cache.z(i, 1) == doctest::Approx(-0.3));
  }
}

TEST_CASE("forward matches hand-computed matrix algebra on a 2x3 batch") {
  EncoderParams params;
  params.w1 = Matrix(4, 3);
  params.w1 << 1, 0, -1, 0.5, 0.5, 0, -1, 2, 1, 0, 0, 1;
  params.b1 = Vector(4);
  params.b1 << 0.1, -0.2, 0.0, 0.3;
  params.w2 = Matrix(2, 4);
  params.w2 << 1, -1, 0.5, 0, 0, 1, 1, -0.5;
  params.b2 = Vector(2);
  params.b2 << 0.0, 0.25;

  Matrix x(2, 3);
  x << 1.0, -1.0, 0.5, 0.0, 2.0, -1.0;

  // row 0: a1 = (0.6, -0.2, -2.5, 0.8) -> h = (0.6, 0, 0, 0.8)
  //        z = (0.6, 0.25 + 0.8*(-0.5)) = (0.6, -0.15)
  // row 1: a1 = (1.1, 0.8, 3.0, -0.7) -> h = (1.1, 0.8, 3.0, 0)
  //        z = (1.1 - 0.8 + 1.5, 0.25 + 0.8 + 3.0) = (1.8, 4.05)
  const ForwardCache cache = forward(params, x);
  CHECK(cache.z(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(cache.z(0, 1) == doctest::Approx(-0.15).epsilon(1e-12));
  CHECK(cache.z(1, 0) == doctest::Approx(1.8).epsilon(1e-12));
  CHECK(cache.z(1, 1) == doctest::Approx(4.05).epsilon(1e-12));
}

TEST_CASE("backward matches central finite differences for every method") {
  SynthConfig scfg;
  scfg.num_identities = 4;
  scfg.views_per_identity = 3;
  scfg.input_dim = 4;
  scfg.view_noise_sigma = 0.4;
  scfg.seed = 11;
  const auto [data, _] = synth_dataset(scfg);

  const Eigen::Index batch = 6;
  Matrix xa(batch, scfg.input_dim), xb(batch, scfg.input_dim);
  std::vector<int> labels(static_cast<std::size_t>(batch));
  for (Eigen::Index i = 0; i < batch; ++i) {
    const PairItem& item = data.items[static_cast<std::size_t>(i * 2)];
    xa.row(i) = item.view_a.transpose();
    xb.row(i) = item.view_b.transpose();
    labels[static_cast<std::size_t>(i)] = item.identity;
  }

  const std::vector<std::string> methods = {"simclr_dclw", "ntxent", "moco",    "barlow",
                                            "byol",        "fastsiam", "dino",  "arcface",
                                            "triplet",     "supcon"};
  for (const std::string& method : methods) {
    CAPTURE(method);
    const TrainConfig cfg = fd_config(method);
    EncoderParams params = init_params(scfg.input_dim, cfg, 4);
    MethodState state = init_state(params, cfg);
    // make the target distinct from the online branch, as it is mid-training
    {
      Rng rng(99);
      Vector jitter = flatten(state.target);
      for (Eigen::Index i = 0; i < jitter.size(); ++i) jitter[i] += 0.05 * rng.gaussian();
      unflatten(jitter, state.target);
    }
    if (method == "moco") {
      Rng rng(55);
      Matrix queue(5, cfg.embed_dim);
      for (Eigen::Index r = 0; r < queue.rows(); ++r) {
        for (Eigen::Index c = 0; c < queue.cols(); ++c) queue(r, c) = rng.gaussian();
      }
      state.queue.queue = queue;
    }

    const std::uint64_t step_seed = 17;
    const StepOutput base = method_step(params, state, xa, xb, labels, cfg, step_seed);
    const Vector analytic = flatten(base.grads);

    Vector theta = flatten(params);
    const double eps = 1e-5;
    // FD cannot resolve coordinates orders of magnitude below the gradient
    // scale; floor the denominator there instead of comparing noise to noise
    const double floor = std::max(1e-8, 1e-3 * analytic.cwiseAbs().maxCoeff());
    double worst = 0.0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const double saved = theta[i];
      theta[i] = saved + eps;
      unflatten(theta, params);
      const double up = method_step(params, state, xa, xb, labels, cfg, step_seed).loss;
      theta[i] = saved - eps;
      unflatten(theta, params);
      const double down = method_step(params, state, xa, xb, labels, cfg, step_seed).loss;
      theta[i] = saved;
      unflatten(theta, params);
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::abs(analytic[i] - numeric) /
                         std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, rel);
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("predictor block stays untouched by methods that do not use it") {
  TrainConfig cfg = fd_config("simclr_dclw");
  EncoderParams params = init_params(6, cfg, 0);
  // allocate a predictor by hand; simclr never evaluates it
  params.wp = Matrix::Identity(cfg.embed_dim, cfg.embed_dim);
  params.bp = Vector::Zero(cfg.embed_dim);
  const MethodState state = init_state(params, cfg);

  Rng rng(3);
  Matrix xa(4, 6), xb(4, 6);
  for (Eigen::Index i = 0; i < 4; ++i) {
    for (Eigen::Index j = 0; j < 6; ++j) {
      xa(i, j) = rng.gaussian();
      xb(i, j) = rng.gaussian();
    }
  }
  const StepOutput out = method_step(params, state, xa, xb, {0, 1, 2, 3}, cfg, 5);
  CHECK(out.grads.wp.cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.grads.bp.cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.grads.w1.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("backward is linear in the upstream gradient") {
  TrainConfig cfg;
  cfg.hidden_dim = 5;
  cfg.embed_dim = 3;
  EncoderParams params = init_params(4, cfg, 0);
  const Matrix x = Matrix::Random(6, 4);
  const ForwardCache cache = forward(params, x);
  const Matrix dz = Matrix::Random(6, 3);

  EncoderParams grads_single = zero_like(params);
  backward_into(params, cache, dz, nullptr, grads_single);
  EncoderParams grads_double = zero_like(params);
  backward_into(params, cache, Matrix(2.0 * dz), nullptr, grads_double);

  CHECK((flatten(grads_double) - 2.0 * flatten(grads_single)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("train: identical seeds give identical traces") {
  const auto [data, labels] = synth_dataset(small_synth(3));
  TrainConfig cfg;
  cfg.method = "ntxent";
  cfg.steps = 12;
  cfg.batch_size = 16;
  cfg.hidden_dim = 8;
  cfg.embed_dim = 4;
  cfg.seed = 9;
  const TrainReport first = train(data, cfg);
  const TrainReport second = train(data, cfg);
  REQUIRE(first.loss_trace.size() == 12);
  for (std::size_t i = 0; i < first.loss_trace.size(); ++i) {
    CHECK(first.loss_trace[i] == second.loss_trace[i]);
  }
  CHECK((flatten(first.final_params) - flatten(second.final_params)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("train: zero learning rate leaves parameters unchanged with a flat trace") {
  const auto [data, labels] = synth_dataset(small_synth(4));
  TrainConfig cfg;
  cfg.method = "simclr_dclw";
  cfg.learning_rate = 0.0;
  cfg.steps = 6;
  cfg.batch_size = static_cast<int>(data.items.size());  // full batch: same loss every step
  cfg.hidden_dim = 8;
  cfg.embed_dim = 4;
  cfg.seed = 2;
  const TrainReport report = train(data, cfg);
  const EncoderParams initial = init_params(small_synth(4).input_dim, cfg, 16);
  CHECK((flatten(report.final_params) - flatten(initial)).cwiseAbs().maxCoeff() == 0.0);
  // the full batch is reshuffled each epoch; the loss is row-permutation
  // invariant up to summation order
  for (const double loss : report.loss_trace) {
    CHECK(loss == doctest::Approx(report.loss_trace.front()).epsilon(1e-12));
  }
}

TEST_CASE("train: loss decreases over epochs for simclr_dclw on the synthetic task") {
  SynthConfig scfg;
  scfg.num_identities = 32;
  scfg.views_per_identity = 20;
  scfg.input_dim = 16;
  scfg.seed = 1;
  const auto [data, labels] = synth_dataset(scfg);
  TrainConfig cfg;
  cfg.method = "simclr_dclw";
  cfg.steps = 500;
  cfg.seed = 1;
  const TrainReport report = train(data, cfg);
  const std::size_t epoch = data.items.size() / static_cast<std::size_t>(cfg.batch_size);
  const double initial =
      std::accumulate(report.loss_trace.begin(), report.loss_trace.begin() + epoch, 0.0) / epoch;
  const double final_mean =
      std::accumulate(report.loss_trace.end() - static_cast<long>(epoch), report.loss_trace.end(), 0.0) /
      epoch;
  CHECK(final_mean < initial);
}

TEST_CASE("train: divergence produces an error naming the step") {
  const auto [data, labels] = synth_dataset(small_synth(5));
  TrainConfig cfg;
  cfg.method = "barlow";
  cfg.learning_rate = 1e300;  // one step overflows the affine layers
  cfg.steps = 50;
  cfg.batch_size = 16;
  try {
    train(data, cfg);
    FAIL("expected divergence");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("train validates its configuration") {
  const auto [data, labels] = synth_dataset(small_synth(6));
  TrainConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(train(data, cfg), ValidationError);
  cfg = TrainConfig{};
  cfg.batch_size = 1;
  CHECK_THROWS_AS(train(data, cfg), ValidationError);
  cfg = TrainConfig{};
  cfg.batch_size = static_cast<int>(data.items.size()) + 1;
  CHECK_THROWS_AS(train(data, cfg), ValidationError);
  cfg = TrainConfig{};
  cfg.method = "unknown";
  cfg.steps = 1;
  CHECK_THROWS_AS(train(data, cfg), ValidationError);
}

TEST_CASE("embed: unit rows, deterministic, and exact for noiseless identities") {
  SynthConfig scfg = small_synth(7);
  scfg.view_noise_sigma = 0.0;
  scfg.drift_sigma = 0.0;
  const auto [data, labels] = synth_dataset(scfg);
  TrainConfig cfg;
  cfg.hidden_dim = 8;
  cfg.embed_dim = 4;
  const EncoderParams params = init_params(scfg.input_dim, cfg, 16);

  const Matrix views = dataset_views_a(data);
  const Matrix embedded = embed(params, views);
  for (Eigen::Index i = 0; i < embedded.rows(); ++i) {
    CHECK(embedded.row(i).norm() == doctest::Approx(1.0).epsilon(1e-9));
  }
  // identical inputs map to identical rows; sigma-0 views share their prototype
  for (std::size_t i = 0; i + 1 < data.items.size(); ++i) {
    if (data.items[i].identity != data.items[i + 1].identity) continue;
    const double cosine = embedded.row(static_cast<Eigen::Index>(i))
                              .dot(embedded.row(static_cast<Eigen::Index>(i + 1)));
    CHECK(cosine == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("embedding CSV uses the documented header and 9 significant digits") {
  Matrix emb(2, 3);
  emb << 0.123456789123, -1.0 / 3.0, 1.0, 0.5, 0.25, -0.125;
  const std::string csv = write_embeddings_csv({0, 1}, {4, 5}, emb);
  CHECK(csv.rfind("id,label,e0,e1,e2\n", 0) == 0);
  CHECK(csv.find("0,4,0.123456789,-0.333333333,1\n") != std::string::npos);
  CHECK(csv.find("1,5,0.5,0.25,-0.125\n") != std::string::npos);

  const auto table = evalkit::read_embeddings_csv(csv);
  CHECK(table.embeddings(0, 0) == doctest::Approx(0.123456789).epsilon(1e-9));
}

TEST_CASE("train report serializes config, trace, and parameters") {
  const auto [data, labels] = synth_dataset(small_synth(8));
  TrainConfig cfg;
  cfg.method = "ntxent";
  cfg.steps = 3;
  cfg.batch_size = 8;
  cfg.hidden_dim = 6;
  cfg.embed_dim = 3;
  const TrainReport report = train(data, cfg);
  const std::string text = write_train_report(report, cfg);
  CHECK(text.find("\"loss_trace\"") != std::string::npos);
  CHECK(text.find("\"elapsed_seconds\"") != std::string::npos);
  CHECK(text.find("\"w1\"") != std::string::npos);
  CHECK(text.find("\"method\": \"ntxent\"") != std::string::npos);
}
