#include "trapforge/microtrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "trapforge/errors.hpp"
#include "trapforge/rng.hpp"

namespace trapforge::microtrain {

using nlohmann::json;

namespace {

// splitmix64-style stream derivation for per-item/per-step seeds
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t x = base + 0x9e3779b97f4a7c15ull * (a + 1) + 0xbf58476d1ce4e5b9ull * (b + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * rng.gaussian();
  }
  return m;
}

Matrix augment_batch(const Matrix& x, const AugmentConfig& cfg, std::uint64_t seed) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.row(i) = augment_view(x.row(i).transpose(), cfg, derive_seed(seed, static_cast<std::uint64_t>(i)))
                     .transpose();
  }
  return out;
}

bool is_contrastive(const std::string& method) {
  return method == "simclr_dclw" || method == "ntxent" || method == "moco" || method == "supcon";
}

// byol and barlow also train best at 0.5 on the synthetic task (pilot); the
// sharp-logit methods (arcface s=64, dino) need the smaller step.
bool wants_large_rate(const std::string& method) {
  return is_contrastive(method) || method == "byol" || method == "barlow";
}

}  // namespace

PairMode pair_mode_from_string(const std::string& name) {
  if (name == "temporal") return PairMode::temporal;
  if (name == "augmented") return PairMode::augmented;
  if (name == "combined") return PairMode::combined;
  throw ValidationError("unknown pair mode \"" + name + "\"");
}

std::string pair_mode_name(PairMode mode) {
  switch (mode) {
    case PairMode::temporal: return "temporal";
    case PairMode::augmented: return "augmented";
    case PairMode::combined: return "combined";
  }
  throw ValidationError("invalid pair mode");
}

std::pair<PairDataset, std::vector<int>> synth_dataset(const SynthConfig& cfg) {
  if (cfg.num_identities < 1 || cfg.views_per_identity < 1) {
    throw ValidationError("synth_dataset: counts must be positive");
  }
  if (cfg.input_dim < 2) throw ValidationError("synth_dataset: input_dim must be at least 2");
  if (cfg.view_noise_sigma < 0.0 || cfg.drift_sigma < 0.0) {
    throw ValidationError("synth_dataset: sigmas must be nonnegative");
  }

  Rng rng(cfg.seed);
  PairDataset data;
  data.source_mode = PairMode::temporal;
  std::vector<int> labels;
  data.items.reserve(static_cast<std::size_t>(cfg.num_identities) *
                     static_cast<std::size_t>(cfg.views_per_identity));

  for (int identity = 0; identity < cfg.num_identities; ++identity) {
    Vector prototype(cfg.input_dim);
    for (int d = 0; d < cfg.input_dim; ++d) prototype[d] = rng.gaussian();
    prototype /= prototype.norm();

    for (int view = 0; view < cfg.views_per_identity; ++view) {
      PairItem item;
      item.identity = identity;
      item.view_a = prototype;
      for (int d = 0; d < cfg.input_dim; ++d) item.view_a[d] += cfg.view_noise_sigma * rng.gaussian();
      item.view_b = item.view_a;
      for (int d = 0; d < cfg.input_dim; ++d) item.view_b[d] += cfg.drift_sigma * rng.gaussian();
      data.items.push_back(std::move(item));
      labels.push_back(identity);
    }
  }
  return {std::move(data), std::move(labels)};
}

Vector augment_view(const Vector& x, const AugmentConfig& cfg, std::uint64_t seed) {
  if (cfg.sigma < 0.0) throw ValidationError("augment_view: sigma must be nonnegative");
  Rng rng(seed);
  Vector out = x;
  for (Eigen::Index d = 0; d < out.size(); ++d) out[d] += cfg.sigma * rng.gaussian();
  for (Eigen::Index d = 0; d < out.size(); ++d) {
    if (rng.uniform01() < cfg.dropout_prob) out[d] = 0.0;
  }
  out *= rng.uniform(cfg.scale_min, cfg.scale_max);
  return out;
}

PairDataset build_pairs(const PairDataset& base, PairMode mode, const AugmentConfig& cfg,
                        std::uint64_t seed) {
  if (base.source_mode != PairMode::temporal) {
    throw ValidationError("build_pairs expects a temporal-mode base dataset");
  }
  if (mode == PairMode::temporal) return base;

  const auto make_augmented = [&]() {
    PairDataset aug;
    aug.source_mode = PairMode::augmented;
    aug.items.reserve(base.items.size());
    for (std::size_t i = 0; i < base.items.size(); ++i) {
      PairItem item;
      item.identity = base.items[i].identity;
      item.view_a = augment_view(base.items[i].view_a, cfg, derive_seed(seed, i, 0));
      item.view_b = augment_view(base.items[i].view_a, cfg, derive_seed(seed, i, 1));
      aug.items.push_back(std::move(item));
    }
    return aug;
  };

  if (mode == PairMode::augmented) return make_augmented();

  PairDataset combined = base;
  combined.source_mode = PairMode::combined;
  PairDataset aug = make_augmented();
  combined.items.insert(combined.items.end(), std::make_move_iterator(aug.items.begin()),
                        std::make_move_iterator(aug.items.end()));
  return combined;
}

ForwardCache forward(const EncoderParams& params, const Matrix& x, bool with_predictor) {
  if (x.cols() != params.w1.cols()) {
    throw ValidationError("forward: input dimension does not match the encoder");
  }
  ForwardCache cache;
  cache.x = x;
  cache.a1 = (x * params.w1.transpose()).rowwise() + params.b1.transpose();
  cache.h = cache.a1.cwiseMax(0.0);
  cache.z = (cache.h * params.w2.transpose()).rowwise() + params.b2.transpose();
  if (with_predictor) {
    if (params.wp.rows() == 0) throw ValidationError("forward: predictor requested but not allocated");
    cache.p = (cache.z * params.wp.transpose()).rowwise() + params.bp.transpose();
  }
  return cache;
}

void backward_into(const EncoderParams& params, const ForwardCache& cache, const Matrix& dz,
                   const Matrix* dp, EncoderParams& grads) {
  Matrix dz_total = dz;
  if (dp != nullptr) {
    grads.wp += dp->transpose() * cache.z;
    grads.bp += dp->colwise().sum().transpose();
    if (dz_total.size() == 0) dz_total = *dp * params.wp;
    else dz_total += *dp * params.wp;
  }
  grads.w2 += dz_total.transpose() * cache.h;
  grads.b2 += dz_total.colwise().sum().transpose();
  const Matrix dh = dz_total * params.w2;
  const Matrix da1 = (cache.a1.array() > 0.0).cast<double>() * dh.array();
  grads.w1 += da1.transpose() * cache.x;
  grads.b1 += da1.colwise().sum().transpose();
}

EncoderParams zero_like(const EncoderParams& params) {
  EncoderParams z;
  z.w1 = Matrix::Zero(params.w1.rows(), params.w1.cols());
  z.b1 = Vector::Zero(params.b1.size());
  z.w2 = Matrix::Zero(params.w2.rows(), params.w2.cols());
  z.b2 = Vector::Zero(params.b2.size());
  z.wp = Matrix::Zero(params.wp.rows(), params.wp.cols());
  z.bp = Vector::Zero(params.bp.size());
  z.centers = Matrix::Zero(params.centers.rows(), params.centers.cols());
  return z;
}

Vector flatten(const EncoderParams& params) {
  const auto blocks = {&params.w1, &params.w2, &params.wp, &params.centers};
  Eigen::Index total = params.b1.size() + params.b2.size() + params.bp.size();
  for (const Matrix* m : blocks) total += m->size();
  Vector flat(total);
  Eigen::Index at = 0;
  const auto put_matrix = [&](const Matrix& m) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) flat[at++] = m(r, c);
    }
  };
  const auto put_vector = [&](const Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) flat[at++] = v[i];
  };
  put_matrix(params.w1);
  put_vector(params.b1);
  put_matrix(params.w2);
  put_vector(params.b2);
  put_matrix(params.wp);
  put_vector(params.bp);
  put_matrix(params.centers);
  return flat;
}

void unflatten(const Vector& flat, EncoderParams& params) {
  Eigen::Index at = 0;
  const auto take_matrix = [&](Matrix& m) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = flat[at++];
    }
  };
  const auto take_vector = [&](Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = flat[at++];
  };
  take_matrix(params.w1);
  take_vector(params.b1);
  take_matrix(params.w2);
  take_vector(params.b2);
  take_matrix(params.wp);
  take_vector(params.bp);
  take_matrix(params.centers);
  if (at != flat.size()) throw ValidationError("unflatten: length mismatch");
}

EncoderParams init_params(int input_dim, const TrainConfig& cfg, int num_classes) {
  const int embed = cfg.method == "dino" ? cfg.dino_logits : cfg.embed_dim;
  Rng rng(derive_seed(cfg.seed, 0xabcdef));
  EncoderParams params;
  params.w1 = gaussian_matrix(rng, cfg.hidden_dim, input_dim, 1.0 / std::sqrt(input_dim));
  params.b1 = Vector::Constant(cfg.hidden_dim, 0.01);
  params.w2 = gaussian_matrix(rng, embed, cfg.hidden_dim, 1.0 / std::sqrt(cfg.hidden_dim));
  params.b2 = Vector::Zero(embed);
  if (cfg.method == "byol" || cfg.method == "fastsiam") {
    // near-identity predictor
    params.wp = Matrix::Identity(embed, embed) + gaussian_matrix(rng, embed, embed, 0.01);
    params.bp = Vector::Zero(embed);
  } else {
    params.wp = Matrix(0, 0);
    params.bp = Vector(0);
  }
  if (cfg.method == "arcface") {
    params.centers = gaussian_matrix(rng, num_classes, embed, 1.0 / std::sqrt(embed));
  } else {
    params.centers = Matrix(0, 0);
  }
  return params;
}

MethodState init_state(const EncoderParams& params, const TrainConfig& cfg) {
  MethodState state;
  state.target = params;
  state.queue.momentum = cfg.ema_momentum;
  state.queue.capacity = cfg.queue_capacity;
  state.dino_center = Vector::Zero(cfg.method == "dino" ? cfg.dino_logits : cfg.embed_dim);
  return state;
}

double default_learning_rate(const std::string& method) {
  return wants_large_rate(method) ? 0.5 : 0.1;
}

StepOutput method_step(const EncoderParams& params, const MethodState& state, const Matrix& xa,
                       const Matrix& xb, const std::vector<int>& labels, const TrainConfig& cfg,
                       std::uint64_t step_seed) {
  StepOutput out;
  out.grads = zero_like(params);
  const std::string& method = cfg.method;

  if (method == "simclr_dclw" || method == "ntxent" || method == "barlow") {
    const ForwardCache fa = forward(params, xa);
    const ForwardCache fb = forward(params, xb);
    losszoo::LossOutput loss;
    if (method == "simclr_dclw") loss = losszoo::dclw(fa.z, fb.z, cfg.contrastive);
    else if (method == "ntxent") loss = losszoo::nt_xent(fa.z, fb.z, cfg.contrastive);
    else loss = losszoo::barlow_twins(fa.z, fb.z, cfg.barlow);
    out.loss = loss.value;
    backward_into(params, fa, loss.grads[0], nullptr, out.grads);
    backward_into(params, fb, loss.grads[1], nullptr, out.grads);
    return out;
  }

  if (method == "moco") {
    const ForwardCache fq = forward(params, xa);
    const Matrix keys = forward(state.target, xb).z;  // stop-gradient branch
    const losszoo::ContrastiveConfig ccfg = cfg.contrastive;
    const losszoo::LossOutput loss = losszoo::nt_xent_queue(fq.z, keys, state.queue, ccfg);
    out.loss = loss.value;
    backward_into(params, fq, loss.grads[0], nullptr, out.grads);
    out.moco_keys = losszoo::normalize_rows(keys);
    return out;
  }

  if (method == "byol") {
    const ForwardCache fa = forward(params, xa, true);
    const ForwardCache fb = forward(params, xb, true);
    const Matrix za_t = forward(state.target, xa).z;
    const Matrix zb_t = forward(state.target, xb).z;
    const losszoo::LossOutput loss = losszoo::byol(fa.p, zb_t, fb.p, za_t);
    out.loss = loss.value;
    backward_into(params, fa, Matrix::Zero(fa.z.rows(), fa.z.cols()), &loss.grads[0], out.grads);
    backward_into(params, fb, Matrix::Zero(fb.z.rows(), fb.z.cols()), &loss.grads[2], out.grads);
    return out;
  }

  if (method == "fastsiam") {
    const ForwardCache fa = forward(params, xa, true);
    AugmentConfig aug;
    aug.sigma = cfg.aug_sigma;
    std::vector<Matrix> targets;
    targets.push_back(forward(state.target, xb).z);
    for (int v = 1; v < cfg.fastsiam_targets; ++v) {
      const Matrix& source = v % 2 == 1 ? xa : xb;
      targets.push_back(forward(state.target, augment_batch(source, aug, derive_seed(step_seed, 0x5a, v))).z);
    }
    const losszoo::LossOutput loss = losszoo::fastsiam(fa.p, targets);
    out.loss = loss.value;
    backward_into(params, fa, Matrix::Zero(fa.z.rows(), fa.z.cols()), &loss.grads[0], out.grads);
    return out;
  }

  if (method == "dino") {
    AugmentConfig local;
    local.sigma = cfg.aug_sigma * cfg.dino_local_sigma_scale;
    std::vector<Matrix> student_inputs = {xa, xb};
    for (int v = 0; v < cfg.dino_local_views; ++v) {
      const Matrix& source = v % 2 == 0 ? xa : xb;
      student_inputs.push_back(augment_batch(source, local, derive_seed(step_seed, 0xd1, v)));
    }
    std::vector<ForwardCache> student_caches;
    std::vector<Matrix> student_logits;
    for (const Matrix& view : student_inputs) {
      student_caches.push_back(forward(params, view));
      student_logits.push_back(student_caches.back().z);
    }
    const std::vector<Matrix> teacher_logits = {forward(state.target, xa).z,
                                                forward(state.target, xb).z};
    losszoo::DinoConfig dcfg;
    dcfg.student_temp = cfg.dino_student_temp;
    dcfg.teacher_temp = cfg.dino_teacher_temp;
    dcfg.center = state.dino_center;
    dcfg.center_momentum = cfg.dino_center_momentum;
    losszoo::DinoResult result = losszoo::dino(student_logits, teacher_logits, dcfg);
    out.loss = result.loss.value;
    for (std::size_t v = 0; v < student_caches.size(); ++v) {
      backward_into(params, student_caches[v], result.loss.grads[v], nullptr, out.grads);
    }
    out.dino_center = std::move(result.new_center);
    return out;
  }

  if (method == "arcface" || method == "supcon") {
    Matrix stacked(xa.rows() + xb.rows(), xa.cols());
    stacked << xa, xb;
    std::vector<int> doubled = labels;
    doubled.insert(doubled.end(), labels.begin(), labels.end());
    const ForwardCache cache = forward(params, stacked);
    losszoo::LossOutput loss;
    if (method == "arcface") {
      loss = losszoo::arcface(cache.z, doubled, params.centers, cfg.supervised);
      out.grads.centers += loss.grads[1];
    } else {
      loss = losszoo::supcon(cache.z, doubled, cfg.contrastive);
    }
    out.loss = loss.value;
    backward_into(params, cache, loss.grads[0], nullptr, out.grads);
    return out;
  }

  if (method == "triplet") {
    // negatives are other items' first views with a different identity
    const Eigen::Index batch = xa.rows();
    Matrix xn(batch, xa.cols());
    for (Eigen::Index i = 0; i < batch; ++i) {
      Eigen::Index pick = -1;
      for (Eigen::Index offset = 1; offset < batch; ++offset) {
        const Eigen::Index j = (i + offset) % batch;
        if (labels[static_cast<std::size_t>(j)] != labels[static_cast<std::size_t>(i)]) {
          pick = j;
          break;
        }
      }
      if (pick < 0) throw ValidationError("triplet batch contains a single identity");
      xn.row(i) = xa.row(pick);
    }
    const ForwardCache fa = forward(params, xa);
    const ForwardCache fp = forward(params, xb);
    const ForwardCache fn = forward(params, xn);
    const losszoo::LossOutput loss = losszoo::triplet(fa.z, fp.z, fn.z, cfg.supervised);
    out.loss = loss.value;
    backward_into(params, fa, loss.grads[0], nullptr, out.grads);
    backward_into(params, fp, loss.grads[1], nullptr, out.grads);
    backward_into(params, fn, loss.grads[2], nullptr, out.grads);
    return out;
  }

  throw ValidationError("unknown training method \"" + method + "\"");
}

TrainReport train(const PairDataset& data, const TrainConfig& cfg) {
  if (data.items.empty()) throw ValidationError("train: dataset is empty");
  if (cfg.batch_size < 2) throw ValidationError("train: batch_size must be at least 2");
  if (cfg.steps < 1) throw ValidationError("train: steps must be at least 1");
  if (static_cast<std::size_t>(cfg.batch_size) > data.items.size()) {
    throw ValidationError("train: batch_size exceeds the dataset size");
  }
  const double lr = cfg.learning_rate.value_or(default_learning_rate(cfg.method));
  if (lr < 0.0) throw ValidationError("train: learning rate must be nonnegative");

  const auto started = std::chrono::steady_clock::now();

  const int input_dim = static_cast<int>(data.items.front().view_a.size());
  int num_classes = 0;
  for (const PairItem& item : data.items) num_classes = std::max(num_classes, item.identity + 1);

  EncoderParams params = init_params(input_dim, cfg, num_classes);
  MethodState state = init_state(params, cfg);
  const bool uses_target = cfg.method == "moco" || cfg.method == "byol" || cfg.method == "dino" ||
                           cfg.method == "fastsiam";

  TrainReport report;
  report.loss_trace.reserve(static_cast<std::size_t>(cfg.steps));

  std::vector<std::size_t> order(data.items.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // force a shuffle on the first step
  std::uint64_t epoch = 0;

  Matrix xa(cfg.batch_size, input_dim);
  Matrix xb(cfg.batch_size, input_dim);
  std::vector<int> labels(static_cast<std::size_t>(cfg.batch_size));

  for (int step = 0; step < cfg.steps; ++step) {
    if (cursor + static_cast<std::size_t>(cfg.batch_size) > order.size()) {
      Rng shuffler(derive_seed(cfg.seed, 0xe70c, epoch++));
      shuffler.shuffle(order);
      cursor = 0;
    }
    for (int i = 0; i < cfg.batch_size; ++i) {
      const PairItem& item = data.items[order[cursor + static_cast<std::size_t>(i)]];
      xa.row(i) = item.view_a.transpose();
      xb.row(i) = item.view_b.transpose();
      labels[static_cast<std::size_t>(i)] = item.identity;
    }
    cursor += static_cast<std::size_t>(cfg.batch_size);

    const StepOutput result =
        method_step(params, state, xa, xb, labels, cfg, derive_seed(cfg.seed, 0x57e9, static_cast<std::uint64_t>(step)));
    if (!std::isfinite(result.loss)) {
      throw ValidationError("train: non-finite loss at step " + std::to_string(step));
    }
    report.loss_trace.push_back(result.loss);

    const Vector updated = flatten(params) - lr * flatten(result.grads);
    unflatten(updated, params);

    if (cfg.method == "moco" && result.moco_keys.rows() > 0) {
      state.queue = losszoo::queue_push(state.queue, result.moco_keys);
    }
    if (cfg.method == "dino") state.dino_center = result.dino_center;
    if (uses_target) {
      if (cfg.method == "fastsiam") {
        state.target = params;  // stop-gradient copy of the online encoder
      } else {
        const Vector blended = losszoo::ema_update(flatten(state.target), flatten(params), cfg.ema_momentum);
        unflatten(blended, state.target);
      }
    }
  }

  report.final_params = std::move(params);
  report.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

Matrix embed(const EncoderParams& params, const Matrix& x) {
  return losszoo::normalize_rows(forward(params, x).z);
}

Matrix dataset_views_a(const PairDataset& data) {
  if (data.items.empty()) throw ValidationError("dataset_views_a: empty dataset");
  Matrix views(static_cast<Eigen::Index>(data.items.size()), data.items.front().view_a.size());
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    views.row(static_cast<Eigen::Index>(i)) = data.items[i].view_a.transpose();
  }
  return views;
}

std::string write_embeddings_csv(const std::vector<std::int64_t>& ids, const std::vector<int>& labels,
                                 const Matrix& embeddings) {
  if (static_cast<Eigen::Index>(ids.size()) != embeddings.rows() ||
      static_cast<Eigen::Index>(labels.size()) != embeddings.rows()) {
    throw ValidationError("write_embeddings_csv: ids/labels must match the row count");
  }
  std::ostringstream out;
  out << "id,label";
  for (Eigen::Index d = 0; d < embeddings.cols(); ++d) out << ",e" << d;
  out << "\n";
  char buffer[64];
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    out << ids[static_cast<std::size_t>(i)] << "," << labels[static_cast<std::size_t>(i)];
    for (Eigen::Index d = 0; d < embeddings.cols(); ++d) {
      std::snprintf(buffer, sizeof(buffer), "%.9g", embeddings(i, d));
      out << "," << buffer;
    }
    out << "\n";
  }
  return out.str();
}

std::string write_train_report(const TrainReport& report, const TrainConfig& cfg) {
  json params;
  const auto matrix_json = [](const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  const auto vector_json = [](const Vector& v) {
    json row = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) row.push_back(v[i]);
    return row;
  };
  params["w1"] = matrix_json(report.final_params.w1);
  params["b1"] = vector_json(report.final_params.b1);
  params["w2"] = matrix_json(report.final_params.w2);
  params["b2"] = vector_json(report.final_params.b2);
  params["wp"] = matrix_json(report.final_params.wp);
  params["bp"] = vector_json(report.final_params.bp);
  params["centers"] = matrix_json(report.final_params.centers);

  json doc;
  doc["config"] = {{"method", cfg.method},
                   {"learning_rate", cfg.learning_rate.value_or(default_learning_rate(cfg.method))},
                   {"batch_size", cfg.batch_size},
                   {"steps", cfg.steps},
                   {"hidden_dim", cfg.hidden_dim},
                   {"embed_dim", cfg.method == "dino" ? cfg.dino_logits : cfg.embed_dim},
                   {"seed", cfg.seed}};
  doc["loss_trace"] = report.loss_trace;
  doc["elapsed_seconds"] = report.elapsed_seconds;
  doc["final_params"] = std::move(params);
  return doc.dump(2) + "\n";
}

}  // namespace trapforge::microtrain
