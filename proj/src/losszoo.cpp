#include "trapforge/losszoo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "trapforge/errors.hpp"
#include "trapforge/rng.hpp"

namespace trapforge::losszoo {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream msg;
    msg << what << ": shape mismatch (" << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
        << b.cols() << ")";
    throw ValidationError(msg.str());
  }
}

void require_nonempty(const Matrix& m, const char* what) {
  if (m.rows() < 1 || m.cols() < 1) {
    throw ValidationError(std::string(what) + ": batch must be at least 1x1");
  }
}

void require_temperature(const ContrastiveConfig& cfg) {
  if (cfg.temperature <= 0.0) throw ValidationError("temperature must be positive");
  if (cfg.vmf_sigma <= 0.0) throw ValidationError("vmf_sigma must be positive");
}

// Softmax of one row over an index subset, shifted by the subset max.
// `keep(j)` selects participating indices.
template <typename Keep>
void masked_softmax(const Eigen::RowVectorXd& logits, Keep keep, Eigen::RowVectorXd& probs,
                    double& logsumexp) {
  const Eigen::Index n = logits.size();
  double hi = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (keep(j)) hi = std::max(hi, logits[j]);
  }
  probs.setZero(n);
  double total = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (!keep(j)) continue;
    probs[j] = std::exp(logits[j] - hi);
    total += probs[j];
  }
  probs /= total;
  logsumexp = hi + std::log(total);
}

Matrix zeros_like(const Matrix& m) { return Matrix::Zero(m.rows(), m.cols()); }

// Row-wise softmax over full rows (used by dino / arcface).
Matrix rowwise_softmax(const Matrix& logits) {
  Matrix probs(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double hi = logits.row(i).maxCoeff();
    probs.row(i) = (logits.row(i).array() - hi).exp();
    probs.row(i) /= probs.row(i).sum();
  }
  return probs;
}

}  // namespace

Matrix normalize_rows(const Matrix& z, Vector* norms_out) {
  Vector norms = z.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms[i] >= kNormFloor)) {
      throw ValidationError("embedding row " + std::to_string(i) + " has norm below " +
                            std::to_string(kNormFloor));
    }
  }
  Matrix unit = z.array().colwise() / norms.array();
  if (norms_out != nullptr) *norms_out = std::move(norms);
  return unit;
}

Matrix normalize_rows_backward(const Matrix& grad_u, const Matrix& u, const Vector& norms) {
  Matrix grad(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const double along = grad_u.row(i).dot(u.row(i));
    grad.row(i) = (grad_u.row(i) - along * u.row(i)) / norms[i];
  }
  return grad;
}

LossOutput nt_xent(const Matrix& za, const Matrix& zb, const ContrastiveConfig& cfg) {
  require_nonempty(za, "nt_xent");
  require_same_shape(za, zb, "nt_xent");
  require_temperature(cfg);
  const Eigen::Index n = za.rows();
  const Eigen::Index m = 2 * n;
  const double tau = cfg.temperature;

  Matrix stacked(m, za.cols());
  stacked << za, zb;
  Vector norms;
  const Matrix u = normalize_rows(stacked, &norms);
  const Matrix sim = u * u.transpose();

  double loss = 0.0;
  Matrix g = Matrix::Zero(m, m);
  Eigen::RowVectorXd probs;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index pos = (i + n) % m;
    const Eigen::RowVectorXd logits = sim.row(i) / tau;
    double lse = 0.0;
    masked_softmax(logits, [i](Eigen::Index j) { return j != i; }, probs, lse);
    loss += -logits[pos] + lse;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j == i) continue;
      g(i, j) = (probs[j] - (j == pos ? 1.0 : 0.0)) / (tau * static_cast<double>(m));
    }
  }
  loss /= static_cast<double>(m);

  const Matrix grad_u = (g + g.transpose()) * u;
  const Matrix grad_all = normalize_rows_backward(grad_u, u, norms);
  return LossOutput{loss, {grad_all.topRows(n), grad_all.bottomRows(n)}};
}

LossOutput nt_xent_queue(const Matrix& q, const Matrix& k_pos, const MomentumState& state,
                         const ContrastiveConfig& cfg) {
  require_nonempty(q, "nt_xent_queue");
  require_same_shape(q, k_pos, "nt_xent_queue");
  require_temperature(cfg);
  const Eigen::Index queue_rows = state.queue.rows();
  if (queue_rows > 0 && state.queue.cols() != q.cols()) {
    throw ValidationError("nt_xent_queue: queue dimension mismatch");
  }
  const double tau = cfg.temperature;
  const Eigen::Index n = q.rows();

  Vector q_norms;
  const Matrix uq = normalize_rows(q, &q_norms);
  const Matrix uk = normalize_rows(k_pos);
  Matrix un;
  if (queue_rows > 0) un = normalize_rows(state.queue);

  double loss = 0.0;
  Matrix grad_uq = Matrix::Zero(n, q.cols());
  Eigen::RowVectorXd probs;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::RowVectorXd logits(1 + queue_rows);
    logits[0] = uq.row(i).dot(uk.row(i)) / tau;
    for (Eigen::Index mrow = 0; mrow < queue_rows; ++mrow) {
      logits[1 + mrow] = uq.row(i).dot(un.row(mrow)) / tau;
    }
    double lse = 0.0;
    masked_softmax(logits, [](Eigen::Index) { return true; }, probs, lse);
    loss += -logits[0] + lse;

    grad_uq.row(i) += (probs[0] - 1.0) / tau * uk.row(i);
    for (Eigen::Index mrow = 0; mrow < queue_rows; ++mrow) {
      grad_uq.row(i) += probs[1 + mrow] / tau * un.row(mrow);
    }
  }
  loss /= static_cast<double>(n);
  grad_uq /= static_cast<double>(n);

  const Matrix grad_q = normalize_rows_backward(grad_uq, uq, q_norms);
  return LossOutput{loss, {grad_q, zeros_like(k_pos), Matrix::Zero(queue_rows, state.queue.cols())}};
}

LossOutput dclw(const Matrix& za, const Matrix& zb, const ContrastiveConfig& cfg) {
  require_nonempty(za, "dclw");
  require_same_shape(za, zb, "dclw");
  require_temperature(cfg);
  const Eigen::Index n = za.rows();
  if (n < 2) throw ValidationError("dclw needs a batch of at least 2 (no negatives otherwise)");
  const Eigen::Index m = 2 * n;
  const double tau = cfg.temperature;
  const double sigma = cfg.vmf_sigma;

  Matrix stacked(m, za.cols());
  stacked << za, zb;
  Vector norms;
  const Matrix u = normalize_rows(stacked, &norms);
  const Matrix sim = u * u.transpose();

  // von Mises-Fisher weights over the batch of positive similarities
  Vector pos_sim(n);
  for (Eigen::Index i = 0; i < n; ++i) pos_sim[i] = sim(i, i + n);
  Vector soft(n);
  {
    const double hi = (pos_sim / sigma).maxCoeff();
    soft = ((pos_sim / sigma).array() - hi).exp();
    soft /= soft.sum();
  }
  const Vector weights = 2.0 - static_cast<double>(n) * soft.array();

  double loss = 0.0;
  Matrix g = Matrix::Zero(m, m);
  Eigen::RowVectorXd probs;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index pos = (i + n) % m;
    const double w = weights[i % n];
    const Eigen::RowVectorXd logits = sim.row(i) / tau;
    double lse = 0.0;
    masked_softmax(logits, [i, pos](Eigen::Index j) { return j != i && j != pos; }, probs, lse);
    loss += -w * logits[pos] + lse;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j == i || j == pos) continue;
      g(i, j) = probs[j] / (tau * static_cast<double>(m));
    }
  }
  loss /= static_cast<double>(m);

  Matrix grad_u = (g + g.transpose()) * u;

  // positive term, including the weight's dependence on the similarities
  const double mean_pos = soft.dot(pos_sim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double dpos = -(weights[i] - static_cast<double>(n) / sigma * soft[i] * (pos_sim[i] - mean_pos)) /
                        (static_cast<double>(n) * tau);
    grad_u.row(i) += dpos * u.row(i + n);
    grad_u.row(i + n) += dpos * u.row(i);
  }

  const Matrix grad_all = normalize_rows_backward(grad_u, u, norms);
  return LossOutput{loss, {grad_all.topRows(n), grad_all.bottomRows(n)}};
}

LossOutput barlow_twins(const Matrix& za, const Matrix& zb, const BarlowConfig& cfg) {
  require_nonempty(za, "barlow_twins");
  require_same_shape(za, zb, "barlow_twins");
  if (cfg.lambda < 0.0) throw ValidationError("barlow lambda must be nonnegative");
  const Eigen::Index n = za.rows();
  const Eigen::Index d = za.cols();
  if (n < 2) throw ValidationError("barlow_twins needs a batch of at least 2 to standardize");

  const auto standardize = [n](const Matrix& z, Matrix& out, Vector& inv_std) {
    out.resize(z.rows(), z.cols());
    inv_std.resize(z.cols());
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const double mean = z.col(c).mean();
      const double var = (z.col(c).array() - mean).square().sum() / static_cast<double>(n);
      const double stddev = std::sqrt(var + kStandardizeEps);
      out.col(c) = (z.col(c).array() - mean) / stddev;
      inv_std[c] = 1.0 / stddev;
    }
  };

  Matrix ya, yb;
  Vector inv_std_a, inv_std_b;
  standardize(za, ya, inv_std_a);
  standardize(zb, yb, inv_std_b);

  const Matrix c = ya.transpose() * yb / static_cast<double>(n);

  double loss = 0.0;
  Matrix gc(d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    for (Eigen::Index k = 0; k < d; ++k) {
      if (j == k) {
        loss += (1.0 - c(j, j)) * (1.0 - c(j, j));
        gc(j, j) = -2.0 * (1.0 - c(j, j));
      } else {
        loss += cfg.lambda * c(j, k) * c(j, k);
        gc(j, k) = 2.0 * cfg.lambda * c(j, k);
      }
    }
  }

  const Matrix grad_ya = yb * gc.transpose() / static_cast<double>(n);
  const Matrix grad_yb = ya * gc / static_cast<double>(n);

  // standardization backward, per column (biased variance)
  const auto standardize_backward = [n](const Matrix& grad_y, const Matrix& y, const Vector& inv_std) {
    Matrix grad(y.rows(), y.cols());
    for (Eigen::Index col = 0; col < y.cols(); ++col) {
      const double grad_mean = grad_y.col(col).mean();
      const double proj = grad_y.col(col).dot(y.col(col)) / static_cast<double>(n);
      grad.col(col) = inv_std[col] * (grad_y.col(col).array() - grad_mean - y.col(col).array() * proj);
    }
    return grad;
  };

  return LossOutput{loss, {standardize_backward(grad_ya, ya, inv_std_a),
                           standardize_backward(grad_yb, yb, inv_std_b)}};
}

LossOutput negative_cosine(const Matrix& p, const Matrix& z_target) {
  require_nonempty(p, "negative_cosine");
  require_same_shape(p, z_target, "negative_cosine");
  const Eigen::Index n = p.rows();

  Vector p_norms;
  const Matrix up = normalize_rows(p, &p_norms);
  const Matrix ut = normalize_rows(z_target);

  const double loss = -(up.array() * ut.array()).rowwise().sum().mean();
  const Matrix grad_up = -ut / static_cast<double>(n);
  return LossOutput{loss, {normalize_rows_backward(grad_up, up, p_norms), zeros_like(z_target)}};
}

LossOutput byol(const Matrix& pa, const Matrix& zb_target, const Matrix& pb, const Matrix& za_target) {
  LossOutput first = negative_cosine(pa, zb_target);
  LossOutput second = negative_cosine(pb, za_target);
  return LossOutput{first.value + second.value,
                    {std::move(first.grads[0]), zeros_like(zb_target), std::move(second.grads[0]),
                     zeros_like(za_target)}};
}

LossOutput fastsiam(const Matrix& p, const std::vector<Matrix>& targets) {
  require_nonempty(p, "fastsiam");
  if (targets.empty()) throw ValidationError("fastsiam needs at least one target view");
  for (const Matrix& t : targets) require_same_shape(p, t, "fastsiam");
  const Eigen::Index n = p.rows();

  Matrix mean_target = Matrix::Zero(p.rows(), p.cols());
  for (const Matrix& t : targets) mean_target += normalize_rows(t);
  mean_target /= static_cast<double>(targets.size());

  Vector p_norms;
  const Matrix up = normalize_rows(p, &p_norms);
  const double loss = -(up.array() * mean_target.array()).rowwise().sum().mean();

  const Matrix grad_up = -mean_target / static_cast<double>(n);
  LossOutput out{loss, {normalize_rows_backward(grad_up, up, p_norms)}};
  for (const Matrix& t : targets) out.grads.push_back(zeros_like(t));
  return out;
}

DinoResult dino(const std::vector<Matrix>& student_logits, const std::vector<Matrix>& teacher_logits,
                const DinoConfig& cfg) {
  if (cfg.student_temp <= 0.0 || cfg.teacher_temp <= 0.0) {
    throw ValidationError("dino temperatures must be positive");
  }
  if (teacher_logits.empty() || student_logits.size() < 2) {
    throw ValidationError("dino needs at least 2 student views and 1 teacher view");
  }
  if (teacher_logits.size() > student_logits.size()) {
    throw ValidationError("teacher views must be the leading subset of student views");
  }
  const Eigen::Index n = student_logits.front().rows();
  const Eigen::Index k = student_logits.front().cols();
  if (cfg.center.size() != k) {
    throw ValidationError("dino center length does not match logit dimension");
  }
  for (const Matrix& view : student_logits) {
    if (view.rows() != n || view.cols() != k) throw ValidationError("dino: student view shape mismatch");
  }
  for (const Matrix& view : teacher_logits) {
    if (view.rows() != n || view.cols() != k) throw ValidationError("dino: teacher view shape mismatch");
  }

  std::vector<Matrix> teacher_probs;
  teacher_probs.reserve(teacher_logits.size());
  for (const Matrix& view : teacher_logits) {
    teacher_probs.push_back(rowwise_softmax((view.rowwise() - cfg.center.transpose()) / cfg.teacher_temp));
  }

  std::vector<Matrix> student_probs;
  std::vector<Matrix> student_logsoft;
  student_probs.reserve(student_logits.size());
  student_logsoft.reserve(student_logits.size());
  for (const Matrix& view : student_logits) {
    const Matrix scaled = view / cfg.student_temp;
    Matrix probs(n, k), logsoft(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double hi = scaled.row(i).maxCoeff();
      const Eigen::RowVectorXd shifted = scaled.row(i).array() - hi;
      const Eigen::RowVectorXd expo = shifted.array().exp();
      const double total = expo.sum();
      probs.row(i) = expo / total;
      logsoft.row(i) = shifted.array() - std::log(total);
    }
    student_probs.push_back(std::move(probs));
    student_logsoft.push_back(std::move(logsoft));
  }

  double loss = 0.0;
  std::size_t pair_count = 0;
  std::vector<Matrix> grads(student_logits.size());
  for (std::size_t s = 0; s < student_logits.size(); ++s) grads[s] = Matrix::Zero(n, k);

  for (std::size_t t = 0; t < teacher_logits.size(); ++t) {
    for (std::size_t s = 0; s < student_logits.size(); ++s) {
      if (s == t) continue;
      loss += -(teacher_probs[t].array() * student_logsoft[s].array()).sum() / static_cast<double>(n);
      grads[s] += (student_probs[s] - teacher_probs[t]) / cfg.student_temp;
      ++pair_count;
    }
  }
  loss /= static_cast<double>(pair_count);
  for (Matrix& g : grads) g /= static_cast<double>(pair_count) * static_cast<double>(n);

  Vector teacher_mean = Vector::Zero(k);
  for (const Matrix& view : teacher_logits) teacher_mean += view.colwise().mean().transpose();
  teacher_mean /= static_cast<double>(teacher_logits.size());
  Vector new_center = cfg.center_momentum * cfg.center + (1.0 - cfg.center_momentum) * teacher_mean;

  LossOutput out{loss, std::move(grads)};
  for (const Matrix& view : teacher_logits) out.grads.push_back(zeros_like(view));
  return DinoResult{std::move(out), std::move(new_center)};
}

Vector ema_update(const Vector& target_params, const Vector& online_params, double momentum) {
  if (target_params.size() != online_params.size()) {
    throw ValidationError("ema_update: parameter vectors differ in length");
  }
  if (!(momentum >= 0.0 && momentum <= 1.0)) {
    throw ValidationError("ema_update: momentum must lie in [0, 1]");
  }
  return momentum * target_params + (1.0 - momentum) * online_params;
}

MomentumState queue_push(const MomentumState& state, const Matrix& batch) {
  if (state.queue.rows() > 0 && batch.cols() != state.queue.cols()) {
    throw ValidationError("queue_push: batch dimension does not match queue");
  }
  MomentumState next = state;
  const Eigen::Index total = state.queue.rows() + batch.rows();
  const Eigen::Index keep = std::min<Eigen::Index>(total, static_cast<Eigen::Index>(state.capacity));
  Matrix merged(total, batch.cols());
  if (state.queue.rows() > 0) merged.topRows(state.queue.rows()) = state.queue;
  merged.bottomRows(batch.rows()) = batch;
  next.queue = merged.bottomRows(keep);
  return next;
}

LossOutput arcface(const Matrix& z, const std::vector<int>& labels, const Matrix& class_centers,
                   const SupervisedConfig& cfg) {
  require_nonempty(z, "arcface");
  require_nonempty(class_centers, "arcface centers");
  if (z.cols() != class_centers.cols()) throw ValidationError("arcface: embedding/center dim mismatch");
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) {
    throw ValidationError("arcface: one label per row required");
  }
  const Eigen::Index n = z.rows();
  const Eigen::Index num_classes = class_centers.rows();
  for (const int label : labels) {
    if (label < 0 || label >= num_classes) {
      throw ValidationError("arcface: label " + std::to_string(label) + " out of range [0, " +
                            std::to_string(num_classes) + ")");
    }
  }
  if (cfg.arcface_scale <= 0.0) throw ValidationError("arcface scale must be positive");
  if (!(cfg.arcface_margin >= 0.0 && cfg.arcface_margin < 1.5707963267948966)) {
    throw ValidationError("arcface margin must lie in [0, pi/2)");
  }

  Vector z_norms, c_norms;
  const Matrix uz = normalize_rows(z, &z_norms);
  const Matrix uc = normalize_rows(class_centers, &c_norms);
  const Matrix cosine = uz * uc.transpose();

  const double cos_m = std::cos(cfg.arcface_margin);
  const double sin_m = std::sin(cfg.arcface_margin);
  const double lo = -1.0 + kAcosClip;
  const double hi = 1.0 - kAcosClip;

  // cos(theta + m) via the trig expansion; the arccos clip only enters the
  // sine term, so margin 0 reduces exactly to scaled-cosine cross-entropy.
  Matrix logits = cfg.arcface_scale * cosine;
  Vector margin_slope(n);  // d(target logit)/d(cos theta_y)
  for (Eigen::Index i = 0; i < n; ++i) {
    const double raw = cosine(i, labels[i]);
    const double clipped = std::clamp(raw, lo, hi);
    const double sin_t = std::sqrt(1.0 - clipped * clipped);
    logits(i, labels[i]) = cfg.arcface_scale * (raw * cos_m - sin_t * sin_m);
    const bool saturated = raw < lo || raw > hi;
    margin_slope[i] =
        cfg.arcface_scale * (cos_m + (saturated ? 0.0 : clipped / sin_t * sin_m));
  }

  const Matrix probs = rowwise_softmax(logits);
  double loss = 0.0;
  Matrix grad_cos(n, num_classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double hi_logit = logits.row(i).maxCoeff();
    loss += std::log((logits.row(i).array() - hi_logit).exp().sum()) + hi_logit - logits(i, labels[i]);
    for (Eigen::Index j = 0; j < num_classes; ++j) {
      const double dlogit = (probs(i, j) - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
      grad_cos(i, j) = dlogit * (j == labels[i] ? margin_slope[i] : cfg.arcface_scale);
    }
  }
  loss /= static_cast<double>(n);

  const Matrix grad_uz = grad_cos * uc;
  const Matrix grad_uc = grad_cos.transpose() * uz;
  return LossOutput{loss, {normalize_rows_backward(grad_uz, uz, z_norms),
                           normalize_rows_backward(grad_uc, uc, c_norms)}};
}

LossOutput triplet(const Matrix& anchor, const Matrix& positive, const Matrix& negative,
                   const SupervisedConfig& cfg) {
  require_nonempty(anchor, "triplet");
  require_same_shape(anchor, positive, "triplet");
  require_same_shape(anchor, negative, "triplet");
  if (cfg.triplet_margin < 0.0) throw ValidationError("triplet margin must be nonnegative");
  const Eigen::Index n = anchor.rows();

  Vector a_norms, p_norms, n_norms;
  const Matrix ua = normalize_rows(anchor, &a_norms);
  const Matrix up = normalize_rows(positive, &p_norms);
  const Matrix un = normalize_rows(negative, &n_norms);

  double loss = 0.0;
  Matrix grad_ua = Matrix::Zero(n, anchor.cols());
  Matrix grad_up = Matrix::Zero(n, anchor.cols());
  Matrix grad_un = Matrix::Zero(n, anchor.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd diff_ap = ua.row(i) - up.row(i);
    const Eigen::RowVectorXd diff_an = ua.row(i) - un.row(i);
    const double d_ap = diff_ap.norm();
    const double d_an = diff_an.norm();
    const double hinge = d_ap - d_an + cfg.triplet_margin;
    if (hinge <= 0.0) continue;  // one-sided subgradient at the kink
    loss += hinge;
    if (d_ap > kNormFloor) {
      grad_ua.row(i) += diff_ap / d_ap;
      grad_up.row(i) -= diff_ap / d_ap;
    }
    if (d_an > kNormFloor) {
      grad_ua.row(i) -= diff_an / d_an;
      grad_un.row(i) += diff_an / d_an;
    }
  }
  const double scale = 1.0 / static_cast<double>(n);
  loss *= scale;
  grad_ua *= scale;
  grad_up *= scale;
  grad_un *= scale;

  return LossOutput{loss, {normalize_rows_backward(grad_ua, ua, a_norms),
                           normalize_rows_backward(grad_up, up, p_norms),
                           normalize_rows_backward(grad_un, un, n_norms)}};
}

LossOutput supcon(const Matrix& z, const std::vector<int>& labels, const ContrastiveConfig& cfg) {
  require_nonempty(z, "supcon");
  require_temperature(cfg);
  const Eigen::Index n = z.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw ValidationError("supcon: one label per row required");
  }
  if (n < 2) throw ValidationError("supcon needs a batch of at least 2");

  std::vector<std::vector<Eigen::Index>> positives(n);
  std::set<int> lonely;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i && labels[j] == labels[i]) positives[i].push_back(j);
    }
    if (positives[i].empty()) lonely.insert(labels[i]);
  }
  if (!lonely.empty()) {
    std::ostringstream msg;
    msg << "supcon: anchors with no positive for labels {";
    bool first = true;
    for (const int label : lonely) {
      if (!first) msg << ", ";
      msg << label;
      first = false;
    }
    msg << "}";
    throw ValidationError(msg.str());
  }

  const double tau = cfg.temperature;
  Vector norms;
  const Matrix u = normalize_rows(z, &norms);
  const Matrix sim = u * u.transpose();

  double loss = 0.0;
  Matrix g = Matrix::Zero(n, n);
  Eigen::RowVectorXd probs;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd logits = sim.row(i) / tau;
    double lse = 0.0;
    masked_softmax(logits, [i](Eigen::Index j) { return j != i; }, probs, lse);
    const double inv_pos = 1.0 / static_cast<double>(positives[i].size());
    double mean_pos_logit = 0.0;
    for (const Eigen::Index p : positives[i]) mean_pos_logit += logits[p];
    mean_pos_logit *= inv_pos;
    loss += -mean_pos_logit + lse;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool is_pos = labels[j] == labels[i];
      g(i, j) = (probs[j] - (is_pos ? inv_pos : 0.0)) / (tau * static_cast<double>(n));
    }
  }
  loss /= static_cast<double>(n);

  const Matrix grad_u = (g + g.transpose()) * u;
  return LossOutput{loss, {normalize_rows_backward(grad_u, u, norms)}};
}

GradCheckReport grad_check(const LossFn& loss, const std::vector<Matrix>& inputs,
                           const std::vector<bool>& stop_gradient, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw ValidationError("grad_check: eps must lie in [1e-7, 1e-4]");
  }
  if (inputs.size() != stop_gradient.size()) {
    throw ValidationError("grad_check: one stop_gradient flag per input required");
  }

  const LossOutput base = loss(inputs);
  if (!std::isfinite(base.value)) throw ValidationError("grad_check: loss is non-finite at the base point");
  if (base.grads.size() != inputs.size()) {
    throw ValidationError("grad_check: loss reported a gradient count different from its input count");
  }

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!stop_gradient[k]) continue;
    for (Eigen::Index r = 0; r < base.grads[k].rows(); ++r) {
      for (Eigen::Index c = 0; c < base.grads[k].cols(); ++c) {
        if (base.grads[k](r, c) != 0.0) {
          return GradCheckReport{std::numeric_limits<double>::infinity(), static_cast<int>(k), r, c};
        }
      }
    }
  }

  std::vector<Matrix> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (stop_gradient[k]) continue;
    for (Eigen::Index r = 0; r < inputs[k].rows(); ++r) {
      for (Eigen::Index c = 0; c < inputs[k].cols(); ++c) {
        const double saved = probe[k](r, c);
        probe[k](r, c) = saved + eps;
        const double up = loss(probe).value;
        probe[k](r, c) = saved - eps;
        const double down = loss(probe).value;
        probe[k](r, c) = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
          throw ValidationError("grad_check: loss is non-finite at a perturbed point");
        }
        const double numeric = (up - down) / (2.0 * eps);
        const double analytic = base.grads[k](r, c);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        const double rel = std::abs(analytic - numeric) / denom;
        if (rel > report.max_rel_error) {
          report = GradCheckReport{rel, static_cast<int>(k), r, c};
        }
      }
    }
  }
  return report;
}

const std::vector<std::string>& loss_methods() {
  static const std::vector<std::string> kMethods = {"simclr_dclw", "ntxent", "moco",    "barlow",
                                                    "byol",        "fastsiam", "dino",  "arcface",
                                                    "triplet",     "supcon"};
  return kMethods;
}

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * rng.gaussian();
  }
  return m;
}

}  // namespace

GradCheckProblem make_gradcheck_problem(const std::string& method, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  const Eigen::Index n = 4;
  const Eigen::Index d = 8;

  if (method == "ntxent") {
    return GradCheckProblem{{random_matrix(rng, n, d), random_matrix(rng, n, d)},
                            {false, false},
                            [](const std::vector<Matrix>& in) { return nt_xent(in[0], in[1], {}); }};
  }
  if (method == "simclr_dclw") {
    return GradCheckProblem{{random_matrix(rng, n, d), random_matrix(rng, n, d)},
                            {false, false},
                            [](const std::vector<Matrix>& in) { return dclw(in[0], in[1], {}); }};
  }
  if (method == "moco") {
    return GradCheckProblem{{random_matrix(rng, n, d), random_matrix(rng, n, d), random_matrix(rng, 16, d)},
                            {false, true, true},
                            [](const std::vector<Matrix>& in) {
                              MomentumState state;
                              state.queue = in[2];
                              state.capacity = 4096;
                              return nt_xent_queue(in[0], in[1], state, {});
                            }};
  }
  if (method == "barlow") {
    return GradCheckProblem{{random_matrix(rng, 6, 4), random_matrix(rng, 6, 4)},
                            {false, false},
                            [](const std::vector<Matrix>& in) { return barlow_twins(in[0], in[1], {}); }};
  }
  if (method == "byol") {
    return GradCheckProblem{{random_matrix(rng, n, d), random_matrix(rng, n, d), random_matrix(rng, n, d),
                             random_matrix(rng, n, d)},
                            {false, true, false, true},
                            [](const std::vector<Matrix>& in) { return byol(in[0], in[1], in[2], in[3]); }};
  }
  if (method == "fastsiam") {
    return GradCheckProblem{{random_matrix(rng, n, d), random_matrix(rng, n, d), random_matrix(rng, n, d),
                             random_matrix(rng, n, d)},
                            {false, true, true, true},
                            [](const std::vector<Matrix>& in) {
                              return fastsiam(in[0], {in[1], in[2], in[3]});
                            }};
  }
  if (method == "dino") {
    // moderate temperatures keep the softmax away from saturation, where
    // central differences lose accuracy to cancellation
    const Eigen::Index k = 8;
    DinoConfig cfg;
    cfg.student_temp = 0.5;
    cfg.teacher_temp = 0.3;
    cfg.center = random_matrix(rng, k, 1).col(0) * 0.1;
    std::vector<Matrix> inputs;
    for (int v = 0; v < 4; ++v) inputs.push_back(random_matrix(rng, 3, k, 0.5));  // student views
    for (int v = 0; v < 2; ++v) inputs.push_back(random_matrix(rng, 3, k, 0.5));  // teacher views
    return GradCheckProblem{std::move(inputs),
                            {false, false, false, false, true, true},
                            [cfg](const std::vector<Matrix>& in) {
                              return dino({in[0], in[1], in[2], in[3]}, {in[4], in[5]}, cfg).loss;
                            }};
  }
  if (method == "arcface") {
    const Eigen::Index num_classes = 3;
    std::vector<int> labels(n);
    for (Eigen::Index i = 0; i < n; ++i) labels[i] = static_cast<int>(rng.index(num_classes));
    SupervisedConfig cfg;
    cfg.arcface_scale = 8.0;  // production-scale 64 saturates the softmax beyond FD resolution
    cfg.arcface_margin = 0.4;
    return GradCheckProblem{{random_matrix(rng, n, d), random_matrix(rng, num_classes, d)},
                            {false, false},
                            [labels, cfg](const std::vector<Matrix>& in) {
                              return arcface(in[0], labels, in[1], cfg);
                            }};
  }
  if (method == "triplet") {
    // resample until every row is clear of the hinge kink
    for (int attempt = 0; attempt < 256; ++attempt) {
      Matrix a = random_matrix(rng, n, d);
      Matrix p = random_matrix(rng, n, d);
      Matrix neg = random_matrix(rng, n, d);
      const LossOutput probe = triplet(a, p, neg, {});
      bool safe = true;
      const Matrix ua = normalize_rows(a), up = normalize_rows(p), un = normalize_rows(neg);
      for (Eigen::Index i = 0; i < n && safe; ++i) {
        const double hinge =
            (ua.row(i) - up.row(i)).norm() - (ua.row(i) - un.row(i)).norm() + SupervisedConfig{}.triplet_margin;
        if (std::abs(hinge) < 1e-3) safe = false;
      }
      (void)probe;
      if (!safe) continue;
      return GradCheckProblem{{std::move(a), std::move(p), std::move(neg)},
                              {false, false, false},
                              [](const std::vector<Matrix>& in) { return triplet(in[0], in[1], in[2], {}); }};
    }
    throw ValidationError("triplet grad-check fixture: could not find a kink-free sample");
  }
  if (method == "supcon") {
    const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
    return GradCheckProblem{{random_matrix(rng, 6, d)},
                            {false},
                            [labels](const std::vector<Matrix>& in) { return supcon(in[0], labels, {}); }};
  }
  throw ValidationError("unknown loss method \"" + method + "\"");
}

}  // namespace trapforge::losszoo
