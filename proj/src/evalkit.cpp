#include "trapforge/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "trapforge/errors.hpp"
#include "trapforge/rng.hpp"

namespace trapforge::evalkit {

using nlohmann::json;

namespace {

constexpr double kUnitNormTolerance = 1e-6;

void check_labels(const Matrix& embeddings, const std::vector<int>& labels) {
  if (embeddings.rows() < 1) throw ValidationError("gallery must contain at least one row");
  if (static_cast<Eigen::Index>(labels.size()) != embeddings.rows()) {
    throw ValidationError("gallery needs one label per embedding row");
  }
}

}  // namespace

Gallery::Gallery(Matrix embeddings_in, std::vector<int> labels_in) {
  check_labels(embeddings_in, labels_in);
  for (Eigen::Index i = 0; i < embeddings_in.rows(); ++i) {
    if (std::abs(embeddings_in.row(i).norm() - 1.0) > kUnitNormTolerance) {
      throw ValidationError("gallery row " + std::to_string(i) + " is not unit norm");
    }
  }
  embeddings = std::move(embeddings_in);
  labels = std::move(labels_in);
}

Gallery Gallery::normalized(Matrix raw, std::vector<int> labels_in) {
  check_labels(raw, labels_in);
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double norm = raw.row(i).norm();
    if (!(norm >= 1e-12)) {
      throw ValidationError("embedding row " + std::to_string(i) + " has vanishing norm");
    }
    raw.row(i) /= norm;
  }
  Gallery g;
  g.embeddings = std::move(raw);
  g.labels = std::move(labels_in);
  return g;
}

double average_precision(const std::vector<int>& relevance) {
  if (relevance.empty()) throw ValidationError("average_precision: empty ranking");
  double sum = 0.0;
  int hits = 0;
  for (std::size_t rank = 0; rank < relevance.size(); ++rank) {
    if (relevance[rank] != 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) throw ValidationError("average_precision: no relevant item in the ranking");
  return sum / hits;
}

MapResult map_from_scores(const Matrix& scores, const std::vector<int>& query_labels,
                          const std::vector<int>& gallery_labels, bool exclude_diagonal) {
  if (scores.rows() != static_cast<Eigen::Index>(query_labels.size()) ||
      scores.cols() != static_cast<Eigen::Index>(gallery_labels.size())) {
    throw ValidationError("map_from_scores: score matrix does not match the label vectors");
  }
  if (exclude_diagonal && scores.rows() != scores.cols()) {
    throw ValidationError("map_from_scores: diagonal exclusion requires a square score matrix");
  }

  MapResult result;
  double total = 0.0;
  std::vector<Eigen::Index> order(gallery_labels.size());
  for (Eigen::Index q = 0; q < scores.rows(); ++q) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      if (scores(q, a) != scores(q, b)) return scores(q, a) > scores(q, b);
      return a < b;
    });
    std::vector<int> relevance;
    relevance.reserve(order.size());
    bool any_relevant = false;
    for (const Eigen::Index g : order) {
      if (exclude_diagonal && g == q) continue;
      const bool relevant = gallery_labels[static_cast<std::size_t>(g)] ==
                            query_labels[static_cast<std::size_t>(q)];
      relevance.push_back(relevant ? 1 : 0);
      any_relevant = any_relevant || relevant;
    }
    if (!any_relevant) {
      ++result.queries_excluded;
      continue;
    }
    total += average_precision(relevance);
    ++result.queries_used;
  }
  if (result.queries_used == 0) {
    throw ValidationError("map_from_scores: no query had a relevant gallery item");
  }
  result.map = total / static_cast<double>(result.queries_used);
  return result;
}

MapResult retrieval_map_loo(const Gallery& gallery) {
  const Matrix scores = gallery.embeddings * gallery.embeddings.transpose();
  return map_from_scores(scores, gallery.labels, gallery.labels, /*exclude_diagonal=*/true);
}

MapResult retrieval_map(const Gallery& queries, const Gallery& gallery) {
  if (queries.embeddings.cols() != gallery.embeddings.cols()) {
    throw ValidationError("retrieval_map: embedding dimensions differ");
  }
  const std::set<int> gallery_label_set(gallery.labels.begin(), gallery.labels.end());
  for (const int label : queries.labels) {
    if (!gallery_label_set.contains(label)) {
      throw ValidationError("retrieval_map: query label " + std::to_string(label) +
                            " absent from the gallery");
    }
  }
  const Matrix scores = queries.embeddings * gallery.embeddings.transpose();
  return map_from_scores(scores, queries.labels, gallery.labels, /*exclude_diagonal=*/false);
}

namespace {

KnnResult knn_from_similarity(const Matrix& sim, const std::vector<int>& train_labels,
                              const std::vector<int>& test_labels, const KnnConfig& cfg,
                              bool exclude_diagonal) {
  const Eigen::Index n_train = sim.cols();
  const Eigen::Index candidates = exclude_diagonal ? n_train - 1 : n_train;
  if (candidates < 1) throw ValidationError("weighted_knn: no candidate neighbours");
  const int effective_k = static_cast<int>(std::min<Eigen::Index>(cfg.k, candidates));

  KnnResult result;
  result.effective_k = effective_k;
  result.predictions.reserve(static_cast<std::size_t>(sim.rows()));
  std::size_t correct = 0;

  std::vector<Eigen::Index> order;
  order.reserve(static_cast<std::size_t>(n_train));
  for (Eigen::Index t = 0; t < sim.rows(); ++t) {
    order.clear();
    for (Eigen::Index g = 0; g < n_train; ++g) {
      if (exclude_diagonal && g == t) continue;
      order.push_back(g);
    }
    std::partial_sort(order.begin(), order.begin() + effective_k, order.end(),
                      [&](Eigen::Index a, Eigen::Index b) {
                        if (sim(t, a) != sim(t, b)) return sim(t, a) > sim(t, b);
                        return a < b;
                      });
    std::map<int, double> class_scores;
    for (int rank = 0; rank < effective_k; ++rank) {
      const Eigen::Index neighbor = order[static_cast<std::size_t>(rank)];
      class_scores[train_labels[static_cast<std::size_t>(neighbor)]] +=
          std::exp(sim(t, neighbor) / cfg.temperature);
    }
    int best_class = class_scores.begin()->first;
    double best_score = class_scores.begin()->second;
    for (const auto& [cls, score] : class_scores) {
      if (score > best_score) {  // ties keep the smaller class id (map order)
        best_class = cls;
        best_score = score;
      }
    }
    result.predictions.push_back(best_class);
    if (best_class == test_labels[static_cast<std::size_t>(t)]) ++correct;
  }
  result.top1 = static_cast<double>(correct) / static_cast<double>(sim.rows());
  return result;
}

}  // namespace

KnnResult weighted_knn(const Gallery& train, const Gallery& test, const KnnConfig& cfg) {
  if (cfg.k < 1) throw ValidationError("weighted_knn: k must be at least 1");
  if (cfg.temperature <= 0.0) throw ValidationError("weighted_knn: temperature must be positive");
  if (train.embeddings.cols() != test.embeddings.cols()) {
    throw ValidationError("weighted_knn: embedding dimensions differ");
  }
  const Matrix sim = test.embeddings * train.embeddings.transpose();
  return knn_from_similarity(sim, train.labels, test.labels, cfg, /*exclude_diagonal=*/false);
}

KnnResult weighted_knn_loo(const Gallery& gallery, const KnnConfig& cfg) {
  if (cfg.k < 1) throw ValidationError("weighted_knn: k must be at least 1");
  if (cfg.temperature <= 0.0) throw ValidationError("weighted_knn: temperature must be positive");
  const Matrix sim = gallery.embeddings * gallery.embeddings.transpose();
  return knn_from_similarity(sim, gallery.labels, gallery.labels, cfg, /*exclude_diagonal=*/true);
}

double linear_probe(const Gallery& train, const Gallery& test, const ProbeConfig& cfg) {
  if (cfg.learning_rate <= 0.0) throw ValidationError("linear_probe: learning rate must be positive");
  if (cfg.epochs < 1) throw ValidationError("linear_probe: epochs must be at least 1");
  if (train.embeddings.cols() != test.embeddings.cols()) {
    throw ValidationError("linear_probe: embedding dimensions differ");
  }

  std::vector<int> classes(train.labels.begin(), train.labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw ValidationError("linear_probe: train set has a single class");
  std::map<int, int> class_index;
  for (std::size_t i = 0; i < classes.size(); ++i) class_index[classes[i]] = static_cast<int>(i);
  for (const int label : test.labels) {
    if (!class_index.contains(label)) {
      throw ValidationError("linear_probe: test label " + std::to_string(label) +
                            " unseen in the train set");
    }
  }

  const Eigen::Index n = train.embeddings.rows();
  const Eigen::Index d = train.embeddings.cols();
  const Eigen::Index c = static_cast<Eigen::Index>(classes.size());

  Rng rng(cfg.seed);
  Matrix weights(c, d);
  for (Eigen::Index i = 0; i < c; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) weights(i, j) = 0.01 * rng.gaussian();
  }
  Eigen::VectorXd bias = Eigen::VectorXd::Zero(c);

  Matrix onehot = Matrix::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    onehot(i, class_index.at(train.labels[static_cast<std::size_t>(i)])) = 1.0;
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Matrix logits = train.embeddings * weights.transpose();
    logits.rowwise() += bias.transpose();
    Matrix probs(n, c);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double hi = logits.row(i).maxCoeff();
      probs.row(i) = (logits.row(i).array() - hi).exp();
      probs.row(i) /= probs.row(i).sum();
    }
    const Matrix delta = (probs - onehot) / static_cast<double>(n);
    weights -= cfg.learning_rate * (delta.transpose() * train.embeddings);
    bias -= cfg.learning_rate * delta.colwise().sum().transpose();
  }

  Matrix logits = test.embeddings * weights.transpose();
  logits.rowwise() += bias.transpose();
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < test.embeddings.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    if (classes[static_cast<std::size_t>(best)] == test.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.embeddings.rows());
}

double multilabel_accuracy(const IntMatrix& pred, const IntMatrix& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
    throw ValidationError("multilabel_accuracy: shape mismatch");
  }
  if (pred.rows() < 1 || pred.cols() < 1) throw ValidationError("multilabel_accuracy: empty input");
  double total = 0.0;
  for (Eigen::Index a = 0; a < pred.cols(); ++a) {
    Eigen::Index matches = 0;
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
      if (pred(i, a) == truth(i, a)) ++matches;
    }
    total += static_cast<double>(matches) / static_cast<double>(pred.rows());
  }
  return total / static_cast<double>(pred.cols());
}

double pck(const Matrix& pred, const Matrix& truth, const IntMatrix& visibility, double threshold) {
  if (threshold <= 0.0) throw ValidationError("pck: threshold must be positive");
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
    throw ValidationError("pck: keypoint shapes differ");
  }
  if (pred.cols() % 2 != 0) throw ValidationError("pck: keypoints must be (x, y) pairs");
  const Eigen::Index joints = pred.cols() / 2;
  if (visibility.rows() != pred.rows() || visibility.cols() != joints) {
    throw ValidationError("pck: visibility shape mismatch");
  }

  long long visible = 0;
  long long within = 0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    for (Eigen::Index j = 0; j < joints; ++j) {
      if (visibility(i, j) == 0) continue;
      ++visible;
      const double dx = pred(i, 2 * j) - truth(i, 2 * j);
      const double dy = pred(i, 2 * j + 1) - truth(i, 2 * j + 1);
      if (std::sqrt(dx * dx + dy * dy) <= threshold) ++within;
    }
  }
  if (visible == 0) throw ValidationError("pck: no visible keypoints");
  return static_cast<double>(within) / static_cast<double>(visible);
}

double miou(const std::vector<int>& pred, const std::vector<int>& truth, int num_classes) {
  if (pred.size() != truth.size()) throw ValidationError("miou: label maps differ in length");
  if (pred.empty()) throw ValidationError("miou: empty label maps");
  if (num_classes < 1) throw ValidationError("miou: num_classes must be positive");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= num_classes || truth[i] < 0 || truth[i] >= num_classes) {
      throw ValidationError("miou: label out of range at position " + std::to_string(i));
    }
  }

  double total = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    long long inter = 0;
    long long uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool in_pred = pred[i] == c;
      const bool in_truth = truth[i] == c;
      if (in_pred && in_truth) ++inter;
      if (in_pred || in_truth) ++uni;
    }
    if (uni == 0) continue;  // class absent from both maps
    total += static_cast<double>(inter) / static_cast<double>(uni);
    ++present;
  }
  if (present == 0) throw ValidationError("miou: no class present in either map");
  return total / present;
}

EmbeddingTable read_embeddings_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw ParseError("embedding CSV is empty");
  if (line.rfind("id,label,e0", 0) != 0) {
    throw ParseError("embedding CSV header must start with id,label,e0");
  }
  const std::size_t dims = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;

  EmbeddingTable table;
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string field;
    std::vector<std::string> parts;
    while (std::getline(fields, field, ',')) parts.push_back(field);
    if (parts.size() != dims + 2) {
      throw ParseError("embedding CSV line " + std::to_string(line_no) + " has " +
                           std::to_string(parts.size()) + " fields, expected " + std::to_string(dims + 2),
                       line_no);
    }
    try {
      table.ids.push_back(std::stoll(parts[0]));
      table.labels.push_back(std::stoi(parts[1]));
      std::vector<double> row(dims);
      for (std::size_t i = 0; i < dims; ++i) row[i] = std::stod(parts[2 + i]);
      rows.push_back(std::move(row));
    } catch (const std::exception&) {
      throw ParseError("embedding CSV line " + std::to_string(line_no) + " has a malformed number",
                       line_no);
    }
  }
  if (rows.empty()) throw ParseError("embedding CSV has no data rows");

  table.embeddings.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dims));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < dims; ++c) {
      table.embeddings(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return table;
}

std::string write_eval_report(const EvalReport& report) {
  json doc;
  doc["metrics"] = report.metrics;
  doc["config"] = report.config;
  doc["digests"] = report.digests;
  return doc.dump(2) + "\n";
}

EvalReport read_eval_report(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed eval report: ") + e.what());
  }
  EvalReport report;
  report.metrics = doc.at("metrics").get<std::map<std::string, double>>();
  report.config = doc.at("config").get<std::map<std::string, std::string>>();
  report.digests = doc.at("digests").get<std::map<std::string, std::string>>();
  return report;
}

}  // namespace trapforge::evalkit
