#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace trapforge::evalkit {

using Matrix = Eigen::MatrixXd;
using IntMatrix = Eigen::MatrixXi;

// Embedding database with unit-norm rows (checked to 1e-6).
struct Gallery {
  Matrix embeddings;
  std::vector<int> labels;

  Gallery() = default;
  Gallery(Matrix embeddings, std::vector<int> labels);  // validates

  // Normalizes raw rows first (errors on rows with vanishing norm).
  static Gallery normalized(Matrix raw, std::vector<int> labels);
};

struct KnnConfig {
  int k = 200;
  double temperature = 0.07;
};

struct ProbeConfig {
  double learning_rate = 1.0;
  int epochs = 200;
  std::uint64_t seed = 0;
};

// Mean over relevant ranks r of (#relevant in top r) / r. The list is the
// ranked relevance of one query; it must contain at least one relevant item.
double average_precision(const std::vector<int>& relevance);

struct MapResult {
  double map = 0.0;
  std::size_t queries_used = 0;
  std::size_t queries_excluded = 0;  // queries whose label has no other instance
};

// Core ranking: rows of `scores` are queries, columns gallery items; ties
// break toward the smaller gallery index. With exclude_diagonal the item
// sharing the query's index is dropped (leave-one-out). Queries left with no
// relevant item are excluded and counted.
MapResult map_from_scores(const Matrix& scores, const std::vector<int>& query_labels,
                          const std::vector<int>& gallery_labels, bool exclude_diagonal);

// Leave-one-out retrieval over one labeled set: every item queries the rest.
MapResult retrieval_map_loo(const Gallery& gallery);

// Split protocol; every query label must occur in the gallery.
MapResult retrieval_map(const Gallery& queries, const Gallery& gallery);

struct KnnResult {
  std::vector<int> predictions;
  double top1 = 0.0;
  int effective_k = 0;
};

// Weighted kNN vote: class score is the sum of exp(cosine / temperature)
// over the top-k neighbours carrying that class; k is clamped to the train
// size; prediction ties go to the smaller class id.
KnnResult weighted_knn(const Gallery& train, const Gallery& test, const KnnConfig& cfg);

// Same vote over a single set, each item classified by the others
// (k clamps to N-1).
KnnResult weighted_knn_loo(const Gallery& gallery, const KnnConfig& cfg);

// Multinomial logistic regression on frozen embeddings, full-batch gradient
// descent, seeded init scale 0.01; returns test top-1 accuracy.
double linear_probe(const Gallery& train, const Gallery& test, const ProbeConfig& cfg);

// Mean over attributes of the per-attribute exact-match rate.
double multilabel_accuracy(const IntMatrix& pred, const IntMatrix& truth);

// Keypoints as N x 2J matrices of (x, y) pairs; visibility N x J.
// Fraction of visible keypoints within Euclidean distance `threshold`.
double pck(const Matrix& pred, const Matrix& truth, const IntMatrix& visibility, double threshold);

// Mean per-class IoU over the classes present in pred or truth.
double miou(const std::vector<int>& pred, const std::vector<int>& truth, int num_classes);

// ---------------------------------------------------------------------------
// File formats

// Embedding CSV: header "id,label,e0,...,e{d-1}". Returns raw (unnormalized)
// rows plus parallel ids/labels.
struct EmbeddingTable {
  std::vector<std::int64_t> ids;
  std::vector<int> labels;
  Matrix embeddings;
};
EmbeddingTable read_embeddings_csv(std::string_view text);

struct EvalReport {
  std::map<std::string, double> metrics;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> digests;
};
std::string write_eval_report(const EvalReport& report);
EvalReport read_eval_report(std::string_view text);

}  // namespace trapforge::evalkit
