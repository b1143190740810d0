#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "support/oracles.hpp"
#include "trapforge/errors.hpp"
#include "trapforge/evalkit.hpp"
#include "trapforge/rng.hpp"

using namespace trapforge;
using namespace trapforge::evalkit;

namespace {

Matrix random_unit_rows(Rng& rng, Eigen::Index n, Eigen::Index d) {
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rng.gaussian();
    m.row(i) /= m.row(i).norm();
  }
  return m;
}

// two tight clusters around orthogonal axes
Gallery clustered_gallery() {
  Matrix rows(4, 3);
  rows << 1.0, 0.01, 0.0, 1.0, -0.01, 0.0, 0.0, 1.0, 0.01, 0.0, 1.0, -0.01;
  return Gallery::normalized(rows, {0, 0, 1, 1});
}

}  // namespace

TEST_CASE("average_precision spot values") {
  CHECK(average_precision({1, 1, 0}) == doctest::Approx(1.0));
  CHECK(average_precision({0, 1}) == doctest::Approx(0.5));
  CHECK(average_precision({1, 0, 1}) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
  CHECK(average_precision({1, 0, 1}) == doctest::Approx(0.833333).epsilon(1e-5));
}

TEST_CASE("average_precision rejects rankings without relevant items") {
  CHECK_THROWS_AS(average_precision({0, 0, 0}), ValidationError);
  CHECK_THROWS_AS(average_precision({}), ValidationError);
}

TEST_CASE("average_precision matches brute force on every binary list up to length 10") {
  for (int length = 1; length <= 10; ++length) {
    for (unsigned mask = 1; mask < (1u << length); ++mask) {
      std::vector<int> relevance(static_cast<std::size_t>(length));
      for (int bit = 0; bit < length; ++bit) relevance[static_cast<std::size_t>(bit)] = (mask >> bit) & 1u;
      CHECK(average_precision(relevance) == doctest::Approx(oracles::average_precision(relevance)).epsilon(1e-15));
    }
  }
}

TEST_CASE("retrieval_map: perfectly clustered labels score 1.0") {
  const Gallery gallery = clustered_gallery();
  const MapResult result = retrieval_map_loo(gallery);
  CHECK(result.map == doctest::Approx(1.0));
  CHECK(result.queries_used == 4);
  CHECK(result.queries_excluded == 0);
}

TEST_CASE("retrieval_map: single query with its match ranked last") {
  Matrix q(1, 2), g(3, 2);
  q << 1.0, 0.0;
  // match (label 5) is least similar to the query
  g << 0.9, std::sqrt(1.0 - 0.81), 0.8, std::sqrt(1.0 - 0.64), 0.0, 1.0;
  const Gallery queries = Gallery::normalized(q, {5});
  const Gallery gallery = Gallery::normalized(g, {1, 2, 5});
  const MapResult result = retrieval_map(queries, gallery);
  CHECK(result.map == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("retrieval_map errors when a query label is missing from the gallery") {
  Rng rng(3);
  const Gallery queries = Gallery::normalized(random_unit_rows(rng, 2, 4), {0, 9});
  const Gallery gallery = Gallery::normalized(random_unit_rows(rng, 3, 4), {0, 0, 1});
  CHECK_THROWS_AS(retrieval_map(queries, gallery), ValidationError);
}

TEST_CASE("leave-one-out excludes singleton labels and reports the count") {
  Rng rng(4);
  const Gallery gallery = Gallery::normalized(random_unit_rows(rng, 5, 4), {0, 0, 1, 1, 7});
  const MapResult result = retrieval_map_loo(gallery);
  CHECK(result.queries_used == 4);
  CHECK(result.queries_excluded == 1);
}

TEST_CASE("mAP is invariant under strictly increasing score transforms") {
  Rng rng(5);
  Matrix scores(3, 6);
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index j = 0; j < scores.cols(); ++j) scores(i, j) = rng.uniform(-1.0, 1.0);
  }
  const std::vector<int> qlabels = {0, 1, 2};
  const std::vector<int> glabels = {0, 1, 2, 0, 1, 2};
  const MapResult base = map_from_scores(scores, qlabels, glabels, false);
  const Matrix warped = (3.0 * scores).array().exp() + 0.5;
  const MapResult transformed = map_from_scores(warped, qlabels, glabels, false);
  CHECK(base.map == doctest::Approx(transformed.map).epsilon(1e-15));
}

TEST_CASE("mAP is invariant under gallery permutation when similarities are distinct") {
  Rng rng(6);
  const Matrix emb = random_unit_rows(rng, 8, 5);
  std::vector<int> labels = {0, 0, 1, 1, 2, 2, 3, 3};
  const Gallery gallery = Gallery::normalized(emb, labels);

  const std::vector<int> perm = {5, 2, 7, 0, 3, 6, 1, 4};
  Matrix permuted(8, 5);
  std::vector<int> plabels(8);
  for (int i = 0; i < 8; ++i) {
    permuted.row(i) = emb.row(perm[static_cast<std::size_t>(i)]);
    plabels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const Gallery shuffled = Gallery::normalized(permuted, plabels);
  CHECK(retrieval_map_loo(gallery).map == doctest::Approx(retrieval_map_loo(shuffled).map).epsilon(1e-12));
}

TEST_CASE("weighted_knn: k=1 is nearest neighbour; identical rows dominate") {
  const Gallery train = clustered_gallery();
  Matrix t(1, 3);
  t << 1.0, 0.01, 0.0;  // identical to train row 0
  const Gallery test = Gallery::normalized(t, {0});

  KnnConfig cfg;
  cfg.k = 1;
  CHECK(weighted_knn(train, test, cfg).predictions[0] == 0);

  cfg.k = 4;  // e^{1/0.07} outweighs every other neighbour combined
  cfg.temperature = 0.07;
  const KnnResult result = weighted_knn(train, test, cfg);
  CHECK(result.predictions[0] == 0);
  CHECK(result.top1 == doctest::Approx(1.0));
}

TEST_CASE("weighted_knn clamps k to the train size") {
  Rng rng(7);
  const Gallery train = Gallery::normalized(random_unit_rows(rng, 50, 4),
                                            std::vector<int>(50, 0));
  const Gallery test = Gallery::normalized(random_unit_rows(rng, 2, 4), {0, 0});
  KnnConfig cfg;
  cfg.k = 200;
  CHECK(weighted_knn(train, test, cfg).effective_k == 50);
  // leave-one-out over a single 50-row gallery: self excluded
  CHECK(weighted_knn_loo(train, cfg).effective_k == 49);
}

TEST_CASE("weighted_knn with huge temperature degenerates to majority vote") {
  // 3 neighbours of class 1, 2 of class 0; class-0 rows are closer
  Matrix rows(5, 2);
  rows << 1.0, 0.0, 0.995, std::sqrt(1 - 0.995 * 0.995), 0.7, std::sqrt(1 - 0.49), 0.65,
      std::sqrt(1 - 0.4225), 0.6, -std::sqrt(1 - 0.36);
  const Gallery train = Gallery::normalized(rows, {0, 0, 1, 1, 1});
  Matrix t(1, 2);
  t << 1.0, 0.0;
  const Gallery test = Gallery::normalized(t, {1});

  KnnConfig sharp;  // tau 0.07: nearest class-0 rows dominate
  sharp.k = 5;
  CHECK(weighted_knn(train, test, sharp).predictions[0] == 0);

  KnnConfig flat;
  flat.k = 5;
  flat.temperature = 1e9;  // weights ~1 each: majority class wins
  CHECK(weighted_knn(train, test, flat).predictions[0] == 1);
}

TEST_CASE("weighted_knn breaks exact ties toward the smaller class id") {
  Matrix rows(2, 2);
  rows << 1.0, 0.0, 0.0, 1.0;
  const Gallery train = Gallery::normalized(rows, {3, 1});
  Matrix t(1, 2);
  t << std::sqrt(0.5), std::sqrt(0.5);  // equidistant
  const Gallery test = Gallery::normalized(t, {1});
  KnnConfig cfg;
  cfg.k = 2;
  CHECK(weighted_knn(train, test, cfg).predictions[0] == 1);
}

TEST_CASE("linear_probe separates two classes at orthogonal axes") {
  Matrix rows(4, 2);
  rows << 1, 0, 0, 1, 1, 0, 0, 1;
  const Gallery train = Gallery::normalized(rows, {0, 1, 0, 1});
  CHECK(linear_probe(train, train, ProbeConfig{}) == doctest::Approx(1.0));
}

TEST_CASE("weighted_knn is invariant under train-set permutation with distinct similarities") {
  Rng rng(17);
  const Matrix emb = random_unit_rows(rng, 9, 5);
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2};
  const Gallery train = Gallery::normalized(emb, labels);
  const Gallery test = Gallery::normalized(random_unit_rows(rng, 4, 5), {0, 1, 2, 0});

  const std::vector<int> perm = {4, 7, 1, 8, 0, 3, 6, 2, 5};
  Matrix permuted(9, 5);
  std::vector<int> plabels(9);
  for (int i = 0; i < 9; ++i) {
    permuted.row(i) = emb.row(perm[static_cast<std::size_t>(i)]);
    plabels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const Gallery shuffled = Gallery::normalized(permuted, plabels);

  KnnConfig cfg;
  cfg.k = 4;
  const KnnResult base = weighted_knn(train, test, cfg);
  const KnnResult moved = weighted_knn(shuffled, test, cfg);
  CHECK(base.predictions == moved.predictions);
  CHECK(base.top1 == doctest::Approx(moved.top1));
}

TEST_CASE("linear_probe on random labels stays near chance") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const Eigen::Index n = 200, d = 8;
    std::vector<int> train_labels(n), test_labels(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      train_labels[static_cast<std::size_t>(i)] = static_cast<int>(i % 2);  // balanced
      test_labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.index(2));
    }
    const Gallery train = Gallery::normalized(random_unit_rows(rng, n, d), train_labels);
    const Gallery test = Gallery::normalized(random_unit_rows(rng, n, d), test_labels);
    ProbeConfig cfg;
    cfg.seed = seed;
    const double acc = linear_probe(train, test, cfg);
    CHECK(acc >= 0.35);
    CHECK(acc <= 0.65);
  }
}

TEST_CASE("linear_probe rejects single-class training data") {
  Rng rng(8);
  const Gallery train = Gallery::normalized(random_unit_rows(rng, 4, 3), {2, 2, 2, 2});
  CHECK_THROWS_AS(linear_probe(train, train, ProbeConfig{}), ValidationError);
}

TEST_CASE("multilabel_accuracy") {
  IntMatrix truth(4, 2);
  truth << 1, 0, 0, 1, 1, 1, 0, 0;
  CHECK(multilabel_accuracy(truth, truth) == doctest::Approx(1.0));

  IntMatrix pred = truth;
  pred(0, 1) = 1 - pred(0, 1);  // attr 1: 2 of 4 wrong after the next flip
  pred(1, 1) = 1 - pred(1, 1);
  CHECK(multilabel_accuracy(pred, truth) == doctest::Approx(0.75));

  const IntMatrix complement = (1 - truth.array()).matrix();
  CHECK(multilabel_accuracy(complement, truth) == doctest::Approx(0.0));

  CHECK_THROWS_AS(multilabel_accuracy(IntMatrix::Zero(2, 2), IntMatrix::Zero(2, 3)), ValidationError);
}

TEST_CASE("pck counts visible keypoints within the threshold") {
  Matrix truth(2, 4);  // 2 samples, 2 joints
  truth << 0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0;
  IntMatrix vis = IntMatrix::Ones(2, 2);

  CHECK(pck(truth, truth, vis, 0.5) == doctest::Approx(1.0));

  Matrix far = truth.array() + 10.0;
  CHECK(pck(far, truth, vis, 0.5) == doctest::Approx(0.0));

  Matrix half = truth;
  half(0, 0) += 10.0;  // joint 0 of sample 0 off
  half(1, 2) += 10.0;  // joint 1 of sample 1 off
  CHECK(pck(half, truth, vis, 0.5) == doctest::Approx(0.5));

  CHECK_THROWS_AS(pck(truth, truth, IntMatrix::Zero(2, 2), 0.5), ValidationError);
}

TEST_CASE("miou spot values and class exclusion") {
  CHECK(miou({0, 0, 1, 1}, {0, 0, 1, 1}, 2) == doctest::Approx(1.0));
  CHECK(miou({0, 1, 1, 1}, {0, 0, 1, 1}, 2) == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0).epsilon(1e-9));
  CHECK(miou({0, 1, 1, 1}, {0, 0, 1, 1}, 2) == doctest::Approx(0.583333).epsilon(1e-5));
  // class 2 absent from both maps: excluded from the mean
  CHECK(miou({0, 0, 1, 1}, {0, 0, 1, 1}, 3) == doctest::Approx(1.0));
  CHECK_THROWS_AS(miou({0, 5}, {0, 0}, 2), ValidationError);
  CHECK_THROWS_AS(miou({0, 1}, {0}, 2), ValidationError);
}

TEST_CASE("miou equals the confusion-matrix oracle on random fixtures") {
  Rng rng(9);
  for (int fixture = 0; fixture < 100; ++fixture) {
    const int num_classes = 2 + static_cast<int>(rng.index(5));
    const std::size_t length = 20 + rng.index(60);
    std::vector<int> pred(length), truth(length);
    for (std::size_t i = 0; i < length; ++i) {
      pred[i] = static_cast<int>(rng.index(static_cast<std::size_t>(num_classes)));
      truth[i] = static_cast<int>(rng.index(static_cast<std::size_t>(num_classes)));
    }
    CHECK(miou(pred, truth, num_classes) == oracles::miou_confusion(pred, truth, num_classes));
  }
}

TEST_CASE("gallery validation") {
  Matrix rows(2, 2);
  rows << 1.0, 0.0, 3.0, 4.0;  // second row not unit
  CHECK_THROWS_AS(Gallery(rows, {0, 1}), ValidationError);
  CHECK_THROWS_AS(Gallery::normalized(Matrix::Zero(1, 3), {0}), ValidationError);
  CHECK_THROWS_AS(Gallery::normalized(rows, {0}), ValidationError);  // label count
}

TEST_CASE("embedding CSV reader") {
  const std::string text =
      "id,label,e0,e1,e2\n"
      "0,4,1.0,0.0,0.0\n"
      "1,5,0.0,1.0,0.0\n";
  const EmbeddingTable table = read_embeddings_csv(text);
  CHECK(table.ids == std::vector<std::int64_t>{0, 1});
  CHECK(table.labels == std::vector<int>{4, 5});
  CHECK(table.embeddings(1, 1) == doctest::Approx(1.0));

  CHECK_THROWS_AS(read_embeddings_csv("nope\n1,2,3\n"), ParseError);
  CHECK_THROWS_AS(read_embeddings_csv("id,label,e0\n0,1\n"), ParseError);
  CHECK_THROWS_AS(read_embeddings_csv("id,label,e0\n0,1,abc\n"), ParseError);
}

TEST_CASE("eval report round-trips") {
  EvalReport report;
  report.metrics = {{"map", 0.75}, {"knn_top1", 0.5}};
  report.config = {{"k", "200"}};
  report.digests = {{"embeddings", "fnv1a64:0123456789abcdef"}};
  const EvalReport round = read_eval_report(write_eval_report(report));
  CHECK(round.metrics == report.metrics);
  CHECK(round.config == report.config);
  CHECK(round.digests == report.digests);
}
