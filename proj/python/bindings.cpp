#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "trapforge/digest.hpp"
#include "trapforge/evalkit.hpp"
#include "trapforge/losszoo.hpp"
#include "trapforge/microtrain.hpp"
#include "trapforge/trapstream.hpp"

namespace py = pybind11;

namespace {

using trapforge::losszoo::LossOutput;
using trapforge::losszoo::Matrix;
using trapforge::losszoo::Vector;

py::dict loss_dict(const LossOutput& out) {
  py::list grads;
  for (const Matrix& g : out.grads) grads.append(g);
  py::dict d;
  d["value"] = out.value;
  d["grads"] = grads;
  return d;
}

py::dict map_dict(const trapforge::evalkit::MapResult& result) {
  py::dict d;
  d["map"] = result.map;
  d["queries_used"] = result.queries_used;
  d["queries_excluded"] = result.queries_excluded;
  return d;
}

py::dict knn_dict(const trapforge::evalkit::KnnResult& result) {
  py::dict d;
  d["predictions"] = result.predictions;
  d["top1"] = result.top1;
  d["effective_k"] = result.effective_k;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "temporal-pair mining, SSL losses with analytic gradients, and embedding metrics";

  using namespace trapforge;

  // ---- trapstream
  m.def(
      "iou",
      [](std::array<double, 4> a, std::array<double, 4> b) {
        return trapstream::iou(trapstream::BBox{a[0], a[1], a[2], a[3]},
                               trapstream::BBox{b[0], b[1], b[2], b[3]});
      },
      py::arg("a"), py::arg("b"), "IoU of two (x, y, w, h) fraction boxes");

  m.def(
      "mine_pairs",
      [](const std::string& log_text, double iou_threshold, std::int64_t max_gap_seconds,
         double min_confidence) {
        trapstream::MiningConfig cfg{iou_threshold, max_gap_seconds, min_confidence};
        const auto sequences = trapstream::parse_detections(log_text);
        const auto manifest = trapstream::mine_pairs(sequences, cfg, digest_hex(log_text));
        py::list pairs;
        for (const auto& pair : manifest.pairs) {
          py::dict d;
          d["anchor_file"] = pair.anchor.frame_id;
          d["anchor_det"] = pair.anchor.det_index;
          d["partner_file"] = pair.partner.frame_id;
          d["partner_det"] = pair.partner.det_index;
          d["iou"] = pair.iou;
          d["gap_s"] = pair.gap_seconds;
          pairs.append(d);
        }
        return pairs;
      },
      py::arg("log_text"), py::arg("iou_threshold") = 0.2, py::arg("max_gap_seconds") = 120,
      py::arg("min_confidence") = 0.5, "Mine temporal pairs from a detection-log JSON document");

  m.def(
      "sweep_thresholds",
      [](const std::string& log_text, const std::vector<double>& thresholds,
         std::int64_t max_gap_seconds, double min_confidence) {
        trapstream::MiningConfig cfg;
        cfg.max_gap_seconds = max_gap_seconds;
        cfg.min_confidence = min_confidence;
        return trapstream::sweep_thresholds(trapstream::parse_detections(log_text), cfg, thresholds);
      },
      py::arg("log_text"), py::arg("thresholds"), py::arg("max_gap_seconds") = 120,
      py::arg("min_confidence") = 0.5, "Pair counts per IoU threshold (ascending thresholds)");

  // ---- losszoo
  m.def(
      "nt_xent",
      [](const Matrix& za, const Matrix& zb, double temperature) {
        return loss_dict(losszoo::nt_xent(za, zb, {temperature, 0.5}));
      },
      py::arg("za"), py::arg("zb"), py::arg("temperature") = 0.1);

  m.def(
      "nt_xent_queue",
      [](const Matrix& q, const Matrix& k, const Matrix& queue, double temperature) {
        losszoo::MomentumState state;
        state.queue = queue;
        return loss_dict(losszoo::nt_xent_queue(q, k, state, {temperature, 0.5}));
      },
      py::arg("q"), py::arg("k"), py::arg("queue"), py::arg("temperature") = 0.1);

  m.def(
      "dclw",
      [](const Matrix& za, const Matrix& zb, double temperature, double vmf_sigma) {
        return loss_dict(losszoo::dclw(za, zb, {temperature, vmf_sigma}));
      },
      py::arg("za"), py::arg("zb"), py::arg("temperature") = 0.1, py::arg("vmf_sigma") = 0.5);

  m.def(
      "barlow_twins",
      [](const Matrix& za, const Matrix& zb, double lam) {
        return loss_dict(losszoo::barlow_twins(za, zb, {lam}));
      },
      py::arg("za"), py::arg("zb"), py::arg("lam") = 5e-3);

  m.def(
      "negative_cosine",
      [](const Matrix& p, const Matrix& target) { return loss_dict(losszoo::negative_cosine(p, target)); },
      py::arg("p"), py::arg("target"));

  m.def(
      "byol",
      [](const Matrix& pa, const Matrix& zb_t, const Matrix& pb, const Matrix& za_t) {
        return loss_dict(losszoo::byol(pa, zb_t, pb, za_t));
      },
      py::arg("pa"), py::arg("zb_target"), py::arg("pb"), py::arg("za_target"));

  m.def(
      "fastsiam",
      [](const Matrix& p, const std::vector<Matrix>& targets) {
        return loss_dict(losszoo::fastsiam(p, targets));
      },
      py::arg("p"), py::arg("targets"));

  m.def(
      "dino",
      [](const std::vector<Matrix>& student, const std::vector<Matrix>& teacher, const Vector& center,
         double student_temp, double teacher_temp, double center_momentum) {
        losszoo::DinoConfig cfg{student_temp, teacher_temp, center, center_momentum};
        const auto result = losszoo::dino(student, teacher, cfg);
        py::dict d = loss_dict(result.loss);
        d["new_center"] = result.new_center;
        return d;
      },
      py::arg("student"), py::arg("teacher"), py::arg("center"), py::arg("student_temp") = 0.1,
      py::arg("teacher_temp") = 0.04, py::arg("center_momentum") = 0.9);

  m.def(
      "arcface",
      [](const Matrix& z, const std::vector<int>& labels, const Matrix& centers, double scale,
         double margin) {
        losszoo::SupervisedConfig cfg;
        cfg.arcface_scale = scale;
        cfg.arcface_margin = margin;
        return loss_dict(losszoo::arcface(z, labels, centers, cfg));
      },
      py::arg("z"), py::arg("labels"), py::arg("centers"), py::arg("scale") = 64.0,
      py::arg("margin") = 0.5);

  m.def(
      "triplet",
      [](const Matrix& anchor, const Matrix& positive, const Matrix& negative, double margin) {
        losszoo::SupervisedConfig cfg;
        cfg.triplet_margin = margin;
        return loss_dict(losszoo::triplet(anchor, positive, negative, cfg));
      },
      py::arg("anchor"), py::arg("positive"), py::arg("negative"), py::arg("margin") = 0.2);

  m.def(
      "supcon",
      [](const Matrix& z, const std::vector<int>& labels, double temperature) {
        return loss_dict(losszoo::supcon(z, labels, {temperature, 0.5}));
      },
      py::arg("z"), py::arg("labels"), py::arg("temperature") = 0.1);

  m.def("ema_update", &losszoo::ema_update, py::arg("target"), py::arg("online"), py::arg("momentum"));

  m.def(
      "grad_check",
      [](const std::string& method, std::uint64_t seed, double eps) {
        const auto problem = losszoo::make_gradcheck_problem(method, seed);
        return losszoo::grad_check(problem.eval, problem.inputs, problem.stop_gradient, eps).max_rel_error;
      },
      py::arg("method"), py::arg("seed") = 0, py::arg("eps") = 1e-5,
      "Max relative error of the analytic gradient against central differences");

  m.def("loss_methods", [] { return losszoo::loss_methods(); });

  // ---- microtrain
  m.def(
      "synth_dataset",
      [](int num_identities, int views_per_identity, int input_dim, double view_noise_sigma,
         double drift_sigma, std::uint64_t seed) {
        microtrain::SynthConfig cfg{num_identities, views_per_identity, input_dim, view_noise_sigma,
                                    drift_sigma, seed};
        const auto [data, labels] = microtrain::synth_dataset(cfg);
        Matrix views_a(static_cast<Eigen::Index>(data.items.size()), input_dim);
        Matrix views_b(static_cast<Eigen::Index>(data.items.size()), input_dim);
        for (std::size_t i = 0; i < data.items.size(); ++i) {
          views_a.row(static_cast<Eigen::Index>(i)) = data.items[i].view_a.transpose();
          views_b.row(static_cast<Eigen::Index>(i)) = data.items[i].view_b.transpose();
        }
        return py::make_tuple(views_a, views_b, labels);
      },
      py::arg("num_identities") = 32, py::arg("views_per_identity") = 20, py::arg("input_dim") = 24,
      py::arg("view_noise_sigma") = 0.18, py::arg("drift_sigma") = 0.22, py::arg("seed") = 0);

  m.def(
      "train_synthetic",
      [](const std::string& method, std::uint64_t seed, int steps, const std::string& pair_mode,
         py::object learning_rate) {
        microtrain::SynthConfig scfg;
        scfg.seed = seed;
        const auto [base, labels] = microtrain::synth_dataset(scfg);
        microtrain::TrainConfig cfg;
        cfg.method = method;
        cfg.seed = seed;
        cfg.steps = steps;
        if (!learning_rate.is_none()) cfg.learning_rate = learning_rate.cast<double>();
        microtrain::AugmentConfig aug;
        aug.sigma = cfg.aug_sigma;
        const auto data =
            microtrain::build_pairs(base, microtrain::pair_mode_from_string(pair_mode), aug, seed);
        const auto report = microtrain::train(data, cfg);
        const Matrix embeddings =
            microtrain::embed(report.final_params, microtrain::dataset_views_a(base));
        py::dict d;
        d["embeddings"] = embeddings;
        d["labels"] = labels;
        d["loss_trace"] = report.loss_trace;
        d["elapsed_seconds"] = report.elapsed_seconds;
        return d;
      },
      py::arg("method") = "simclr_dclw", py::arg("seed") = 0, py::arg("steps") = 1000,
      py::arg("pair_mode") = "temporal", py::arg("learning_rate") = py::none(),
      "Train on the synthetic identity task and return embeddings of every item");

  // ---- evalkit
  m.def("average_precision", &evalkit::average_precision, py::arg("relevance"));

  m.def(
      "retrieval_map",
      [](const Matrix& embeddings, const std::vector<int>& labels) {
        return map_dict(evalkit::retrieval_map_loo(evalkit::Gallery::normalized(embeddings, labels)));
      },
      py::arg("embeddings"), py::arg("labels"), "Leave-one-out retrieval mAP over one labeled set");

  m.def(
      "retrieval_map_split",
      [](const Matrix& query_embeddings, const std::vector<int>& query_labels,
         const Matrix& gallery_embeddings, const std::vector<int>& gallery_labels) {
        return map_dict(
            evalkit::retrieval_map(evalkit::Gallery::normalized(query_embeddings, query_labels),
                                   evalkit::Gallery::normalized(gallery_embeddings, gallery_labels)));
      },
      py::arg("query_embeddings"), py::arg("query_labels"), py::arg("gallery_embeddings"),
      py::arg("gallery_labels"));

  m.def(
      "weighted_knn",
      [](const Matrix& train_embeddings, const std::vector<int>& train_labels,
         const Matrix& test_embeddings, const std::vector<int>& test_labels, int k, double temperature) {
        return knn_dict(evalkit::weighted_knn(
            evalkit::Gallery::normalized(train_embeddings, train_labels),
            evalkit::Gallery::normalized(test_embeddings, test_labels), {k, temperature}));
      },
      py::arg("train_embeddings"), py::arg("train_labels"), py::arg("test_embeddings"),
      py::arg("test_labels"), py::arg("k") = 200, py::arg("temperature") = 0.07);

  m.def(
      "weighted_knn_loo",
      [](const Matrix& embeddings, const std::vector<int>& labels, int k, double temperature) {
        return knn_dict(
            evalkit::weighted_knn_loo(evalkit::Gallery::normalized(embeddings, labels), {k, temperature}));
      },
      py::arg("embeddings"), py::arg("labels"), py::arg("k") = 200, py::arg("temperature") = 0.07);

  m.def(
      "linear_probe",
      [](const Matrix& train_embeddings, const std::vector<int>& train_labels,
         const Matrix& test_embeddings, const std::vector<int>& test_labels, double learning_rate,
         int epochs, std::uint64_t seed) {
        return evalkit::linear_probe(evalkit::Gallery::normalized(train_embeddings, train_labels),
                                     evalkit::Gallery::normalized(test_embeddings, test_labels),
                                     {learning_rate, epochs, seed});
      },
      py::arg("train_embeddings"), py::arg("train_labels"), py::arg("test_embeddings"),
      py::arg("test_labels"), py::arg("learning_rate") = 1.0, py::arg("epochs") = 200,
      py::arg("seed") = 0);

  m.def("miou", &evalkit::miou, py::arg("pred"), py::arg("truth"), py::arg("num_classes"));

  m.def(
      "pck",
      [](const Matrix& pred, const Matrix& truth, const evalkit::IntMatrix& visibility,
         double threshold) { return evalkit::pck(pred, truth, visibility, threshold); },
      py::arg("pred"), py::arg("truth"), py::arg("visibility"), py::arg("threshold"),
      "Keypoints as (N, 2J) matrices of interleaved x, y");

  m.def(
      "multilabel_accuracy",
      [](const evalkit::IntMatrix& pred, const evalkit::IntMatrix& truth) {
        return evalkit::multilabel_accuracy(pred, truth);
      },
      py::arg("pred"), py::arg("truth"));
}
