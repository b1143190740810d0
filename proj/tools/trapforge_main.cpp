// trapforge: temporal-pair mining, SSL loss verification, desk-scale
// training, and embedding evaluation, end to end.
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trapforge/digest.hpp"
#include "trapforge/errors.hpp"
#include "trapforge/evalkit.hpp"
#include "trapforge/losszoo.hpp"
#include "trapforge/microtrain.hpp"
#include "trapforge/rng.hpp"
#include "trapforge/trapstream.hpp"

namespace {

using nlohmann::json;
using namespace trapforge;

// JSON config files: {"mine": {"iou-threshold": 0.3}, "seed": 7}. Nested
// objects map to subcommand sections; command-line values win.
class ConfigJSON : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    json j;
    for (const CLI::Option* opt : app->get_options({})) {
      if (!opt->get_lnames().empty() && opt->get_configurable()) {
        const std::string name = opt->get_lnames()[0];
        if (opt->get_type_size() != 0) {
          if (opt->count() == 1) {
            j[name] = opt->results().at(0);
          } else if (opt->count() > 1) {
            j[name] = opt->results();
          } else if (default_also && !opt->get_default_str().empty()) {
            j[name] = opt->get_default_str();
          }
        } else if (opt->count() > 0) {
          j[name] = true;
        }
      }
    }
    for (const CLI::App* sub : app->get_subcommands({})) {
      j[sub->get_name()] = json::parse(to_config(sub, default_also, false, ""));
    }
    return j.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      input >> j;
    } catch (const json::exception& e) {
      throw CLI::FileError(std::string("config file is not valid JSON: ") + e.what());
    }
    return walk(j, "", {});
  }

 private:
  std::vector<CLI::ConfigItem> walk(const json& j, const std::string& name,
                                    std::vector<std::string> prefix) const {
    std::vector<CLI::ConfigItem> results;
    if (j.is_object()) {
      if (!name.empty()) prefix.push_back(name);
      for (const auto& [key, value] : j.items()) {
        auto sub = walk(value, key, prefix);
        results.insert(results.end(), sub.begin(), sub.end());
      }
      return results;
    }
    if (name.empty()) {
      throw CLI::ConversionError("top-level config values must live in an object");
    }
    CLI::ConfigItem item;
    item.name = name;
    item.parents = std::move(prefix);
    if (j.is_array()) {
      for (const json& element : j) {
        item.inputs.push_back(element.is_string() ? element.get<std::string>() : element.dump());
      }
    } else if (j.is_string()) {
      item.inputs = {j.get<std::string>()};
    } else {
      item.inputs = {j.dump()};
    }
    results.push_back(std::move(item));
    return results;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open \"" + path + "\" for reading");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open \"" + path + "\" for writing");
  out << content;
  if (!out) throw ParseError("failed while writing \"" + path + "\"");
}

int usage_error(const std::string& message) {
  std::cerr << "usage error: " << message << "\n";
  return 2;
}

// ---------------------------------------------------------------------------
// mine

struct MineOptions {
  std::string input;
  std::string out;
  trapstream::MiningConfig mining;
};

int run_mine(const MineOptions& opts) {
  const std::string text = read_file(opts.input);
  const auto sequences = trapstream::parse_detections(text);

  trapstream::PairManifest merged;
  merged.config = opts.mining;
  merged.source_digest = digest_hex(text);
  for (const auto& seq : sequences) {
    trapstream::PairManifest part = trapstream::mine_pairs(seq, opts.mining);
    std::cout << "camera " << seq.camera_id << ": " << part.pairs.size() << " pairs over "
              << seq.frames.size() << " frames\n";
    merged.pairs.insert(merged.pairs.end(), part.pairs.begin(), part.pairs.end());
  }
  write_file(opts.out, trapstream::write_manifest(merged));
  std::cout << "total pairs: " << merged.pairs.size() << "\n";
  std::cout << "manifest: " << opts.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepOptions {
  std::string input;
  std::string out;
  std::vector<double> thresholds;
  trapstream::MiningConfig mining;
};

int run_sweep(const SweepOptions& opts) {
  if (opts.thresholds.empty()) return usage_error("sweep needs at least one --thresholds value");
  for (const double alpha : opts.thresholds) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
      return usage_error("sweep thresholds must lie strictly inside (0, 1)");
    }
  }
  if (!std::is_sorted(opts.thresholds.begin(), opts.thresholds.end())) {
    return usage_error("sweep thresholds must be ascending");
  }

  const std::string text = read_file(opts.input);
  const auto sequences = trapstream::parse_detections(text);
  const auto counts = trapstream::sweep_thresholds(sequences, opts.mining, opts.thresholds);

  std::ostringstream csv;
  csv << "alpha,pair_count\n";
  for (const auto& [alpha, count] : counts) {
    csv << alpha << "," << count << "\n";
    std::cout << "alpha " << alpha << ": " << count << " pairs\n";
  }
  write_file(opts.out, csv.str());
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  std::vector<std::string> methods;
  int trials = 20;
  double tolerance = 1e-4;
  double eps = 1e-5;
  std::uint64_t seed = 0;
};

int run_gradcheck(const GradcheckOptions& opts) {
  const std::vector<std::string> methods =
      opts.methods.empty() ? losszoo::loss_methods() : opts.methods;

  bool all_ok = true;
  std::printf("%-12s %14s  %s\n", "method", "max_rel_error", "status");
  for (const std::string& method : methods) {
    double worst = 0.0;
    losszoo::GradCheckReport worst_report;
    for (int trial = 0; trial < opts.trials; ++trial) {
      const auto problem =
          losszoo::make_gradcheck_problem(method, opts.seed + static_cast<std::uint64_t>(trial));
      const auto report = losszoo::grad_check(problem.eval, problem.inputs, problem.stop_gradient, opts.eps);
      if (report.max_rel_error > worst) {
        worst = report.max_rel_error;
        worst_report = report;
      }
    }
    const bool ok = worst <= opts.tolerance;
    all_ok = all_ok && ok;
    std::printf("%-12s %14.3e  %s\n", method.c_str(), worst, ok ? "pass" : "FAIL");
    if (!ok) {
      std::fprintf(stderr, "gradcheck failed: method %s, input %d, coordinate (%ld, %ld), rel error %.3e\n",
                   method.c_str(), worst_report.input_index, static_cast<long>(worst_report.row),
                   static_cast<long>(worst_report.col), worst);
    }
  }
  return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  microtrain::SynthConfig synth;
  microtrain::TrainConfig train;
  bool learning_rate_set = false;
  double learning_rate = 0.0;
  std::string pair_mode = "temporal";
  std::string manifest;  // optional: replay a mined manifest
  std::string out;
  std::string report_path;
};

// Synthetic replay of a mined manifest: connected pair components become
// identities; every detection gets a prototype-plus-noise vector.
std::pair<microtrain::PairDataset, std::vector<int>> replay_dataset(
    const trapstream::PairManifest& manifest, const microtrain::SynthConfig& scfg) {
  if (manifest.pairs.empty()) throw ValidationError("manifest replay: no pairs to train on");

  using Key = std::pair<std::string, int>;
  std::map<Key, std::size_t> index_of;
  std::vector<Key> keys;
  const auto intern = [&](const trapstream::DetectionRef& ref) {
    const Key key{ref.frame_id, ref.det_index};
    const auto [it, inserted] = index_of.try_emplace(key, keys.size());
    if (inserted) keys.push_back(key);
    return it->second;
  };

  std::vector<std::size_t> parent;
  const auto find_root = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };

  std::vector<std::pair<std::size_t, std::size_t>> edges;
  edges.reserve(manifest.pairs.size());
  for (const auto& pair : manifest.pairs) {
    edges.emplace_back(intern(pair.anchor), intern(pair.partner));
  }
  parent.resize(keys.size());
  std::iota(parent.begin(), parent.end(), 0);
  for (const auto& [a, b] : edges) {
    const std::size_t ra = find_root(a);
    const std::size_t rb = find_root(b);
    if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
  }

  std::map<std::size_t, int> identity_of_root;
  std::vector<int> identity(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::size_t root = find_root(i);
    const auto [it, inserted] = identity_of_root.try_emplace(root, static_cast<int>(identity_of_root.size()));
    identity[i] = it->second;
  }

  std::vector<microtrain::Vector> prototypes(identity_of_root.size());
  for (std::size_t c = 0; c < prototypes.size(); ++c) {
    Rng rng(scfg.seed + 0x9e3779b97f4a7c15ull * (c + 1));
    microtrain::Vector proto(scfg.input_dim);
    for (int d = 0; d < scfg.input_dim; ++d) proto[d] = rng.gaussian();
    prototypes[c] = proto / proto.norm();
  }
  std::vector<microtrain::Vector> vectors(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    Rng rng(scfg.seed + 0xbf58476d1ce4e5b9ull * (i + 1));
    vectors[i] = prototypes[static_cast<std::size_t>(identity[i])];
    for (int d = 0; d < scfg.input_dim; ++d) vectors[i][d] += scfg.view_noise_sigma * rng.gaussian();
  }

  microtrain::PairDataset data;
  data.source_mode = microtrain::PairMode::temporal;
  std::vector<int> labels;
  for (const auto& [a, b] : edges) {
    microtrain::PairItem item;
    item.view_a = vectors[a];
    item.view_b = vectors[b];
    item.identity = identity[a];
    data.items.push_back(std::move(item));
    labels.push_back(identity[a]);
  }
  return {std::move(data), std::move(labels)};
}

int run_train(TrainOptions opts) {
  if (opts.learning_rate_set) opts.train.learning_rate = opts.learning_rate;
  opts.synth.seed = opts.train.seed;  // one global seed drives the whole run

  microtrain::PairDataset base;
  std::vector<int> labels;
  if (!opts.manifest.empty()) {
    const auto manifest = trapstream::read_manifest(read_file(opts.manifest));
    std::tie(base, labels) = replay_dataset(manifest, opts.synth);
  } else {
    std::tie(base, labels) = microtrain::synth_dataset(opts.synth);
  }

  microtrain::AugmentConfig aug;
  aug.sigma = opts.train.aug_sigma;
  const microtrain::PairDataset data = microtrain::build_pairs(
      base, microtrain::pair_mode_from_string(opts.pair_mode), aug, opts.train.seed);

  if (static_cast<std::size_t>(opts.train.batch_size) > data.items.size()) {
    opts.train.batch_size = static_cast<int>(data.items.size());
    std::cout << "note: batch size clamped to the " << data.items.size() << "-pair dataset\n";
  }
  const microtrain::TrainReport report = microtrain::train(data, opts.train);

  const microtrain::Matrix embeddings =
      microtrain::embed(report.final_params, microtrain::dataset_views_a(base));
  std::vector<std::int64_t> ids(base.items.size());
  std::iota(ids.begin(), ids.end(), 0);
  write_file(opts.out, microtrain::write_embeddings_csv(ids, labels, embeddings));
  if (!opts.report_path.empty()) {
    write_file(opts.report_path, microtrain::write_train_report(report, opts.train));
  }

  std::cout << "method " << opts.train.method << ", pair mode " << opts.pair_mode << ", "
            << data.items.size() << " pairs, " << opts.train.steps << " steps\n";
  std::cout << "final loss: " << report.loss_trace.back() << "\n";
  std::cout << "elapsed: " << report.elapsed_seconds << " s\n";
  std::cout << "embeddings: " << opts.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string embeddings;
  std::string gallery;
  std::vector<std::string> metrics;
  std::string out;
  evalkit::KnnConfig knn;
  evalkit::ProbeConfig probe;
  double pck_threshold = 0.1;
  std::string pck_file;
  std::string miou_file;
  std::string multilabel_file;
};

evalkit::Gallery load_gallery(const std::string& path, std::map<std::string, std::string>& digests,
                              const std::string& tag) {
  const std::string text = read_file(path);
  digests[tag] = digest_hex(text);
  const auto table = evalkit::read_embeddings_csv(text);
  return evalkit::Gallery::normalized(table.embeddings, table.labels);
}

int run_eval(const EvalOptions& opts) {
  evalkit::EvalReport report;
  const auto primary = load_gallery(opts.embeddings, report.digests, "embeddings");
  std::unique_ptr<evalkit::Gallery> gallery;
  if (!opts.gallery.empty()) {
    gallery = std::make_unique<evalkit::Gallery>(load_gallery(opts.gallery, report.digests, "gallery"));
  }

  const std::vector<std::string> metrics = opts.metrics.empty() ? std::vector<std::string>{"map"}
                                                                : opts.metrics;
  for (const std::string& metric : metrics) {
    if (metric == "map") {
      const evalkit::MapResult result =
          gallery ? evalkit::retrieval_map(primary, *gallery) : evalkit::retrieval_map_loo(primary);
      report.metrics["map"] = result.map;
      report.metrics["map_queries_used"] = static_cast<double>(result.queries_used);
      report.metrics["map_queries_excluded"] = static_cast<double>(result.queries_excluded);
    } else if (metric == "knn") {
      const evalkit::KnnResult result = gallery ? evalkit::weighted_knn(*gallery, primary, opts.knn)
                                                : evalkit::weighted_knn_loo(primary, opts.knn);
      report.metrics["knn_top1"] = result.top1;
      report.metrics["knn_effective_k"] = static_cast<double>(result.effective_k);
    } else if (metric == "probe") {
      if (!gallery) return usage_error("--metric probe needs --gallery as its training split");
      report.metrics["probe_top1"] = evalkit::linear_probe(*gallery, primary, opts.probe);
    } else if (metric == "pck") {
      if (opts.pck_file.empty()) return usage_error("--metric pck needs --pck-file");
      const std::string text = read_file(opts.pck_file);
      report.digests["pck"] = digest_hex(text);
      const json doc = json::parse(text);
      const auto& pred = doc.at("pred");
      const auto& truth = doc.at("truth");
      const auto& vis = doc.at("visibility");
      const Eigen::Index n = static_cast<Eigen::Index>(pred.size());
      const Eigen::Index joints = n > 0 ? static_cast<Eigen::Index>(pred[0].size()) : 0;
      evalkit::Matrix pred_m(n, 2 * joints), truth_m(n, 2 * joints);
      evalkit::IntMatrix vis_m(n, joints);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < joints; ++j) {
          pred_m(i, 2 * j) = pred[i][j][0].get<double>();
          pred_m(i, 2 * j + 1) = pred[i][j][1].get<double>();
          truth_m(i, 2 * j) = truth[i][j][0].get<double>();
          truth_m(i, 2 * j + 1) = truth[i][j][1].get<double>();
          vis_m(i, j) = vis[i][j].get<int>();
        }
      }
      report.metrics["pck"] = evalkit::pck(pred_m, truth_m, vis_m, opts.pck_threshold);
    } else if (metric == "miou") {
      if (opts.miou_file.empty()) return usage_error("--metric miou needs --miou-file");
      const std::string text = read_file(opts.miou_file);
      report.digests["miou"] = digest_hex(text);
      const json doc = json::parse(text);
      report.metrics["miou"] = evalkit::miou(doc.at("pred").get<std::vector<int>>(),
                                             doc.at("truth").get<std::vector<int>>(),
                                             doc.at("num_classes").get<int>());
    } else if (metric == "multilabel") {
      if (opts.multilabel_file.empty()) return usage_error("--metric multilabel needs --multilabel-file");
      const std::string text = read_file(opts.multilabel_file);
      report.digests["multilabel"] = digest_hex(text);
      const json doc = json::parse(text);
      const auto pred = doc.at("pred").get<std::vector<std::vector<int>>>();
      const auto truth = doc.at("truth").get<std::vector<std::vector<int>>>();
      if (pred.empty() || pred.size() != truth.size()) {
        throw ValidationError("multilabel pred/truth row counts differ");
      }
      evalkit::IntMatrix pred_m(pred.size(), pred[0].size()), truth_m(truth.size(), truth[0].size());
      for (std::size_t i = 0; i < pred.size(); ++i) {
        for (std::size_t a = 0; a < pred[i].size(); ++a) {
          pred_m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = pred[i][a];
          truth_m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = truth[i][a];
        }
      }
      report.metrics["multilabel_accuracy"] = evalkit::multilabel_accuracy(pred_m, truth_m);
    }
  }

  report.config["embeddings"] = opts.embeddings;
  if (!opts.gallery.empty()) report.config["gallery"] = opts.gallery;
  report.config["k"] = std::to_string(opts.knn.k);
  report.config["temperature"] = std::to_string(opts.knn.temperature);
  report.config["probe_learning_rate"] = std::to_string(opts.probe.learning_rate);
  report.config["probe_epochs"] = std::to_string(opts.probe.epochs);
  report.config["seed"] = std::to_string(opts.probe.seed);
  report.config["pck_threshold"] = std::to_string(opts.pck_threshold);

  write_file(opts.out, evalkit::write_eval_report(report));
  for (const auto& [name, value] : report.metrics) {
    std::cout << name << " = " << value << "\n";
  }
  std::cout << "report: " << opts.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"temporal-pair mining and self-supervised embedding toolkit"};
  app.require_subcommand(1);
  app.config_formatter(std::make_shared<ConfigJSON>());
  app.set_config("--config", "", "JSON config file; command-line flags override it");

  const auto unit_open = CLI::Validator(
      [](std::string& value) {
        const double v = std::stod(value);
        return (v >= 0.0 && v < 1.0) ? std::string{} : std::string("value must lie in [0, 1)");
      },
      "FLOAT in [0,1)");
  const auto unit_closed = CLI::Range(0.0, 1.0);

  // ---- mine
  MineOptions mine_opts;
  CLI::App* mine = app.add_subcommand("mine", "mine temporal positive pairs from a detection log");
  mine->add_option("input", mine_opts.input, "detection log (JSON)")->required();
  mine->add_option("--out", mine_opts.out, "output manifest (JSONL)")->required();
  mine->add_option("--iou-threshold", mine_opts.mining.iou_threshold, "IoU threshold alpha")
      ->check(unit_open)
      ->capture_default_str();
  mine->add_option("--max-gap-seconds", mine_opts.mining.max_gap_seconds, "largest pair gap")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  mine->add_option("--min-confidence", mine_opts.mining.min_confidence, "detection confidence floor")
      ->check(unit_closed)
      ->capture_default_str();

  // ---- sweep
  SweepOptions sweep_opts;
  CLI::App* sweep = app.add_subcommand("sweep", "pair counts across IoU thresholds");
  sweep->add_option("input", sweep_opts.input, "detection log (JSON)")->required();
  sweep->add_option("--out", sweep_opts.out, "output CSV (alpha,pair_count)")->required();
  sweep->add_option("--thresholds", sweep_opts.thresholds, "ascending thresholds in (0,1)")
      ->required()
      ->expected(-1);
  sweep->add_option("--max-gap-seconds", sweep_opts.mining.max_gap_seconds)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sweep->add_option("--min-confidence", sweep_opts.mining.min_confidence)
      ->check(unit_closed)
      ->capture_default_str();

  // ---- gradcheck
  GradcheckOptions grad_opts;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "verify analytic loss gradients");
  gradcheck->add_option("--methods", grad_opts.methods, "loss methods (default: all)")
      ->check(CLI::IsMember(losszoo::loss_methods()));
  gradcheck->add_option("--trials", grad_opts.trials, "random trials per method")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gradcheck->add_option("--tolerance", grad_opts.tolerance, "max relative error accepted")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gradcheck->add_option("--eps", grad_opts.eps, "finite-difference step")
      ->check(CLI::Range(1e-7, 1e-4))
      ->capture_default_str();
  gradcheck->add_option("--seed", grad_opts.seed, "base seed")->envname("TRAPFORGE_SEED");

  // ---- train
  TrainOptions train_opts;
  CLI::App* train_cmd = app.add_subcommand("train", "train a small encoder on synthetic identity pairs");
  train_cmd->add_option("--method", train_opts.train.method, "training objective")
      ->check(CLI::IsMember(losszoo::loss_methods()))
      ->capture_default_str();
  train_cmd->add_option("--out", train_opts.out, "embedding CSV path")->required();
  train_cmd->add_option("--report", train_opts.report_path, "train report JSON path");
  train_cmd->add_option("--manifest", train_opts.manifest, "replay a mined pair manifest");
  train_cmd->add_option("--pair-mode", train_opts.pair_mode, "temporal | augmented | combined")
      ->check(CLI::IsMember({"temporal", "augmented", "combined"}))
      ->capture_default_str();
  auto* lr_opt = train_cmd->add_option("--learning-rate", train_opts.learning_rate,
                                       "SGD step (default per method)");
  lr_opt->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--batch-size", train_opts.train.batch_size)
      ->check(CLI::Range(2, 1 << 20))
      ->capture_default_str();
  train_cmd->add_option("--steps", train_opts.train.steps)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--hidden-dim", train_opts.train.hidden_dim)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--embed-dim", train_opts.train.embed_dim)
      ->check(CLI::Range(2, 4096))
      ->capture_default_str();
  train_cmd->add_option("--temperature", train_opts.train.contrastive.temperature)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--vmf-sigma", train_opts.train.contrastive.vmf_sigma)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--lambda", train_opts.train.barlow.lambda)
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  train_cmd->add_option("--arcface-scale", train_opts.train.supervised.arcface_scale)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--arcface-margin", train_opts.train.supervised.arcface_margin)
      ->check(CLI::Range(0.0, 1.5707))
      ->capture_default_str();
  train_cmd->add_option("--triplet-margin", train_opts.train.supervised.triplet_margin)
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  train_cmd->add_option("--student-temp", train_opts.train.dino_student_temp)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--teacher-temp", train_opts.train.dino_teacher_temp)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--center-momentum", train_opts.train.dino_center_momentum)
      ->check(unit_closed)
      ->capture_default_str();
  train_cmd->add_option("--dino-logits", train_opts.train.dino_logits)
      ->check(CLI::Range(2, 4096))
      ->capture_default_str();
  train_cmd->add_option("--dino-local-views", train_opts.train.dino_local_views)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--ema-momentum", train_opts.train.ema_momentum)
      ->check(unit_closed)
      ->capture_default_str();
  train_cmd->add_option("--queue-capacity", train_opts.train.queue_capacity)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--fastsiam-targets", train_opts.train.fastsiam_targets)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--aug-sigma", train_opts.train.aug_sigma)
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  train_cmd->add_option("--num-identities", train_opts.synth.num_identities)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--views-per-identity", train_opts.synth.views_per_identity)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train_cmd->add_option("--input-dim", train_opts.synth.input_dim)
      ->check(CLI::Range(2, 65536))
      ->capture_default_str();
  train_cmd->add_option("--view-noise-sigma", train_opts.synth.view_noise_sigma)
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  train_cmd->add_option("--drift-sigma", train_opts.synth.drift_sigma)
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  auto* train_seed = train_cmd->add_option("--seed", train_opts.train.seed,
                                           "global seed (drives the dataset and the optimizer)");
  train_seed->envname("TRAPFORGE_SEED");

  // ---- eval
  EvalOptions eval_opts;
  CLI::App* eval_cmd = app.add_subcommand("eval", "compute retrieval and downstream metrics");
  eval_cmd->add_option("--embeddings", eval_opts.embeddings, "embedding CSV (query/test side)")
      ->required();
  eval_cmd->add_option("--gallery", eval_opts.gallery, "embedding CSV (gallery/train side)");
  eval_cmd->add_option("--metric", eval_opts.metrics, "map | knn | probe | pck | miou | multilabel")
      ->check(CLI::IsMember({"map", "knn", "probe", "pck", "miou", "multilabel"}));
  eval_cmd->add_option("--out", eval_opts.out, "EvalReport JSON path")->required();
  eval_cmd->add_option("--k", eval_opts.knn.k)->check(CLI::PositiveNumber)->capture_default_str();
  eval_cmd->add_option("--temperature", eval_opts.knn.temperature)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  eval_cmd->add_option("--learning-rate", eval_opts.probe.learning_rate)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  eval_cmd->add_option("--epochs", eval_opts.probe.epochs)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  eval_cmd->add_option("--threshold", eval_opts.pck_threshold, "PCK distance threshold")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  eval_cmd->add_option("--pck-file", eval_opts.pck_file, "keypoint JSON for pck");
  eval_cmd->add_option("--miou-file", eval_opts.miou_file, "label-map JSON for miou");
  eval_cmd->add_option("--multilabel-file", eval_opts.multilabel_file, "attribute JSON");
  eval_cmd->add_option("--seed", eval_opts.probe.seed)->envname("TRAPFORGE_SEED");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  train_opts.learning_rate_set = lr_opt->count() > 0;

  try {
    if (mine->parsed()) return run_mine(mine_opts);
    if (sweep->parsed()) return run_sweep(sweep_opts);
    if (gradcheck->parsed()) return run_gradcheck(grad_opts);
    if (train_cmd->parsed()) return run_train(train_opts);
    if (eval_cmd->parsed()) return run_eval(eval_opts);
  } catch (const json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return usage_error("no subcommand selected");
}
