#include "trapforge/trapstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "trapforge/errors.hpp"

namespace trapforge::trapstream {

using nlohmann::json;

namespace {

// Line/column for a byte offset, for parse diagnostics.
std::pair<std::size_t, std::size_t> locate(std::string_view text, std::size_t offset) {
  std::size_t line = 1;
  std::size_t col = 1;
  const std::size_t end = std::min(offset, text.size());
  for (std::size_t i = 0; i < end; ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

[[noreturn]] void throw_parse_error(std::string_view text, const json::exception& e) {
  std::size_t offset = 0;
  if (const auto* pe = dynamic_cast<const json::parse_error*>(&e)) {
    offset = pe->byte;
  }
  const auto [line, col] = locate(text, offset);
  std::ostringstream msg;
  msg << "malformed detection log at line " << line << ", column " << col << " (byte " << offset
      << "): " << e.what();
  throw ParseError(msg.str(), line, offset);
}

const json& require(const json& obj, const char* key, const std::string& context) {
  const auto it = obj.find(key);
  if (it == obj.end()) {
    throw ParseError("missing field \"" + std::string(key) + "\" in " + context);
  }
  return *it;
}

}  // namespace

void validate_bbox(const BBox& box, const std::string& context) {
  const auto fail = [&](const std::string& what) {
    throw ValidationError("invalid bbox in " + context + ": " + what);
  };
  if (!std::isfinite(box.x) || !std::isfinite(box.y) || !std::isfinite(box.w) || !std::isfinite(box.h)) {
    fail("non-finite coordinate");
  }
  if (box.x < 0.0 || box.y < 0.0) fail("negative origin");
  if (box.w <= 0.0) fail("width must be positive");
  if (box.h <= 0.0) fail("height must be positive");
  if (box.x + box.w > 1.0 + kBBoxEdgeTolerance) fail("x+w exceeds frame");
  if (box.y + box.h > 1.0 + kBBoxEdgeTolerance) fail("y+h exceeds frame");
}

double iou(const BBox& a, const BBox& b) {
  const double ix = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double iy = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return inter / uni;
}

void validate_mining_config(const MiningConfig& cfg) {
  if (!(cfg.iou_threshold >= 0.0 && cfg.iou_threshold < 1.0)) {
    throw ValidationError("iou_threshold must be in [0, 1)");
  }
  if (cfg.max_gap_seconds <= 0) {
    throw ValidationError("max_gap_seconds must be positive");
  }
  if (!(cfg.min_confidence >= 0.0 && cfg.min_confidence <= 1.0)) {
    throw ValidationError("min_confidence must be in [0, 1]");
  }
}

std::vector<FrameSequence> parse_detections(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw_parse_error(text, e);
  }

  if (!doc.is_object() || !doc.contains("images")) {
    throw ParseError("detection log must be an object with an \"images\" array");
  }
  const json& images = doc["images"];
  if (!images.is_array()) {
    throw ParseError("\"images\" must be an array");
  }

  // camera_id -> frames in document order; sorted per camera afterwards.
  std::map<std::string, std::vector<Frame>> by_camera;
  std::map<std::string, std::set<std::pair<std::string, int>>> seen_keys;

  for (const json& image : images) {
    if (!image.is_object()) throw ParseError("image entry must be an object");
    const std::string file = require(image, "file", "image entry").get<std::string>();
    const std::string camera = require(image, "camera_id", "image \"" + file + "\"").get<std::string>();
    const json& ts = require(image, "timestamp", "image \"" + file + "\"");
    if (!ts.is_number_integer()) {
      throw ParseError("timestamp of image \"" + file + "\" must be integer seconds");
    }

    Frame frame;
    frame.frame_id = file;
    frame.timestamp = ts.get<std::int64_t>();

    const json& dets = require(image, "detections", "image \"" + file + "\"");
    if (!dets.is_array()) throw ParseError("detections of image \"" + file + "\" must be an array");

    int det_index = 0;
    for (const json& det : dets) {
      if (!det.is_object()) throw ParseError("detection entry in image \"" + file + "\" must be an object");
      const json& conf = require(det, "conf", "detection in image \"" + file + "\"");
      const json& bbox = require(det, "bbox", "detection in image \"" + file + "\"");
      if (!conf.is_number()) throw ParseError("conf in image \"" + file + "\" must be a number");
      if (!bbox.is_array() || bbox.size() != 4 ||
          !std::all_of(bbox.begin(), bbox.end(), [](const json& v) { return v.is_number(); })) {
        throw ParseError("bbox in image \"" + file + "\" must be [x, y, w, h]");
      }

      Detection d;
      d.frame_id = file;
      d.timestamp = frame.timestamp;
      d.camera_id = camera;
      d.bbox = BBox{bbox[0].get<double>(), bbox[1].get<double>(), bbox[2].get<double>(),
                    bbox[3].get<double>()};
      d.confidence = conf.get<double>();
      d.det_index = det_index++;

      validate_bbox(d.bbox, "frame \"" + file + "\"");
      if (!(d.confidence >= 0.0 && d.confidence <= 1.0)) {
        throw ValidationError("confidence out of [0,1] in frame \"" + file + "\"");
      }
      if (!seen_keys[camera].insert({d.frame_id, d.det_index}).second) {
        throw ParseError("duplicate detection key (\"" + d.frame_id + "\", " +
                         std::to_string(d.det_index) + ") in camera \"" + camera + "\"");
      }
      frame.detections.push_back(std::move(d));
    }

    auto& frames = by_camera[camera];
    for (const Frame& existing : frames) {
      if (existing.frame_id == frame.frame_id) {
        throw ParseError("duplicate frame \"" + frame.frame_id + "\" in camera \"" + camera + "\"");
      }
    }
    frames.push_back(std::move(frame));
  }

  std::vector<FrameSequence> sequences;
  sequences.reserve(by_camera.size());
  for (auto& [camera, frames] : by_camera) {
    std::stable_sort(frames.begin(), frames.end(),
                     [](const Frame& a, const Frame& b) { return a.timestamp < b.timestamp; });
    sequences.push_back(FrameSequence{camera, std::move(frames)});
  }
  return sequences;
}

std::string serialize_detections(const std::vector<FrameSequence>& sequences) {
  json images = json::array();
  for (const FrameSequence& seq : sequences) {
    for (const Frame& frame : seq.frames) {
      json dets = json::array();
      for (const Detection& d : frame.detections) {
        dets.push_back({{"conf", d.confidence}, {"bbox", {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h}}});
      }
      images.push_back({{"file", frame.frame_id},
                        {"camera_id", seq.camera_id},
                        {"timestamp", frame.timestamp},
                        {"detections", std::move(dets)}});
    }
  }
  return json{{"images", std::move(images)}}.dump(2) + "\n";
}

FrameSequence filter_confident(const FrameSequence& seq, double min_confidence) {
  FrameSequence out;
  out.camera_id = seq.camera_id;
  out.frames.reserve(seq.frames.size());
  for (const Frame& frame : seq.frames) {
    Frame kept;
    kept.frame_id = frame.frame_id;
    kept.timestamp = frame.timestamp;
    for (const Detection& d : frame.detections) {
      if (d.confidence > min_confidence) kept.detections.push_back(d);
    }
    out.frames.push_back(std::move(kept));
  }
  return out;
}

PairManifest mine_pairs(const FrameSequence& seq, const MiningConfig& cfg) {
  validate_mining_config(cfg);
  const FrameSequence filtered = filter_confident(seq, cfg.min_confidence);

  PairManifest manifest;
  manifest.config = cfg;
  for (std::size_t i = 0; i < filtered.frames.size(); ++i) {
    const Frame& anchor_frame = filtered.frames[i];
    for (const Detection& anchor : anchor_frame.detections) {
      for (std::size_t j = i + 1; j < filtered.frames.size(); ++j) {
        const Frame& partner_frame = filtered.frames[j];
        const std::int64_t gap = partner_frame.timestamp - anchor_frame.timestamp;
        if (gap <= 0) continue;
        if (gap > cfg.max_gap_seconds) break;  // frames sorted; later gaps only grow
        for (const Detection& partner : partner_frame.detections) {
          const double overlap = iou(anchor.bbox, partner.bbox);
          if (overlap > cfg.iou_threshold) {
            manifest.pairs.push_back(TemporalPair{{anchor.frame_id, anchor.det_index},
                                                  {partner.frame_id, partner.det_index},
                                                  overlap,
                                                  gap});
          }
        }
      }
    }
  }
  return manifest;
}

PairManifest mine_pairs(const std::vector<FrameSequence>& sequences, const MiningConfig& cfg,
                        std::string source_digest) {
  PairManifest merged;
  merged.config = cfg;
  merged.source_digest = std::move(source_digest);
  for (const FrameSequence& seq : sequences) {
    PairManifest part = mine_pairs(seq, cfg);
    merged.pairs.insert(merged.pairs.end(), part.pairs.begin(), part.pairs.end());
  }
  return merged;
}

std::vector<std::pair<double, std::size_t>> sweep_thresholds(const std::vector<FrameSequence>& sequences,
                                                             const MiningConfig& cfg,
                                                             const std::vector<double>& thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw ValidationError("sweep thresholds must be sorted ascending");
  }
  std::vector<std::pair<double, std::size_t>> counts;
  counts.reserve(thresholds.size());
  for (const double alpha : thresholds) {
    MiningConfig swept = cfg;
    swept.iou_threshold = alpha;
    counts.emplace_back(alpha, mine_pairs(sequences, swept).pairs.size());
  }
  return counts;
}

std::string write_manifest(const PairManifest& manifest) {
  std::ostringstream out;
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.6f", manifest.config.iou_threshold);
  const std::string alpha = buffer;
  std::snprintf(buffer, sizeof(buffer), "%.6f", manifest.config.min_confidence);
  const std::string min_conf = buffer;

  out << "{\"config\":{\"iou_threshold\":" << alpha
      << ",\"max_gap_seconds\":" << manifest.config.max_gap_seconds
      << ",\"min_confidence\":" << min_conf << "},\"source_digest\":" << json(manifest.source_digest)
      << "}\n";
  for (const TemporalPair& pair : manifest.pairs) {
    std::snprintf(buffer, sizeof(buffer), "%.6f", pair.iou);
    out << "{\"anchor\":{\"file\":" << json(pair.anchor.frame_id) << ",\"det\":" << pair.anchor.det_index
        << "},\"partner\":{\"file\":" << json(pair.partner.frame_id)
        << ",\"det\":" << pair.partner.det_index << "},\"iou\":" << buffer << ",\"gap_s\":" << pair.gap_seconds
        << "}\n";
  }
  return out.str();
}

PairManifest read_manifest(std::string_view text) {
  PairManifest manifest;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("malformed manifest line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
    if (!have_header) {
      const json& cfg = require(row, "config", "manifest header");
      manifest.config.iou_threshold = require(cfg, "iou_threshold", "manifest header").get<double>();
      manifest.config.max_gap_seconds = require(cfg, "max_gap_seconds", "manifest header").get<std::int64_t>();
      manifest.config.min_confidence = require(cfg, "min_confidence", "manifest header").get<double>();
      manifest.source_digest = require(row, "source_digest", "manifest header").get<std::string>();
      have_header = true;
      continue;
    }
    TemporalPair pair;
    const json& anchor = require(row, "anchor", "manifest pair");
    const json& partner = require(row, "partner", "manifest pair");
    pair.anchor = {require(anchor, "file", "manifest anchor").get<std::string>(),
                   require(anchor, "det", "manifest anchor").get<int>()};
    pair.partner = {require(partner, "file", "manifest partner").get<std::string>(),
                    require(partner, "det", "manifest partner").get<int>()};
    pair.iou = require(row, "iou", "manifest pair").get<double>();
    pair.gap_seconds = require(row, "gap_s", "manifest pair").get<std::int64_t>();
    manifest.pairs.push_back(std::move(pair));
  }
  if (!have_header) {
    throw ParseError("manifest is missing its header line");
  }
  return manifest;
}

}  // namespace trapforge::trapstream
