#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace trapforge::trapstream {

// Axis-aligned box in frame-relative fractions, top-left origin.
struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
};

// Tolerance for source rounding on the far edges (x+w, y+h may exceed 1 by
// at most this much).
inline constexpr double kBBoxEdgeTolerance = 1e-6;

// Throws ValidationError naming `context` when the box invariants fail.
void validate_bbox(const BBox& box, const std::string& context);

// Intersection area over union area; 0 for disjoint boxes.
double iou(const BBox& a, const BBox& b);

struct Detection {
  std::string frame_id;
  std::int64_t timestamp = 0;
  std::string camera_id;
  BBox bbox;
  double confidence = 0.0;
  int det_index = 0;
};

struct Frame {
  std::string frame_id;
  std::int64_t timestamp = 0;
  std::vector<Detection> detections;
};

// Frames of one camera, sorted by timestamp ascending.
struct FrameSequence {
  std::string camera_id;
  std::vector<Frame> frames;
};

struct MiningConfig {
  double iou_threshold = 0.2;
  std::int64_t max_gap_seconds = 120;
  double min_confidence = 0.5;
};

void validate_mining_config(const MiningConfig& cfg);

struct DetectionRef {
  std::string frame_id;
  int det_index = 0;

  friend bool operator==(const DetectionRef&, const DetectionRef&) = default;
};

struct TemporalPair {
  DetectionRef anchor;
  DetectionRef partner;
  double iou = 0.0;
  std::int64_t gap_seconds = 0;
};

struct PairManifest {
  MiningConfig config;
  std::vector<TemporalPair> pairs;
  std::string source_digest;
};

// Parses a detection-log document: {"images": [{"file", "camera_id",
// "timestamp", "detections": [{"conf", "bbox": [x,y,w,h]}]}]}.
// Returns one sequence per camera_id, cameras ordered by id, frames sorted
// by timestamp. No confidence filtering happens here.
std::vector<FrameSequence> parse_detections(std::string_view text);

// Canonical document for the sequences; parse(serialize(parse(x))) == parse(x).
std::string serialize_detections(const std::vector<FrameSequence>& sequences);

// Keeps detections with confidence strictly greater than min_confidence.
// Frames left with no detections stay in the sequence.
FrameSequence filter_confident(const FrameSequence& seq, double min_confidence);

// Emits every (anchor, later-candidate) pair with IoU strictly above the
// threshold and 0 < gap <= max_gap_seconds. All qualifying candidates are
// kept; no one-to-one assignment. Output order: anchor frame, anchor
// det_index, partner frame, partner det_index. The confidence filter is
// applied internally so the pair invariants hold for unfiltered input too.
PairManifest mine_pairs(const FrameSequence& seq, const MiningConfig& cfg);

// Mines each sequence and concatenates the results in camera_id order.
PairManifest mine_pairs(const std::vector<FrameSequence>& sequences, const MiningConfig& cfg,
                        std::string source_digest = {});

// Pair counts per threshold; thresholds must be ascending.
std::vector<std::pair<double, std::size_t>> sweep_thresholds(const std::vector<FrameSequence>& sequences,
                                                             const MiningConfig& cfg,
                                                             const std::vector<double>& thresholds);

// JSON Lines: one header line (config + source digest) then one line per
// pair with the iou printed to 6 decimal places.
std::string write_manifest(const PairManifest& manifest);
PairManifest read_manifest(std::string_view text);

}  // namespace trapforge::trapstream
