// Shared fixtures and a small subprocess harness for CLI-level tests.
#pragma once

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "trapforge/rng.hpp"
#include "trapforge/trapstream.hpp"

namespace fixtures {

// Wandering-box detection log: `num_frames` frames split across two cameras,
// three tracked boxes each, confidences spread over [0.3, 0.99].
inline std::string wandering_detection_log(int num_frames, std::uint64_t seed = 0) {
  trapforge::Rng rng(seed);
  std::array<std::pair<double, double>, 3> centers = {{{0.1, 0.1}, {0.5, 0.45}, {0.25, 0.6}}};

  std::vector<trapforge::trapstream::FrameSequence> sequences(2);
  sequences[0].camera_id = "camA";
  sequences[1].camera_id = "camB";

  for (int f = 0; f < num_frames; ++f) {
    trapforge::trapstream::Frame frame;
    char name[32];
    std::snprintf(name, sizeof(name), "frame%03d.jpg", f);
    frame.frame_id = name;
    frame.timestamp = 1000 + static_cast<std::int64_t>(f) * 40;
    auto& seq = sequences[static_cast<std::size_t>(f % 2)];
    int det_index = 0;
    for (auto& [x, y] : centers) {
      x = std::clamp(x + rng.uniform(-0.03, 0.03), 0.0, 0.65);
      y = std::clamp(y + rng.uniform(-0.03, 0.03), 0.0, 0.65);
      trapforge::trapstream::Detection det;
      det.frame_id = frame.frame_id;
      det.timestamp = frame.timestamp;
      det.camera_id = seq.camera_id;
      det.bbox = trapforge::trapstream::BBox{x, y, 0.3, 0.3};
      det.confidence = 0.3 + 0.69 * rng.uniform01();
      det.det_index = det_index++;
      frame.detections.push_back(std::move(det));
    }
    seq.frames.push_back(std::move(frame));
  }
  return trapforge::trapstream::serialize_detections(sequences);
}

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr interleaved
};

inline CommandResult run_command(const std::string& command) {
  CommandResult result;
  FILE* pipe = popen((command + " 2>&1").c_str(), "r");
  if (pipe == nullptr) return result;
  char buffer[4096];
  while (std::fgets(buffer, sizeof(buffer), pipe) != nullptr) result.output += buffer;
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

// Binary under test, injected by ctest.
inline std::string cli_path() {
  const char* env = std::getenv("TRAPFORGE_BIN");
  return env != nullptr ? env : "./trapforge";
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path() / ("trapforge_" + tag + "_XXXXXX");
    std::string templ = base.string();
    if (mkdtemp(templ.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = templ;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

inline std::size_t count_lines(const std::string& text) {
  std::size_t lines = 0;
  for (const char c : text) {
    if (c == '\n') ++lines;
  }
  return lines;
}

}  // namespace fixtures
