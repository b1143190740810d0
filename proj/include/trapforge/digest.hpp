#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace trapforge {

// FNV-1a 64-bit over raw bytes; used to fingerprint input files in manifests
// and reports.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (const char c : bytes) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ull;
  }
  return hash;
}

inline std::string digest_hex(std::string_view bytes) {
  static const char* kHex = "0123456789abcdef";
  std::uint64_t hash = fnv1a64(bytes);
  std::string out = "fnv1a64:";
  for (int shift = 60; shift >= 0; shift -= 4) {
    out.push_back(kHex[(hash >> shift) & 0xf]);
  }
  return out;
}

}  // namespace trapforge
