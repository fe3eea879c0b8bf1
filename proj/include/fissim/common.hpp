// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared basics: error type with stable codes, time units, hashing,
// deterministic payload synthesis and small RNG helpers.

#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace fissim {

using json = nlohmann::json;

// Simulation time. Milliseconds since cluster start; double so profile
// arithmetic stays exact enough for sub-ms step costs.
using TimeMs = double;

enum class ErrorCode {
  Validation,
  DuplicateApp,
  NotFound,
  Placement,
  Oom,
  DeterminismHazard,
  DeterminismViolation,
  DanglingRef,
  Dispatch,
  Integrity,
  Protocol,
  Timeout,
  Infeasible,
  Config,
  Connection,
  Cancelled,
  Internal,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::Validation: return "validation";
    case ErrorCode::DuplicateApp: return "duplicate_app";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::Placement: return "placement";
    case ErrorCode::Oom: return "oom";
    case ErrorCode::DeterminismHazard: return "determinism_hazard";
    case ErrorCode::DeterminismViolation: return "determinism_violation";
    case ErrorCode::DanglingRef: return "dangling_ref";
    case ErrorCode::Dispatch: return "dispatch";
    case ErrorCode::Integrity: return "integrity";
    case ErrorCode::Protocol: return "protocol";
    case ErrorCode::Timeout: return "timeout";
    case ErrorCode::Infeasible: return "infeasible";
    case ErrorCode::Config: return "config";
    case ErrorCode::Connection: return "connection";
    case ErrorCode::Cancelled: return "cancelled";
    case ErrorCode::Internal: return "internal";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code) {}

  ErrorCode code() const { return code_; }

  json to_json() const {
    return json{{"error", {{"code", to_string(code_)}, {"message", what()}}}};
  }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) { throw Error(code, msg); }

namespace detail {

// Compact SHA-256, used for canonical task digests. Standard FIPS 180-4
// constants; verified against the usual test vectors in the unit suite.
class Sha256 {
 public:
  Sha256() { reset(); }

  void reset() {
    state_ = {0x6a09e667u, 0xbb67ae85u, 0x3c6ef372u, 0xa54ff53au,
              0x510e527fu, 0x9b05688cu, 0x1f83d9abu, 0x5be0cd19u};
    buffer_len_ = 0;
    total_len_ = 0;
  }

  void update(const void* data, size_t len) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    total_len_ += len;
    while (len > 0) {
      size_t take = std::min(len, sizeof(buffer_) - buffer_len_);
      std::memcpy(buffer_ + buffer_len_, p, take);
      buffer_len_ += take;
      p += take;
      len -= take;
      if (buffer_len_ == sizeof(buffer_)) {
        process_block(buffer_);
        buffer_len_ = 0;
      }
    }
  }

  std::array<uint8_t, 32> digest() {
    uint64_t bit_len = total_len_ * 8;
    uint8_t pad = 0x80;
    update(&pad, 1);
    uint8_t zero = 0;
    while (buffer_len_ != 56) update(&zero, 1);
    uint8_t len_be[8];
    for (int i = 0; i < 8; ++i) len_be[i] = static_cast<uint8_t>(bit_len >> (56 - 8 * i));
    update(len_be, 8);
    std::array<uint8_t, 32> out{};
    for (int i = 0; i < 8; ++i) {
      out[4 * i + 0] = static_cast<uint8_t>(state_[i] >> 24);
      out[4 * i + 1] = static_cast<uint8_t>(state_[i] >> 16);
      out[4 * i + 2] = static_cast<uint8_t>(state_[i] >> 8);
      out[4 * i + 3] = static_cast<uint8_t>(state_[i]);
    }
    return out;
  }

 private:
  static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

  void process_block(const uint8_t* block) {
    static constexpr uint32_t k[64] = {
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
        0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
        0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
        0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
        0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
        0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
        0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2};
    uint32_t w[64];
    for (int i = 0; i < 16; ++i) {
      w[i] = (uint32_t(block[4 * i]) << 24) | (uint32_t(block[4 * i + 1]) << 16) |
             (uint32_t(block[4 * i + 2]) << 8) | uint32_t(block[4 * i + 3]);
    }
    for (int i = 16; i < 64; ++i) {
      uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    uint32_t a = state_[0], b = state_[1], c = state_[2], d = state_[3];
    uint32_t e = state_[4], f = state_[5], g = state_[6], h = state_[7];
    for (int i = 0; i < 64; ++i) {
      uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      uint32_t ch = (e & f) ^ (~e & g);
      uint32_t t1 = h + s1 + ch + k[i] + w[i];
      uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      uint32_t t2 = s0 + maj;
      h = g; g = f; f = e; e = d + t1;
      d = c; c = b; b = a; a = t1 + t2;
    }
    state_[0] += a; state_[1] += b; state_[2] += c; state_[3] += d;
    state_[4] += e; state_[5] += f; state_[6] += g; state_[7] += h;
  }

  std::array<uint32_t, 8> state_{};
  uint8_t buffer_[64]{};
  size_t buffer_len_ = 0;
  uint64_t total_len_ = 0;
};

}  // namespace detail

inline std::string sha256_hex(std::string_view bytes) {
  detail::Sha256 h;
  h.update(bytes.data(), bytes.size());
  auto d = h.digest();
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (uint8_t b : d) {
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 0xf]);
  }
  return out;
}

// splitmix64; used for seeding and payload synthesis.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Fast 64-bit checksum over payload bytes. 8-byte lanes with a splitmix-style
// finalizer; position-sensitive so swapped or dropped chunks are caught.
inline uint64_t checksum64(const uint8_t* data, size_t len) {
  uint64_t h = 0x9e3779b97f4a7c15ull ^ (len * 0xff51afd7ed558ccdull);
  size_t i = 0;
  while (i + 8 <= len) {
    uint64_t lane;
    std::memcpy(&lane, data + i, 8);
    h = (h ^ lane) * 0x2545f4914f6cdd1dull;
    h ^= h >> 29;
    i += 8;
  }
  uint64_t tail = 0;
  int shift = 0;
  while (i < len) {
    tail |= uint64_t(data[i]) << shift;
    shift += 8;
    ++i;
  }
  h = (h ^ tail) * 0x2545f4914f6cdd1dull;
  h ^= h >> 32;
  return h;
}

inline uint64_t checksum64(const std::vector<uint8_t>& v) { return checksum64(v.data(), v.size()); }

// Deterministic pseudo-random payload bytes. Seeded per DataRef so transfers
// are byte-verifiable end to end without storing expected buffers.
inline void synth_payload_into(uint64_t seed, uint8_t* out, size_t n) {
  uint64_t s = seed ^ 0xd6e8feb86659fd93ull;
  size_t i = 0;
  while (i + 8 <= n) {
    uint64_t v = splitmix64(s);
    std::memcpy(out + i, &v, 8);
    i += 8;
  }
  if (i < n) {
    uint64_t v = splitmix64(s);
    std::memcpy(out + i, &v, n - i);
  }
}

inline std::vector<uint8_t> synth_payload(uint64_t seed, size_t n) {
  std::vector<uint8_t> out(n);
  if (n > 0) synth_payload_into(seed, out.data(), n);
  return out;
}

// Fixed-point style helper: format a TimeMs without locale surprises.
inline std::string format_ms(TimeMs t) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", t);
  return buf;
}

}  // namespace fissim
