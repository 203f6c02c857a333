// codec.hpp - bit-exact wire format for broadcast messages
//
// Fixed 28-byte frame, big-endian integers:
//   agent_id(2) | step(4) | z_payload(20) | action(1) | alive(1)
// The z payload packs 32 five-bit class indices MSB-first: exactly 160
// bits for the stochastic state.
#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "mamba/common.hpp"

namespace mamba {

constexpr int kWireGroups = 32;
constexpr int kWireIndexBits = 5;
constexpr int kPayloadBytes = 20;  // 32 * 5 bits
constexpr int kFrameBytes = 28;
constexpr int kPayloadBits = kWireGroups * kWireIndexBits;

using Frame = std::array<std::uint8_t, kFrameBytes>;

struct Message {
  std::uint16_t agent_id = 0;
  std::uint32_t step = 0;
  std::vector<int> z_indices;  // kWireGroups entries, each in [0, 32)
  std::uint8_t action = 0;
  bool alive = true;

  bool operator==(const Message& o) const {
    return agent_id == o.agent_id && step == o.step && z_indices == o.z_indices &&
           action == o.action && alive == o.alive;
  }
};

// The wire format only carries 32 groups of up to 32 classes; a latent
// shape is wire-compatible when the packed indices are self-describing.
inline void validate_wire_latent_shape(int groups, int classes) {
  if (groups != kWireGroups)
    throw CodecError("wire format requires exactly 32 latent groups, got " + std::to_string(groups));
  if (classes < 2 || classes > 32 || (classes & (classes - 1)) != 0)
    throw CodecError("wire format requires a power-of-two class count <= 32, got " +
                     std::to_string(classes));
}

inline Frame encode_message(const Message& m) {
  if (m.z_indices.size() != kWireGroups)
    throw CodecError("message must carry exactly 32 class indices");
  Frame f{};
  f[0] = static_cast<std::uint8_t>(m.agent_id >> 8);
  f[1] = static_cast<std::uint8_t>(m.agent_id & 0xff);
  f[2] = static_cast<std::uint8_t>(m.step >> 24);
  f[3] = static_cast<std::uint8_t>((m.step >> 16) & 0xff);
  f[4] = static_cast<std::uint8_t>((m.step >> 8) & 0xff);
  f[5] = static_cast<std::uint8_t>(m.step & 0xff);
  for (int g = 0; g < kWireGroups; ++g) {
    const int v = m.z_indices[g];
    if (v < 0 || v >= 32) throw CodecError("class index out of range: " + std::to_string(v));
    for (int i = 0; i < kWireIndexBits; ++i) {
      if ((v >> (kWireIndexBits - 1 - i)) & 1) {
        const int bit = g * kWireIndexBits + i;  // 0 = MSB of payload byte 0
        f[6 + bit / 8] |= static_cast<std::uint8_t>(0x80u >> (bit % 8));
      }
    }
  }
  f[26] = m.action;
  f[27] = m.alive ? 1 : 0;
  return f;
}

inline Message decode_message(const Frame& f) {
  Message m;
  m.agent_id = static_cast<std::uint16_t>((f[0] << 8) | f[1]);
  m.step = (static_cast<std::uint32_t>(f[2]) << 24) | (static_cast<std::uint32_t>(f[3]) << 16) |
           (static_cast<std::uint32_t>(f[4]) << 8) | f[5];
  m.z_indices.resize(kWireGroups);
  for (int g = 0; g < kWireGroups; ++g) {
    int v = 0;
    for (int i = 0; i < kWireIndexBits; ++i) {
      const int bit = g * kWireIndexBits + i;
      v = (v << 1) | ((f[6 + bit / 8] >> (7 - bit % 8)) & 1);
    }
    m.z_indices[g] = v;
  }
  m.action = f[26];
  if (f[27] > 1) throw CodecError("alive byte must be 0 or 1, got " + std::to_string(f[27]));
  m.alive = f[27] == 1;
  return m;
}

inline std::string hex_dump(const Frame& f) {
  std::string out;
  char buf[4];
  for (int i = 0; i < kFrameBytes; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", f[i]);
    out += buf;
    if (i + 1 < kFrameBytes) out += ' ';
  }
  return out;
}

inline std::string describe_message(const Message& m) {
  std::string out = "agent=" + std::to_string(m.agent_id) + " step=" + std::to_string(m.step) +
                    " action=" + std::to_string(m.action) + " alive=" + (m.alive ? "1" : "0") + " z=[";
  for (int g = 0; g < static_cast<int>(m.z_indices.size()); ++g) {
    out += std::to_string(m.z_indices[g]);
    if (g + 1 < static_cast<int>(m.z_indices.size())) out += ',';
  }
  out += ']';
  return out;
}

}  // namespace mamba
