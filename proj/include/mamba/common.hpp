// common.hpp - shared scalar/matrix typedefs and error types
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mamba {

using Real = double;
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
using BoolMat = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using BoolVec = Eigen::Array<bool, Eigen::Dynamic, 1>;

// Error taxonomy. Every throw site uses one of these so callers (and the
// CLI) can report the failure class the contract names.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct InvalidInputError : Error {
  explicit InvalidInputError(const std::string& msg) : Error("invalid input: " + msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};
struct CodecError : Error {
  explicit CodecError(const std::string& msg) : Error("codec error: " + msg) {}
};
struct ProtocolError : Error {
  explicit ProtocolError(const std::string& msg) : Error("protocol error: " + msg) {}
};
struct NotReadyError : Error {
  explicit NotReadyError(const std::string& msg) : Error("not ready: " + msg) {}
};
struct InternalError : Error {
  explicit InternalError(const std::string& msg) : Error("internal error: " + msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidInputError(msg);
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

// FNV-1a, used for rng substream derivation and config hashing.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

}  // namespace mamba
