#pragma once

// Counter-based random numbers. The generator is Philox4x32-10 (Salmon et al.,
// "Parallel random numbers: as easy as 1, 2, 3", SC'11) with
//   key     = (seed & 0xffffffff, seed >> 32)
//   counter = (block & 0xffffffff, block >> 32, stream & 0xffffffff, stream >> 32)
// Each block yields four 32-bit words. Uniform doubles take the top 53 bits of
// (w1 << 32 | w0) and (w3 << 32 | w2); normals use Box-Muller on that pair:
//   r = sqrt(-2 ln(1 - u0)), n0 = r cos(2 pi u1), n1 = r sin(2 pi u1).
// Any implementation following these rules reproduces the same streams.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "lieflow/core.hpp"

namespace lieflow {

using PhiloxBlock = std::array<std::uint32_t, 4>;

inline PhiloxBlock philox4x32_10(PhiloxBlock ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kW0;
      key[1] += kW1;
    }
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

/// Mixes a list of small integers into a 64-bit stream id (splitmix64 finalizer).
inline std::uint64_t stream_id(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243F6A8885A308D3ull;
  for (std::uint64_t p : parts) {
    h ^= p + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    std::uint64_t z = h;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    h = z ^ (z >> 31);
  }
  return h;
}

/// Sequential view over one Philox stream.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

  PhiloxBlock next_block() {
    PhiloxBlock ctr{static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
                    static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    ++block_;
    return philox4x32_10(ctr, {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
  }

  /// Uniform on [0, 1).
  double uniform() {
    if (!have_uniform_) {
      PhiloxBlock b = next_block();
      uniform_cache_ = to_unit(b[2], b[3]);
      have_uniform_ = true;
      return to_unit(b[0], b[1]);
    }
    have_uniform_ = false;
    return uniform_cache_;
  }

  double normal() {
    if (have_normal_) {
      have_normal_ = false;
      return normal_cache_;
    }
    PhiloxBlock b = next_block();
    const double u0 = to_unit(b[0], b[1]), u1 = to_unit(b[2], b[3]);
    const double r = std::sqrt(-2.0 * std::log(1.0 - u0));
    const double angle = 2.0 * std::numbers::pi * u1;
    normal_cache_ = r * std::sin(angle);
    have_normal_ = true;
    return r * std::cos(angle);
  }

  Vector normal_vector(Index n) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  Matrix normal_matrix(Index rows, Index cols) {
    // Row-major fill order.
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = normal();
    return m;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n; }

 private:
  static double to_unit(std::uint32_t lo, std::uint32_t hi) {
    const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32) | lo;
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  bool have_normal_ = false;
  double normal_cache_ = 0.0;
  bool have_uniform_ = false;
  double uniform_cache_ = 0.0;
};

}  // namespace lieflow
