#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace svfm {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11). Chosen so
// every (seed, stream) pair yields an independent, reproducible substream:
// Monte Carlo replication k simply uses stream k, with no sequential
// dependence between replications.
class Philox4x32 {
 public:
  // One 10-round block: 4 output words from a 128-bit counter + 64-bit key.
  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = std::uint64_t(kMul0) * ctr[0];
      const std::uint64_t p1 = std::uint64_t(kMul1) * ctr[2];
      ctr = {std::uint32_t(p1 >> 32) ^ ctr[1] ^ key[0], std::uint32_t(p1),
             std::uint32_t(p0 >> 32) ^ ctr[3] ^ key[1], std::uint32_t(p0)};
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
};

// Stream of uniforms/normals backed by Philox4x32-10. The key holds the seed
// and the upper counter words hold the stream id, so (seed, stream) fully
// determines the sequence.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_{std::uint32_t(seed), std::uint32_t(seed >> 32)},
        stream_lo_(std::uint32_t(stream)),
        stream_hi_(std::uint32_t(stream >> 32)) {}

  std::uint32_t next_u32() {
    if (idx_ == 4) refill();
    return out_[idx_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return lo | (hi << 32);
  }

  // Uniform on the open interval (0, 1) with 53-bit resolution.
  double uniform01() {
    return (double(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Standard normal via Box-Muller; the spare deviate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  void refill() {
    out_ = Philox4x32::block({block_lo_, block_hi_, stream_lo_, stream_hi_}, key_);
    if (++block_lo_ == 0) ++block_hi_;
    idx_ = 0;
  }

  std::array<std::uint32_t, 2> key_;
  std::uint32_t stream_lo_, stream_hi_;
  std::uint32_t block_lo_ = 0, block_hi_ = 0;
  std::array<std::uint32_t, 4> out_{};
  int idx_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace svfm
