#pragma once

#include <cstdint>
#include <random>

namespace htmle {

// Seed-derivation streams. Derived seeds are splitmix64 hashes so that
// per-replication, truth-population and fold-assignment randomness never
// overlap and results do not depend on execution order or thread count.
enum : std::uint64_t {
  kStreamReplication = 0,
  kStreamTruth = 1,
  kStreamFoldsQ = 2,
  kStreamFoldsG = 3,
  kStreamScratch = 4,
};

std::uint64_t splitmix64(std::uint64_t x);

// seed for (base, stream, index): splitmix64(splitmix64(base + GOLDEN*stream) + index)
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                          std::uint64_t index);

// Deterministic, platform-independent draws on top of mt19937_64.
// The standard distributions are implementation-defined, so uniforms are
// built from the top 53 bits and normals via Box-Muller (no pair caching).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform on (0, 1]; safe as a log argument.
  double uniform_pos() {
    return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  }

  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer on [0, bound) via rejection; bound > 0.
  std::uint64_t uniform_int(std::uint64_t bound);

 private:
  std::mt19937_64 engine_;
};

}  // namespace htmle
