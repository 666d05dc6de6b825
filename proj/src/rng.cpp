#include "htmle/rng.hpp"

#include <cmath>

namespace htmle {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                          std::uint64_t index) {
  return splitmix64(splitmix64(base + 0x9E3779B97F4A7C15ULL * stream) + index);
}

double Rng::normal() {
  // Box-Muller, cosine branch only: two uniforms per draw, no hidden state.
  const double u1 = uniform_pos();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return r * std::cos(2.0 * M_PI * u2);
}

std::uint64_t Rng::uniform_int(std::uint64_t bound) {
  // Rejection sampling on the top bits keeps the draw unbiased for any bound.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % bound;
}

}  // namespace htmle
