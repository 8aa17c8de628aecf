#pragma once

#include <cmath>
#include <cstdint>

// Deterministic, counter-based random number generation.  Every consumer
// derives its own stream from a root seed plus a stream key, so results are
// independent of evaluation order and thread count.

namespace tp {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Combine a seed with a stream key into a new seed.
inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

// Uniform double in (0, 1), never exactly 0.
inline double uniform01(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// One standard normal from a (seed, counter) pair via Box-Muller.  Stateless:
// the same pair always yields the same value, regardless of call order.
inline double normal_at(std::uint64_t seed, std::uint64_t counter) {
  const std::uint64_t base = mix(seed, counter >> 1);
  const double u1 = uniform01(splitmix64(base));
  const double u2 = uniform01(splitmix64(base + 0x9e3779b97f4a7c15ULL));
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 6.283185307179586476925286766559 * u2;
  return (counter & 1) ? r * std::sin(theta) : r * std::cos(theta);
}

// Sequential stream of standard normals over an internal counter.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : seed_(seed) {}
  double next() { return normal_at(seed_, counter_++); }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace tp
