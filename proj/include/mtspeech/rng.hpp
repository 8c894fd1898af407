#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace mtspeech {

// Deterministic random stream. Wraps mt19937_64 but derives variates with
// fixed arithmetic instead of std::*_distribution, whose output is
// implementation-defined; this keeps seeded runs byte-reproducible.
class Rng {
 public:
  Rng() : engine_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  int64_t below(int64_t n) {
    // Modulo bias is negligible for n << 2^64 and keeps the draw count fixed.
    return static_cast<int64_t>(engine_() % static_cast<uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard Gumbel(0,1) sample: -log(-log(u)), u ~ U(0,1).
  double gumbel() {
    double u = uniform();
    if (u <= 0.0) u = 0x1.0p-53;
    return -std::log(-std::log(u));
  }

  // Box-Muller; consumes two uniforms per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Derive an independent child stream; the parent advances by one draw.
  Rng split() { return Rng(mix(engine_())); }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

 private:
  static uint64_t mix(uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace mtspeech
