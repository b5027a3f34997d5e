#pragma once

// Deterministic random helpers.  std:: distributions are implementation
// defined, so anything that must reproduce byte-identical output across
// toolchains is hand-rolled on top of mt19937_64.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace vqlot {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1).
  double uniform() { return (engine_() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1] ; safe for log().
  double uniform_positive() { return 1.0 - uniform(); }

  double exponential(double rate) { return -std::log(uniform_positive()) / rate; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Index drawn from an unnormalized weight vector.
  int categorical(const std::vector<double>& weights, double total) {
    double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace vqlot
