#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>
#include <random>

namespace qp {

// Deterministic random source. All sampling is implemented on top of the
// raw 64-bit stream so that two runs with the same seed produce identical
// draws regardless of how the standard library implements distributions.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  uint64_t raw() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller. No cached spare so the draw count per
  // call is fixed, which keeps resumed runs replayable.
  double normal();

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Inclusive range.
  int uniform_int(int lo, int hi);

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(0, i);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  // Engine state as text, for checkpoints.
  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 eng_;
};

uint64_t splitmix64(uint64_t x);
uint64_t fnv1a64(std::string_view s);

// Stable per-item seed derived from a base seed and string/index coordinates.
uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index);

}  // namespace qp
