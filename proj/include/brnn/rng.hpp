#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

namespace brnn {

// Deterministic random source. State is fully described by (seed, draw count),
// which is what checkpoints persist; restore() replays the engine to the same
// point. Gaussians use cache-free Box-Muller so the draw count alone is enough.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed), seed_(seed) {}

  static Rng restore(std::uint64_t seed, std::uint64_t draws) {
    Rng r(seed);
    r.eng_.discard(draws);
    r.draws_ = draws;
    return r;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  // Uniform in (0, 1].
  double uniform() {
    return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal; exactly two engine draws per call, no cached spare.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::uint64_t integer(std::uint64_t n) {  // uniform in [0, n)
    return next() % n;
  }

  void fill_normal(std::span<float> out) {
    for (float& v : out) v = static_cast<float>(normal());
  }

  void fill_uniform(std::span<float> out, double lo, double hi) {
    for (float& v : out) v = static_cast<float>(uniform(lo, hi));
  }

 private:
  std::uint64_t next() {
    ++draws_;
    return eng_();
  }

  std::mt19937_64 eng_;
  std::uint64_t seed_ = 0;
  std::uint64_t draws_ = 0;
};

}  // namespace brnn
