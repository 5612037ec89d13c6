#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "magicvid/tensor.hpp"

namespace magicvid {

// splitmix64; used to derive sub-stream seeds and to hash parameter tuples.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t h, uint64_t v) { return splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL)); }

// Deterministic random stream. mt19937_64 has a fully specified algorithm and
// the uniform/gaussian transforms below are written out explicitly, so the
// same seed yields the same values on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // [0, n)
  int64_t uniform_int(int64_t n) {
    if (n <= 0) return 0;
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Box-Muller; second value cached.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void fill_gaussian(Tensor<T>& t, double stddev = 1.0) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(gaussian() * stddev);
  }

  template <typename T>
  Tensor<T> gaussian_tensor(std::vector<int> shape, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    fill_gaussian(t, stddev);
    return t;
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace magicvid
