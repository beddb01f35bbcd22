#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace gg {

// Counter-based deterministic RNG. Every stream is keyed by (seed, name,
// salts), so independent streams never interact and any draw is replayable
// from its key alone -- no global state, no order dependence between streams.
class Rng {
 public:
  Rng(uint64_t seed, std::string_view stream, uint64_t salt0 = 0, uint64_t salt1 = 0) {
    uint64_t k = scramble(seed + 0x9e3779b97f4a7c15ULL);
    k = scramble(k ^ hash_str(stream));
    k = scramble(k ^ (salt0 + 0x2545f4914f6cdd1dULL));
    k = scramble(k ^ (salt1 + 0x9e3779b97f4a7c15ULL));
    key_ = k;
  }

  uint64_t u64() { return scramble(key_ + (++ctr_) * 0x9e3779b97f4a7c15ULL); }

  // [0, 1)
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller; second value cached
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // uniform integer in [0, n), unbiased by rejection
  int64_t below(int64_t n) {
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t lim = UINT64_MAX - UINT64_MAX % un;
    uint64_t x = u64();
    while (x >= lim) x = u64();
    return static_cast<int64_t>(x % un);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = below(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<size_t>(below(static_cast<int64_t>(v.size())))];
  }

  static uint64_t scramble(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : s) {
      h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  uint64_t key_ = 0;
  uint64_t ctr_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stream names used across the project; training reproducibility depends on
// every stochastic choice going through one of these.
namespace streams {
inline constexpr const char* param_init = "parameter-init";
inline constexpr const char* z_noise = "z-noise";
inline constexpr const char* negative_sampling = "negative-sampling";
inline constexpr const char* data_shuffle = "data-shuffle";
inline constexpr const char* scene_noise = "scene-noise";
inline constexpr const char* scene_gen = "scene-gen";
inline constexpr const char* splits = "splits";
}  // namespace streams

}  // namespace gg
