#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace flowtok {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// xoshiro256++ generator. Gaussian draws use Box-Muller with no cached
/// spare, so the full state is exactly the four words below (checkpointable).
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : state_) w = splitmix64(sm);
  }

  /// Deterministic stream derived from a seed and a list of stream ids.
  static Rng from_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
    std::uint64_t sm = seed;
    std::uint64_t h = splitmix64(sm);
    for (auto id : ids) {
      sm ^= id + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      h = splitmix64(sm);
    }
    return Rng(h);
  }

  std::uint64_t next_u64() {
    auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1] (never zero; safe under log).
  double uniform_pos() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  template <typename T>
  void fill_normal(T* dst, std::size_t n, T stddev = T(1), T mean = T(0)) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(normal() * stddev + mean);
  }

  template <typename T>
  void fill_uniform(T* dst, std::size_t n, T lo, T hi) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(lo + (hi - lo) * uniform());
  }

  template <typename It>
  void shuffle(It first, It last) {
    const std::size_t n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = index(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::array<std::uint64_t, 4> save_state() const { return state_; }
  void restore_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

  bool operator==(const Rng& o) const { return state_ == o.state_; }

 private:
  std::array<std::uint64_t, 4> state_{};
};

}  // namespace flowtok
