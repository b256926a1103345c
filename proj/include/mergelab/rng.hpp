// Copyright 2026 The mergelab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MERGELAB_RNG_HPP_
#define MERGELAB_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mergelab {

// SplitMix64 finalizer. Used both as the PRNG step function and as a hash so
// that every random decision is a pure function of explicitly mixed seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ULL));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b,
                              std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b,
                              std::uint64_t c, std::uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

// Top 53 bits -> double in [0, 1).
inline double bits_to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Counter-based SplitMix64 stream.
class SplitMix {
 public:
  explicit SplitMix(std::uint64_t seed) : state_(splitmix64(seed)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  double next_unit() { return bits_to_unit(next_u64()); }

  // Box-Muller, one fresh pair per call; no cached state so replay is exact.
  double next_gaussian() {
    double u1 = next_unit();
    double u2 = next_unit();
    while (u1 <= 0.0) u1 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  std::size_t next_index(std::size_t n) {
    std::size_t k = static_cast<std::size_t>(next_unit() * static_cast<double>(n));
    return k >= n ? n - 1 : k;
  }

 private:
  std::uint64_t state_;
};

// Sampled-with-replacement batch slot. Pure in (seed, step, slot), so two
// runs sharing a seed see identical index streams regardless of data values.
inline std::uint32_t batch_index(std::uint64_t seed, std::uint64_t step,
                                 std::uint64_t slot, std::size_t n) {
  double u = bits_to_unit(mix_seed(seed, step, slot));
  std::size_t k = static_cast<std::size_t>(u * static_cast<double>(n));
  if (k >= n) k = n - 1;
  return static_cast<std::uint32_t>(k);
}

}  // namespace mergelab

#endif  // MERGELAB_RNG_HPP_
