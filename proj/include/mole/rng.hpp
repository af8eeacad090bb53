#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>

#include "mole/tensor.hpp"

namespace mole {

/// xoshiro256** seeded through splitmix64. The stream depends only on the
/// seed, so results are reproducible across platforms and compilers.
class Rng64 {
 public:
  explicit Rng64(std::uint64_t seed = 0);

  /// Independent stream for a named component of an experiment, e.g.
  /// `Rng64::derive(2021, "shuffle")`.
  static Rng64 derive(std::uint64_t seed, std::string_view component);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, bound); bound must be > 0.
  std::uint64_t below(std::uint64_t bound) noexcept;

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
};

std::uint64_t splitmix64(std::uint64_t& state) noexcept;
/// FNV-1a over the bytes of `text`, folded with `seed`.
std::uint64_t hash_combine(std::uint64_t seed, std::string_view text) noexcept;

/// Entries i.i.d. uniform on [−1/√fan_in, 1/√fan_in]; draws rows×cols values
/// in row-major order.
Tensor2 uniform_init(std::size_t fan_in, std::size_t rows, std::size_t cols, Rng64& rng);

/// One Box–Muller normal draw (always consumes two uniforms).
double gaussian(Rng64& rng, double mean, double sigma);

/// Fisher–Yates shuffle of 0..n-1 driven by `rng`.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng64& rng);

}  // namespace mole
