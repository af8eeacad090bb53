#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

#include "mole/rng.hpp"
#include "mole/tensor.hpp"

namespace mole::testing {

inline Tensor2 random_tensor(std::size_t rows, std::size_t cols, Rng64& rng, double lo = -1.0,
                             double hi = 1.0) {
  Tensor2 t(rows, cols);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Entries with |v| in [lo, hi] and random sign; keeps kinks out of reach.
inline Tensor2 away_from_zero(std::size_t rows, std::size_t cols, Rng64& rng, double lo = 0.2,
                              double hi = 1.0) {
  Tensor2 t(rows, cols);
  for (double& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

inline bool bitwise_equal(const Tensor2& a, const Tensor2& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a.data()[i]) != std::bit_cast<std::uint64_t>(b.data()[i])) {
      return false;
    }
  }
  return true;
}

}  // namespace mole::testing
