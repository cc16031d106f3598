#pragma once

// Array exponential evaluated four lanes at a time. Cody-Waite reduction
// x = k·ln2 + r with |r| ≤ ln2/2, a degree-13 Taylor polynomial for e^r, and
// 2^k assembled from exponent bits. Inputs are clamped to [-708, 709]; the
// result stays within about one ulp of std::exp.

#include <cstddef>
#include <cstdint>
#include <cstring>

#include "reduce.hpp"

namespace fnas::detail {

typedef std::int64_t v4l __attribute__((vector_size(32)));

inline v4d exp4(v4d x) {
  constexpr double kLog2e = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kShift = 6755399441055744.0;  // 1.5·2⁵², rounds to nearest integer
  x = x < -708.0 ? v4d{} - 708.0 : x;
  x = x > 709.0 ? v4d{} + 709.0 : x;
  const v4d k = (x * kLog2e + kShift) - kShift;
  const v4d r = (x - k * kLn2Hi) - k * kLn2Lo;
  v4d p = r * (1.0 / 6227020800.0) + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  const v4l bits = (__builtin_convertvector(k, v4l) + 1023) << 52;
  v4d scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return p * scale;
}

inline void exp_array(const double* x, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) store4(out + i, exp4(load4(x + i)));
  if (i < n) {
    double tail[4] = {};
    std::memcpy(tail, x + i, (n - i) * sizeof(double));
    store4(tail, exp4(load4(tail)));
    std::memcpy(out + i, tail, (n - i) * sizeof(double));
  }
}

}  // namespace fnas::detail
