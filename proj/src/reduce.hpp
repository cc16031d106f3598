#pragma once

// Vectorizable reductions with a fixed summation order, shared by the kernels.

#include <cstddef>
#include <cstring>

namespace fnas::detail {

// Reductions keep eight independent partial sums: the compiler can vectorize
// them and the summation order stays fixed on every platform.
constexpr std::size_t kLanes = 8;

// Four doubles in one register (GCC/Clang vector extension); scalar·vector
// broadcasts and element-wise arithmetic behave like the scalar code per lane.
typedef double v4d __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof v); }

inline double dot(const double* a, const double* b, std::size_t n) {
  v4d lo = {}, hi = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    lo += load4(a + i) * load4(b + i);
    hi += load4(a + i + 4) * load4(b + i + 4);
  }
  double s = 0.0;
  for (; i < n; ++i) s += a[i] * b[i];
  for (std::size_t j = 0; j < 4; ++j) s += lo[j];
  for (std::size_t j = 0; j < 4; ++j) s += hi[j];
  return s;
}

inline double total(const double* a, std::size_t n) {
  double lane[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t j = 0; j < kLanes; ++j) lane[j] += a[i + j];
  }
  double s = 0.0;
  for (; i < n; ++i) s += a[i];
  for (std::size_t j = 0; j < kLanes; ++j) s += lane[j];
  return s;
}

// Σ (a[i] - mu) and Σ (a[i] - mu)²
inline void centered_sums(const double* a, double mu, std::size_t n, double& first, double& second) {
  double l1[kLanes] = {}, l2[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t j = 0; j < kLanes; ++j) {
      const double d = a[i + j] - mu;
      l1[j] += d;
      l2[j] += d * d;
    }
  }
  double s1 = 0.0, s2 = 0.0;
  for (; i < n; ++i) {
    const double d = a[i] - mu;
    s1 += d;
    s2 += d * d;
  }
  for (std::size_t j = 0; j < kLanes; ++j) {
    s1 += l1[j];
    s2 += l2[j];
  }
  first = s1;
  second = s2;
}

}  // namespace fnas::detail
