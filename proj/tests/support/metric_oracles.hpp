#pragma once

// Random dose/mask cases and brute-force metric oracles. The Dq oracle uses
// rank counting, never a sort.

#include <algorithm>
#include <cmath>
#include <vector>

#include "dosediff/rng.hpp"

namespace dosediff::testing_support {

struct Case {
  std::vector<double> pred, truth;
  std::vector<float> mask, mask2;
};

inline Case random_case(std::uint64_t seed, std::size_t n = 1000) {
  Rng rng(seed);
  Case c;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = rng.uniform(0.0, 1.3);
    c.truth.push_back(i % 97 == 0 ? 0.0 : t);
    c.pred.push_back(std::max(0.0, t + 0.1 * rng.normal()));
    c.mask.push_back(rng.uniform() < 0.5 ? 1.0f : 0.0f);
    c.mask2.push_back(rng.uniform() < 0.2 ? 1.0f : 0.0f);
  }
  c.mask[0] = c.mask2[0] = 1.0f;
  return c;
}

// --- brute-force oracles, written without sorting ---

inline double oracle_relative(const Case& c, const std::vector<float>& m) {
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < c.pred.size(); ++i)
    if (m[i] != 0.0f && c.truth[i] > 1e-3) {
      s += (c.pred[i] - c.truth[i]) / c.truth[i];
      ++n;
    }
  return s / n;
}

inline double oracle_mae(const Case& c, const std::vector<float>& m) {
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < c.pred.size(); ++i)
    if (m[i] != 0.0f) {
      s += std::abs(c.pred[i] - c.truth[i]);
      ++n;
    }
  return s / n;
}

// Element at descending-order index k = ceil(q N / 100) - 1, found by rank
// counting: the value v with #{x > v} <= k < #{x >= v}.
inline double oracle_dq(const std::vector<double>& d, const std::vector<float>& m, double q) {
  std::vector<double> v;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (m[i] != 0.0f) v.push_back(d[i]);
  const auto k = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(v.size()))) - 1;
  for (double cand : v) {
    std::size_t greater = 0, ge = 0;
    for (double x : v) {
      greater += x > cand;
      ge += x >= cand;
    }
    if (greater <= k && k < ge) return cand;
  }
  return NAN;
}

inline double oracle_hi(const std::vector<double>& d, const std::vector<float>& m) {
  double s = 0.0, n = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (m[i] != 0.0f) {
      s += d[i];
      n += 1;
    }
  const double mean = s / n;
  double ss = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (m[i] != 0.0f) ss += (d[i] - mean) * (d[i] - mean);
  return std::sqrt(ss / n) / mean;
}

inline double oracle_volume(const std::vector<double>& d, const std::vector<float>& m, double thr) {
  double n = 0, hit = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (m[i] != 0.0f) {
      n += 1;
      if (d[i] >= thr) hit += 1;
    }
  return 100.0 * hit / n;
}

}  // namespace dosediff::testing_support
