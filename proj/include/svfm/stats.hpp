#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "svfm/errors.hpp"

namespace svfm {

template <typename Scalar>
Scalar normal_cdf(Scalar x) {
  return Scalar(0.5) * std::erfc(-x * Scalar(std::numbers::sqrt2_v<long double> / 2.0L));
}

template <typename Scalar>
struct SampleSummary {
  Scalar mean{};
  Scalar variance{};  // with the 1/(n-1) divisor
  std::size_t count{};
};

template <typename Scalar>
SampleSummary<Scalar> summarize(const std::vector<Scalar>& sample) {
  if (sample.size() < 2) throw InvalidArgument("need at least two observations");
  SampleSummary<Scalar> s;
  s.count = sample.size();
  Scalar sum = 0;
  for (Scalar x : sample) sum += x;
  s.mean = sum / Scalar(sample.size());
  Scalar ss = 0;
  for (Scalar x : sample) ss += (x - s.mean) * (x - s.mean);
  s.variance = ss / Scalar(sample.size() - 1);
  return s;
}

// Kolmogorov-Smirnov distance between the sample's empirical CDF and the
// standard normal CDF.
template <typename Scalar>
Scalar ks_distance_to_normal(std::vector<Scalar> sample) {
  if (sample.empty()) throw InvalidArgument("empty sample");
  std::sort(sample.begin(), sample.end());
  const Scalar n = Scalar(sample.size());
  Scalar d = 0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const Scalar cdf = normal_cdf(sample[i]);
    d = std::max(d, std::abs(Scalar(i + 1) / n - cdf));
    d = std::max(d, std::abs(Scalar(i) / n - cdf));
  }
  return d;
}

}  // namespace svfm
