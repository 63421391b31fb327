#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <string>

#include "svfm/errors.hpp"

namespace svfm {

// One-dimensional smoothing kernels. All are symmetric probability
// densities; every kind except gaussian vanishes for |u| > 1.
enum class KernelKind { gaussian, uniform, epanechnikov, biweight, triweight };

inline const char* to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::gaussian:
      return "gaussian";
    case KernelKind::uniform:
      return "uniform";
    case KernelKind::epanechnikov:
      return "epanechnikov";
    case KernelKind::biweight:
      return "biweight";
    case KernelKind::triweight:
      return "triweight";
  }
  return "?";
}

inline KernelKind kernel_from_string(const std::string& name) {
  if (name == "gaussian") return KernelKind::gaussian;
  if (name == "uniform") return KernelKind::uniform;
  if (name == "epanechnikov") return KernelKind::epanechnikov;
  if (name == "biweight") return KernelKind::biweight;
  if (name == "triweight") return KernelKind::triweight;
  throw ConfigError("unknown kernel: " + name);
}

template <typename Scalar>
Scalar kernel_value(KernelKind kind, Scalar u) {
  const Scalar abs_u = std::abs(u);
  const Scalar one_minus_u2 = Scalar(1) - u * u;
  switch (kind) {
    case KernelKind::gaussian:
      // exp(-u^2/2) / sqrt(2*pi)
      return std::exp(Scalar(-0.5) * u * u) *
             Scalar(std::numbers::inv_sqrtpi_v<long double> /
                    std::numbers::sqrt2_v<long double>);
    case KernelKind::uniform:
      return abs_u <= Scalar(1) ? Scalar(0.5) : Scalar(0);
    case KernelKind::epanechnikov:
      // 3/4 * (1 - u^2) for |u| <= 1
      return abs_u <= Scalar(1) ? Scalar(0.75) * one_minus_u2 : Scalar(0);
    case KernelKind::biweight:
      // 15/16 * (1 - u^2)^2 for |u| <= 1
      return abs_u <= Scalar(1)
                 ? Scalar(15.0 / 16.0) * one_minus_u2 * one_minus_u2
                 : Scalar(0);
    case KernelKind::triweight:
      // 35/32 * (1 - u^2)^3 for |u| <= 1
      return abs_u <= Scalar(1)
                 ? Scalar(35.0 / 32.0) * one_minus_u2 * one_minus_u2 * one_minus_u2
                 : Scalar(0);
  }
  return Scalar(0);
}

// Kernel roughness: the integral of K(u)^2 over the real line.
template <typename Scalar>
Scalar kernel_roughness(KernelKind kind) {
  switch (kind) {
    case KernelKind::gaussian:
      return Scalar(1) / (Scalar(2) * std::sqrt(Scalar(std::numbers::pi)));
    case KernelKind::uniform:
      return Scalar(0.5);
    case KernelKind::epanechnikov:
      return Scalar(3.0 / 5.0);
    case KernelKind::biweight:
      return Scalar(5.0 / 7.0);
    case KernelKind::triweight:
      return Scalar(350.0 / 429.0);
  }
  return Scalar(0);
}

// Bandwidth-scaled kernel weights of a state path around a target state:
// values[t] = K((S_t - s)/h) / h, effective_size = sum_t values[t].
template <typename Scalar>
struct KernelWeights {
  Eigen::Vector<Scalar, Eigen::Dynamic> values;
  Scalar state{};
  Scalar bandwidth{};
  Scalar effective_size{};
};

// min_effective is the floor on the effective sample size T(s); fits at
// states supported by fewer (kernel-weighted) observations are refused.
template <typename Derived>
KernelWeights<typename Derived::Scalar> kernel_weights(
    KernelKind kind, const Eigen::DenseBase<Derived>& states,
    typename Derived::Scalar s, typename Derived::Scalar h,
    typename Derived::Scalar min_effective = 10) {
  using Scalar = typename Derived::Scalar;
  if (!(h > Scalar(0))) throw InvalidArgument("bandwidth must be positive");
  if (states.size() == 0) throw InvalidArgument("empty state path");

  KernelWeights<Scalar> w;
  w.state = s;
  w.bandwidth = h;
  w.values.resize(states.size());
  for (Eigen::Index t = 0; t < states.size(); ++t) {
    const Scalar st = states.derived()(t);
    if (!std::isfinite(st)) throw NonFiniteValue("state path has a non-finite value");
    w.values(t) = kernel_value(kind, (st - s) / h) / h;
  }
  w.effective_size = w.values.sum();
  if (w.effective_size < min_effective) {
    throw EffectiveSampleTooSmall(
        "effective sample size " + std::to_string(double(w.effective_size)) +
        " at state " + std::to_string(double(s)) + " is below the floor " +
        std::to_string(double(min_effective)));
  }
  return w;
}

// Kernel density estimate of the state distribution at the weights' target:
// T(s) / T.
template <typename Scalar>
Scalar density_estimate(const KernelWeights<Scalar>& w) {
  if (w.values.size() == 0) throw InvalidArgument("empty weights");
  return w.effective_size / Scalar(w.values.size());
}

}  // namespace svfm
