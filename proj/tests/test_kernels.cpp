#include "svfm/kernels.hpp"

#include <gtest/gtest.h>

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <limits>
#include <numbers>

namespace {

using svfm::KernelKind;

constexpr std::array<KernelKind, 5> kAllKinds = {
    KernelKind::gaussian, KernelKind::uniform, KernelKind::epanechnikov,
    KernelKind::biweight, KernelKind::triweight};

// Composite Simpson rule on [a, b] with n (even) intervals.
template <typename F>
double simpson(F f, double a, double b, int n) {
  const double step = (b - a) / n;
  double acc = f(a) + f(b);
  for (int k = 1; k < n; ++k) acc += f(a + k * step) * (k % 2 ? 4.0 : 2.0);
  return acc * step / 3.0;
}

TEST(Kernels, ClosedFormValues) {
  // Values at u = 0 are the normalization constants.
  EXPECT_NEAR(svfm::kernel_value(KernelKind::gaussian, 0.0),
              1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-15);
  EXPECT_DOUBLE_EQ(svfm::kernel_value(KernelKind::uniform, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(svfm::kernel_value(KernelKind::epanechnikov, 0.0), 0.75);
  EXPECT_DOUBLE_EQ(svfm::kernel_value(KernelKind::biweight, 0.0), 15.0 / 16.0);
  EXPECT_DOUBLE_EQ(svfm::kernel_value(KernelKind::triweight, 0.0), 35.0 / 32.0);

  // Interior points.
  EXPECT_DOUBLE_EQ(svfm::kernel_value(KernelKind::epanechnikov, 0.5), 0.5625);
  EXPECT_DOUBLE_EQ(svfm::kernel_value(KernelKind::biweight, 0.5),
                   15.0 / 16.0 * 0.5625);
  EXPECT_NEAR(svfm::kernel_value(KernelKind::gaussian, 1.0),
              std::exp(-0.5) / std::sqrt(2.0 * std::numbers::pi), 1e-15);

  // Compact support: everything but the gaussian vanishes beyond |u| = 1.
  for (KernelKind kind : kAllKinds) {
    if (kind == KernelKind::gaussian) continue;
    EXPECT_EQ(svfm::kernel_value(kind, 1.5), 0.0) << svfm::to_string(kind);
    EXPECT_EQ(svfm::kernel_value(kind, -2.0), 0.0) << svfm::to_string(kind);
  }
  EXPECT_GT(svfm::kernel_value(KernelKind::gaussian, 3.0), 0.0);
}

TEST(Kernels, SymmetricNonnegativeNormalized) {
  for (KernelKind kind : kAllKinds) {
    for (double u : {0.0, 0.1, 0.37, 0.5, 0.99, 1.0, 1.7, 4.0}) {
      EXPECT_EQ(svfm::kernel_value(kind, u), svfm::kernel_value(kind, -u))
          << svfm::to_string(kind) << " at u=" << u;
      EXPECT_GE(svfm::kernel_value(kind, u), 0.0);
    }
    const double lim = kind == KernelKind::gaussian ? 10.0 : 1.0;
    const double mass = simpson(
        [&](double u) { return svfm::kernel_value(kind, u); }, -lim, lim, 20000);
    EXPECT_NEAR(mass, 1.0, 1e-10) << svfm::to_string(kind);
  }
}

TEST(Kernels, RoughnessMatchesQuadrature) {
  // Integral of K(u)^2, compared against a fine Simpson quadrature.
  for (KernelKind kind : kAllKinds) {
    const double lim = kind == KernelKind::gaussian ? 10.0 : 1.0;
    const double oracle = simpson(
        [&](double u) {
          const double k = svfm::kernel_value(kind, u);
          return k * k;
        },
        -lim, lim, 20000);
    EXPECT_NEAR(svfm::kernel_roughness<double>(kind), oracle, 1e-10)
        << svfm::to_string(kind);
  }
}

TEST(Kernels, WeightsClosedForm) {
  Eigen::VectorXd states(3);
  states << 0.0, 0.5, 1.5;
  const auto w =
      svfm::kernel_weights(KernelKind::epanechnikov, states, 0.0, 1.0, 0.0);
  ASSERT_EQ(w.values.size(), 3);
  EXPECT_DOUBLE_EQ(w.values(0), 0.75);
  EXPECT_DOUBLE_EQ(w.values(1), 0.5625);
  EXPECT_DOUBLE_EQ(w.values(2), 0.0);
  EXPECT_DOUBLE_EQ(w.effective_size, 1.3125);
  EXPECT_DOUBLE_EQ(w.state, 0.0);
  EXPECT_DOUBLE_EQ(w.bandwidth, 1.0);

  Eigen::VectorXd flat(3);
  flat << 0.0, 0.5, 1.0;
  const auto u =
      svfm::kernel_weights(KernelKind::uniform, flat, 0.5, 1.0, 0.0);
  EXPECT_TRUE(u.values.isConstant(0.5));
  EXPECT_DOUBLE_EQ(u.effective_size, 1.5);

  // Bandwidth scaling: weight = K((S-s)/h)/h.
  Eigen::VectorXd one(1);
  one << 0.3;
  const auto gauss =
      svfm::kernel_weights(KernelKind::gaussian, one, 0.3, 2.0, 0.0);
  EXPECT_NEAR(gauss.values(0), 1.0 / (2.0 * std::sqrt(2.0 * std::numbers::pi)),
              1e-15);
}

TEST(Kernels, DensityEstimate) {
  Eigen::VectorXd states = Eigen::VectorXd::LinSpaced(200, -1.0, 1.0);
  const auto w = svfm::kernel_weights(KernelKind::gaussian, states, 0.0, 0.5);
  EXPECT_DOUBLE_EQ(svfm::density_estimate(w), w.effective_size / 200.0);
  // The state path is uniform on [-1, 1], so the density at 0 is near 1/2.
  EXPECT_NEAR(svfm::density_estimate(w), 0.5, 0.05);
}

TEST(Kernels, WeightErrors) {
  Eigen::VectorXd states(4);
  states << 0.0, 0.1, 0.2, 0.3;
  EXPECT_THROW(svfm::kernel_weights(KernelKind::gaussian, states, 0.0, 0.0),
               svfm::InvalidArgument);
  EXPECT_THROW(svfm::kernel_weights(KernelKind::gaussian, states, 0.0, -1.0),
               svfm::InvalidArgument);
  EXPECT_THROW(
      svfm::kernel_weights(KernelKind::gaussian, Eigen::VectorXd(), 0.0, 1.0),
      svfm::InvalidArgument);

  // Four observations cannot reach the default floor of 10.
  EXPECT_THROW(svfm::kernel_weights(KernelKind::uniform, states, 0.15, 0.3),
               svfm::EffectiveSampleTooSmall);
  // A compact kernel sees nothing far from the data.
  EXPECT_THROW(
      svfm::kernel_weights(KernelKind::epanechnikov, states, 5.0, 0.3, 1e-8),
      svfm::EffectiveSampleTooSmall);

  Eigen::VectorXd bad(2);
  bad << 0.0, std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(svfm::kernel_weights(KernelKind::gaussian, bad, 0.0, 1.0),
               svfm::NonFiniteValue);
}

TEST(Kernels, NamesRoundTrip) {
  for (KernelKind kind : kAllKinds) {
    EXPECT_EQ(svfm::kernel_from_string(svfm::to_string(kind)), kind);
  }
  EXPECT_THROW(svfm::kernel_from_string("triangle"), svfm::ConfigError);
}

}  // namespace
