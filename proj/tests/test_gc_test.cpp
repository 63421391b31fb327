#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>

#include "svfm/errors.hpp"
#include "svfm/estimator.hpp"
#include "svfm/inference.hpp"
#include "svfm/rng.hpp"
#include "svfm/sparsity.hpp"

namespace {

using svfm::MatrixX;
using svfm::VectorX;
using MatrixXd = MatrixX<double>;
using VectorXd = VectorX<double>;

MatrixXd random_matrix(Eigen::Index n, Eigen::Index t, std::uint64_t stream) {
  svfm::CounterRng rng(123, stream);
  MatrixXd x(n, t);
  for (Eigen::Index j = 0; j < t; ++j)
    for (Eigen::Index i = 0; i < n; ++i) x(i, j) = rng.normal();
  return x;
}

VectorXd uniform_states(Eigen::Index t, std::uint64_t stream) {
  svfm::CounterRng rng(321, stream);
  VectorXd s(t);
  for (Eigen::Index i = 0; i < t; ++i) s(i) = rng.uniform01();
  return s;
}

struct PanelFixture {
  MatrixXd x;
  VectorXd states;
  svfm::FitOptions opts;

  PanelFixture(Eigen::Index n, Eigen::Index t, Eigen::Index r,
               std::uint64_t stream, double noise = 1.0) {
    x = random_matrix(n, r, stream) * random_matrix(r, t, stream + 1);
    x += noise * random_matrix(n, t, stream + 2);
    states = uniform_states(t, stream + 3);
    opts.min_effective_size = 1.0;
  }

  svfm::GcStateInput<double> state_input(double s, double h,
                                         Eigen::Index r) const {
    const auto fit = svfm::fit_conditional(x, states, s, h, r,
                                           svfm::KernelKind::gaussian, opts);
    return svfm::make_gc_state(x, fit);
  }
};

TEST(GcTest, NoiselessPanelHasNoSamplingErrorToNormalize) {
  PanelFixture panel(12, 30, 1, 100, 0.0);
  const auto s1 = panel.state_input(0.4, 0.3, 1);
  const auto s2 = panel.state_input(0.6, 0.3, 1);
  EXPECT_THROW(svfm::gc_test(s1, s2, svfm::SparsitySets::defaults()),
               svfm::ZeroVariance);
}

TEST(GcTest, SwappingTheStatesDoesNotChangeTheAnswer) {
  PanelFixture panel(20, 60, 2, 200);
  const auto s1 = panel.state_input(0.35, 0.4, 2);
  const auto s2 = panel.state_input(0.65, 0.4, 2);
  const auto sets = svfm::SparsitySets::defaults();

  const auto fwd = svfm::gc_test(s1, s2, sets);
  const auto rev = svfm::gc_test(s2, s1, sets);
  EXPECT_NEAR(fwd.rho_hat, rev.rho_hat, 1e-10);
  EXPECT_NEAR(fwd.bias, rev.bias, 1e-10);
  EXPECT_NEAR(fwd.variance, rev.variance, 1e-10);
  EXPECT_NEAR(fwd.statistic, rev.statistic, 1e-8);
  EXPECT_NEAR(fwd.p_value, rev.p_value, 1e-8);
}

TEST(GcTest, StatisticIsInvariantToPanelScale) {
  PanelFixture panel(18, 50, 1, 300);
  PanelFixture scaled = panel;
  scaled.x *= 3.0;

  const auto sets = svfm::SparsitySets::defaults(1);
  const auto base =
      svfm::gc_test(panel.state_input(0.4, 0.35, 1),
                    panel.state_input(0.7, 0.35, 1), sets);
  const auto big =
      svfm::gc_test(scaled.state_input(0.4, 0.35, 1),
                    scaled.state_input(0.7, 0.35, 1), sets);

  EXPECT_NEAR(base.rho_hat, big.rho_hat, 1e-10);
  EXPECT_NEAR(base.bias, big.bias, 1e-10);
  EXPECT_NEAR(base.statistic, big.statistic, 1e-8);
}

// Every published quantity recomputed with plain scalar loops, one factor.
TEST(GcTest, MatchesScalarBruteForceWithOneFactor) {
  const Eigen::Index n = 6, t = 14;
  const double h = 0.5;
  PanelFixture panel(n, t, 1, 400);
  const auto s1 = panel.state_input(0.3, h, 1);
  const auto s2 = panel.state_input(0.7, h, 1);

  svfm::SparsitySets sets;  // diagonal cross, diagonal time
  svfm::GcDiagnostics<double> diag;
  const auto res = svfm::gc_test(s1, s2, sets, &diag);
  const auto res_plain = svfm::gc_test(s1, s2, sets);
  EXPECT_EQ(res.statistic, res_plain.statistic);

  const std::array<const svfm::GcStateInput<double>*, 2> st = {&s1, &s2};
  double g[2][2], v[2];
  for (int p = 0; p < 2; ++p) {
    v[p] = st[p]->eigenvalues(0);
    for (int u = 0; u < 2; ++u) {
      g[p][u] =
          st[p]->loadings_bar.col(0).dot(st[u]->loadings_bar.col(0)) / double(n);
    }
  }
  const double rho = (g[0][1] / g[0][0]) * (g[1][0] / g[1][1]);
  EXPECT_NEAR(res.rho_hat, rho, 1e-12);

  // Residual-weighted factor moments over the diagonal time set.
  double e_hat[2][2];
  for (int u = 0; u < 2; ++u) {
    for (int w = 0; w < 2; ++w) {
      double acc = 0.0;
      for (Eigen::Index a = 0; a < t; ++a) {
        acc += st[u]->factors_bar(a, 0) * st[w]->factors_bar(a, 0) *
               st[u]->residuals_projected.col(a).dot(
                   st[w]->residuals_projected.col(a));
      }
      e_hat[u][w] =
          acc / (double(n) * st[u]->effective_size * st[w]->effective_size);
      EXPECT_NEAR(diag.e_hat[u][w](0, 0), e_hat[u][w], 1e-12);
    }
  }

  const auto x_term = [&](int u, int w, int p, int q) {
    return g[p][u] * e_hat[u][w] * g[w][q] / (v[p] * v[q]);
  };
  for (int l = 0; l < 2; ++l) {
    for (int lp = 0; lp < 2; ++lp) {
      EXPECT_NEAR(diag.x_hat[l][lp](0, 0),
                  x_term(l, lp, l, lp) + x_term(l, l, l, lp) +
                      x_term(lp, lp, l, lp),
                  1e-12);
    }
  }

  // Span-misfit noise covariance for both orientations.
  const auto su = [&](int l, int lp) {
    const double rot = g[lp][l];
    return x_term(lp, lp, lp, lp) + rot * rot * x_term(l, l, l, l) -
           rot * x_term(l, lp, l, lp) - rot * x_term(lp, l, lp, l);
  };
  const double su01 = su(0, 1);
  const double su10 = su(1, 0);
  EXPECT_NEAR(diag.sigma_u[0](0, 0), su01, 1e-12);
  EXPECT_NEAR(diag.sigma_u[1](0, 0), su10, 1e-12);

  const double bias = -(su01 + su10) / 2.0;
  const double variance = double(t) * h * (su01 * su01 + su10 * su10);
  EXPECT_NEAR(res.bias, bias, 1e-12);
  EXPECT_NEAR(res.variance, variance, 1e-12);

  const double statistic = std::sqrt(double(n) * double(t) * h) *
                           (rho - 1.0 - bias) / std::sqrt(variance);
  EXPECT_NEAR(res.statistic, statistic, 1e-10);
  EXPECT_NEAR(res.p_value, svfm::normal_cdf(statistic), 1e-12);

  // Diagnostic linearization pieces.
  double z_hat[2][2];
  for (int p = 0; p < 2; ++p) {
    for (int w = 0; w < 2; ++w) {
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += st[p]->loadings_bar(i, 0) * st[w]->loadings_bar(i, 0) *
               st[p]->residuals_projected.row(i).squaredNorm();
      }
      z_hat[p][w] =
          acc / (v[p] * double(n) * double(n) * st[p]->effective_size);
      EXPECT_NEAR(diag.z_hat[p][w](0, 0), z_hat[p][w], 1e-12);
    }
  }

  const double g1i = 1.0 / g[0][0], g4i = 1.0 / g[1][1];
  EXPECT_NEAR(diag.xi(0), -g1i * g[0][1] * g4i * g[1][0] * g1i, 1e-12);
  EXPECT_NEAR(diag.xi(1), g1i * g[0][1] * g4i, 1e-12);
  EXPECT_NEAR(diag.xi(2), g4i * g[1][0] * g1i, 1e-12);
  EXPECT_NEAR(diag.xi(3), -g4i * g[1][0] * g1i * g[0][1] * g4i, 1e-12);

  for (int l = 0; l < 2; ++l) {
    for (int lp = 0; lp < 2; ++lp) {
      const double xb = x_term(l, lp, l, lp) + x_term(l, l, l, lp) +
                        x_term(lp, lp, l, lp);
      EXPECT_NEAR(diag.b(2 * l + lp), xb + z_hat[l][lp] + z_hat[lp][l], 1e-12);
    }
  }

  // Derivative matrix: one factor collapses each Kronecker block to a scalar.
  const auto m_terms = [&](int l, int lp) {
    return std::array<double, 4>{g[l][l] / v[l], g[l][lp] / v[l], g[lp][lp],
                                 g[l][lp] / v[lp]};
  };
  const auto t11 = m_terms(0, 0);
  EXPECT_NEAR(diag.d(0, 0), t11[0] + t11[1] + t11[2] + t11[3], 1e-12);
  const auto t12 = m_terms(0, 1);
  EXPECT_NEAR(diag.d(1, 0), t12[1], 1e-12);
  EXPECT_NEAR(diag.d(1, 1), t12[0], 1e-12);
  EXPECT_NEAR(diag.d(1, 2), t12[2], 1e-12);
  EXPECT_NEAR(diag.d(1, 3), t12[3], 1e-12);
  const auto t21 = m_terms(1, 0);
  EXPECT_NEAR(diag.d(2, 0), t21[3], 1e-12);
  EXPECT_NEAR(diag.d(2, 1), t21[2], 1e-12);
  EXPECT_NEAR(diag.d(2, 2), t21[0], 1e-12);
  EXPECT_NEAR(diag.d(2, 3), t21[1], 1e-12);
  const auto t22 = m_terms(1, 1);
  EXPECT_NEAR(diag.d(3, 3), t22[0] + t22[1] + t22[2] + t22[3], 1e-12);
  EXPECT_NEAR(diag.d(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(diag.d(3, 0), 0.0, 1e-15);

  // Moment covariance: same-series diagonal joint pairs give an outer-product
  // sum, so it is already positive semidefinite and never needs repair.
  MatrixXd sigma = MatrixXd::Zero(4, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index a = 0; a < t; ++a) {
      VectorXd gvec(4);
      for (int u = 0; u < 2; ++u) {
        const double e_scaled =
            st[u]->residuals_projected(i, a) / st[u]->effective_size;
        for (int w = 0; w < 2; ++w) {
          gvec(2 * u + w) =
              st[u]->factors_bar(a, 0) * st[w]->loadings_bar(i, 0) * e_scaled;
        }
      }
      sigma += gvec * gvec.transpose();
    }
  }
  sigma *= double(t) * h / double(n);
  EXPECT_LT((diag.sigma_bb - sigma).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_FALSE(res.clipped_covariance);
}

// The matrix construction with two factors, recomputed with dense algebra.
TEST(GcTest, MatchesMatrixBruteForceWithTwoFactors) {
  const Eigen::Index n = 9, t = 16, r = 2;
  const double h = 0.6;
  PanelFixture panel(n, t, r, 500);
  const auto s1 = panel.state_input(0.35, h, r);
  const auto s2 = panel.state_input(0.65, h, r);

  svfm::SparsitySets sets = svfm::SparsitySets::defaults(1);
  const auto res = svfm::gc_test(s1, s2, sets);

  const std::array<const svfm::GcStateInput<double>*, 2> st = {&s1, &s2};
  MatrixXd g[2][2];
  for (int p = 0; p < 2; ++p)
    for (int u = 0; u < 2; ++u)
      g[p][u] = st[p]->loadings_bar.transpose() * st[u]->loadings_bar /
                double(n);

  const double rho =
      (g[0][0].inverse() * g[0][1] * g[1][1].inverse() * g[1][0]).trace();
  EXPECT_NEAR(res.rho_hat, rho, 1e-10);

  MatrixXd e_hat[2][2];
  for (int u = 0; u < 2; ++u) {
    for (int w = 0; w < 2; ++w) {
      MatrixXd acc = MatrixXd::Zero(r, r);
      for (Eigen::Index a = 0; a < t; ++a) {
        for (Eigen::Index b = std::max<Eigen::Index>(0, a - 1);
             b <= std::min<Eigen::Index>(t - 1, a + 1); ++b) {
          acc += st[u]->residuals_projected.col(a).dot(
                     st[w]->residuals_projected.col(b)) *
                 st[u]->factors_bar.row(a).transpose() *
                 st[w]->factors_bar.row(b);
        }
      }
      e_hat[u][w] =
          acc / (double(n) * st[u]->effective_size * st[w]->effective_size);
    }
  }

  const auto x_term = [&](int u, int w, int p, int q) -> MatrixXd {
    return st[p]->eigenvalues.cwiseInverse().asDiagonal() * g[p][u] *
           e_hat[u][w] * g[w][q] *
           st[q]->eigenvalues.cwiseInverse().asDiagonal();
  };
  const auto su = [&](int l, int lp) -> MatrixXd {
    const MatrixXd rot = g[lp][l];
    const MatrixXd raw = x_term(lp, lp, lp, lp) +
                         rot * x_term(l, l, l, l) * rot.transpose() -
                         rot * x_term(l, lp, l, lp) -
                         x_term(lp, l, lp, l) * rot.transpose();
    return (raw + raw.transpose()) / 2.0;
  };
  const MatrixXd su01 = su(0, 1);
  const MatrixXd su10 = su(1, 0);
  const double bias = -(su01.trace() + su10.trace()) / 2.0;
  const double variance =
      double(t) * h * ((su01 * su01).trace() + (su10 * su10).trace());
  EXPECT_NEAR(res.bias, bias, 1e-12);
  EXPECT_NEAR(res.variance, variance, 1e-12);
  EXPECT_NEAR(res.statistic,
              std::sqrt(double(n) * double(t) * h) * (rho - double(r) - bias) /
                  std::sqrt(variance),
              1e-9);
}

TEST(GcTest, NullPanelProducesAModerateStatistic) {
  // Constant loadings: the spans at any two states agree by construction.
  const Eigen::Index n = 40, t = 300;
  const MatrixXd lambda = random_matrix(n, 1, 600);
  const MatrixXd f = random_matrix(1, t, 601);
  MatrixXd x = lambda * f + 0.7 * random_matrix(n, t, 602);
  const VectorXd states = uniform_states(t, 603);

  const auto fit1 = svfm::fit_conditional(x, states, 0.4, 0.3, 1);
  const auto fit2 = svfm::fit_conditional(x, states, 0.6, 0.3, 1);
  const auto res = svfm::gc_test(svfm::make_gc_state(x, fit1),
                                 svfm::make_gc_state(x, fit2),
                                 svfm::SparsitySets::defaults());

  EXPECT_GE(res.rho_hat, 0.0);
  EXPECT_LE(res.rho_hat, 1.0 + 1e-8);
  EXPECT_LT(res.bias, 0.0);
  EXPECT_GT(res.variance, 0.0);
  EXPECT_TRUE(std::isfinite(res.statistic));
  // Not a rejection: the spans really are equal on this panel.
  EXPECT_GT(res.statistic, -3.0);
  EXPECT_GT(res.p_value, 0.0);
  EXPECT_LT(res.p_value, 1.0);
}

TEST(GcTest, RejectsMismatchedInputs) {
  PanelFixture panel(15, 40, 2, 700);
  const auto r1 = panel.state_input(0.4, 0.3, 1);
  const auto r2 = panel.state_input(0.6, 0.3, 2);
  EXPECT_THROW(svfm::gc_test(r1, r2, svfm::SparsitySets::defaults()),
               svfm::DimensionMismatch);

  const auto h1 = panel.state_input(0.4, 0.3, 1);
  const auto h2 = panel.state_input(0.6, 0.5, 1);
  EXPECT_THROW(svfm::gc_test(h1, h2, svfm::SparsitySets::defaults()),
               svfm::InvalidArgument);
}

TEST(GcTest, PairwiseGridRecordsFailuresAndFillsSymmetrically) {
  const Eigen::Index n = 20, t = 150;
  const MatrixXd lambda = random_matrix(n, 1, 800);
  const MatrixXd f = random_matrix(1, t, 801);
  MatrixXd x = lambda * f + 0.8 * random_matrix(n, t, 802);
  VectorXd states(t);
  for (Eigen::Index i = 0; i < t; ++i) states(i) = double(i) / double(t - 1);

  VectorXd grid(3);
  grid << 0.3, 0.7, 50.0;  // last state far outside the support
  svfm::FitOptions opts;
  opts.min_effective_size = 1.0;
  const auto out = svfm::pairwise_test_grid(
      x, states, grid, 0.25, 1, svfm::KernelKind::epanechnikov,
      svfm::SparsitySets::defaults(), opts);

  EXPECT_TRUE(std::isfinite(out.statistic(0, 1)));
  EXPECT_EQ(out.statistic(0, 1), out.statistic(1, 0));
  EXPECT_EQ(out.p_value(0, 1), out.p_value(1, 0));
  EXPECT_TRUE(std::isnan(out.statistic(0, 0)));
  EXPECT_TRUE(out.errors[0 * 3 + 1].empty());
  EXPECT_NE(out.errors[0 * 3 + 2].find("state fit failed"), std::string::npos);
  EXPECT_EQ(out.errors[0 * 3 + 2], out.errors[2 * 3 + 0]);
  EXPECT_TRUE(std::isnan(out.statistic(0, 2)));

  VectorXd tiny(1);
  tiny << 0.5;
  EXPECT_THROW(svfm::pairwise_test_grid(x, states, tiny, 0.25, 1),
               svfm::InvalidArgument);
}

}  // namespace
