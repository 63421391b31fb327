#include "svfm/inference.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "svfm/errors.hpp"
#include "svfm/rng.hpp"
#include "svfm/sparsity.hpp"

namespace {

using svfm::MatrixX;
using svfm::VectorX;
using MatrixXd = MatrixX<double>;
using VectorXd = VectorX<double>;

MatrixXd random_matrix(Eigen::Index n, Eigen::Index t, std::uint64_t stream) {
  svfm::CounterRng rng(99, stream);
  MatrixXd x(n, t);
  for (Eigen::Index j = 0; j < t; ++j)
    for (Eigen::Index i = 0; i < n; ++i) x(i, j) = rng.normal();
  return x;
}

std::set<std::pair<Eigen::Index, Eigen::Index>> collect(
    const svfm::PairPattern& p, Eigen::Index n) {
  std::set<std::pair<Eigen::Index, Eigen::Index>> out;
  p.for_each(n, [&](Eigen::Index a, Eigen::Index b) { out.emplace(a, b); });
  return out;
}

TEST(Sparsity, PatternsEnumerateTheExpectedPairs) {
  EXPECT_EQ(collect(svfm::PairPattern::diagonal(), 5).size(), 5u);
  // Band of lag 1 on 5 points: diagonal plus both off-diagonals.
  EXPECT_EQ(collect(svfm::PairPattern::banded(1), 5).size(), 13u);
  EXPECT_EQ(collect(svfm::PairPattern::full(), 4).size(), 16u);

  const auto custom = collect(svfm::PairPattern::custom({{0, 2}}), 4);
  EXPECT_EQ(custom.size(), 6u);  // 4 diagonal + symmetrized (0,2)
  EXPECT_TRUE(custom.count({0, 2}));
  EXPECT_TRUE(custom.count({2, 0}));
  EXPECT_TRUE(custom.count({3, 3}));
  EXPECT_FALSE(custom.count({0, 1}));

  EXPECT_EQ(svfm::PairPattern::diagonal().row_count(9), 1);
  EXPECT_EQ(svfm::PairPattern::banded(2).row_count(9), 5);
  EXPECT_EQ(svfm::PairPattern::full().row_count(9), 9);

  EXPECT_THROW(svfm::PairPattern::banded(-1), svfm::ConfigError);
  EXPECT_THROW(svfm::PairPattern::custom({{0, 7}}).validate(4),
               svfm::ConfigError);
  // Wide bands violate the bounded-neighbour cap; full is exempt by design.
  EXPECT_THROW(svfm::PairPattern::banded(2000).validate(5000),
               svfm::ConfigError);
  EXPECT_NO_THROW(svfm::PairPattern::full().validate(5000));
}

TEST(Sparsity, JointSetPairsSameSeriesAcrossTime) {
  svfm::SparsitySets sets = svfm::SparsitySets::defaults(1);
  Eigen::Index calls = 0;
  bool cross_series = false;
  sets.for_each_joint(3, 4, [&](Eigen::Index i, Eigen::Index a, Eigen::Index j,
                                Eigen::Index b) {
    ++calls;
    if (i != j) cross_series = true;
    EXPECT_LE(std::abs(long(a - b)), 1);
  });
  // 3 series x (4 diagonal + 6 lag-1 ordered) time pairs.
  EXPECT_EQ(calls, 30);
  EXPECT_FALSE(cross_series);

  Eigen::Index full_calls = 0;
  svfm::SparsitySets::all_pairs().for_each_joint(
      2, 3, [&](Eigen::Index, Eigen::Index, Eigen::Index, Eigen::Index) {
        ++full_calls;
      });
  EXPECT_EQ(full_calls, 36);
}

class InferenceCov : public ::testing::Test {
 protected:
  void SetUp() override {
    n = 8;
    t = 24;
    r = 2;
    x = random_matrix(n, t, 1);
    x += 2.0 * random_matrix(n, r, 2) * random_matrix(r, t, 3);
    svfm::CounterRng rng(5, 4);
    states.resize(t);
    for (Eigen::Index i = 0; i < t; ++i) states(i) = rng.uniform01();
    fit = svfm::fit_conditional(x, states, 0.5, 0.4, r);
    cc = svfm::common_components(x, fit);
  }

  Eigen::Index n{}, t{}, r{};
  MatrixXd x;
  VectorXd states;
  svfm::ConditionalFit<double> fit;
  svfm::CommonComponents<double> cc;
};

TEST_F(InferenceCov, FactorCovMatchesBruteForce) {
  const Eigen::Index period = 7;
  const svfm::SparsitySets diag;
  const auto est = svfm::estimate_factor_cov(fit, cc.residuals, period, diag);

  // Diagonal cross pattern: Gamma = (1/N) sum_i Lambda_i Lambda_i' e_it^2.
  MatrixXd gamma = MatrixXd::Zero(r, r);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double e = cc.residuals(i, period);
    gamma += e * e * fit.loadings.row(i).transpose() * fit.loadings.row(i);
  }
  gamma /= double(n);
  EXPECT_LT((est.gamma_hat - gamma).cwiseAbs().maxCoeff(), 1e-12);

  const MatrixXd vinv = fit.eigenvalues.cwiseInverse().asDiagonal();
  EXPECT_LT((est.pi_hat - vinv * gamma * vinv).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((est.pi_hat - est.pi_hat.transpose()).cwiseAbs().maxCoeff(),
            1e-14);

  // Full cross pattern collapses to a rank-one outer product.
  const auto full = svfm::estimate_factor_cov(fit, cc.residuals, period,
                                              svfm::SparsitySets::all_pairs());
  const VectorXd proj = fit.loadings.transpose() * cc.residuals.col(period);
  EXPECT_LT(
      (full.gamma_hat - proj * proj.transpose() / double(n)).cwiseAbs().maxCoeff(),
      1e-12);
}

TEST_F(InferenceCov, LoadingCovMatchesBruteForce) {
  const Eigen::Index series = 3;
  svfm::SparsitySets sets = svfm::SparsitySets::defaults(2);
  const auto est =
      svfm::estimate_loading_cov(fit, cc.residuals_projected, series, sets);

  // Banded time pattern: sum over |a-b| <= 2 of F^s_a (F^s_b)' e_ia e_ib.
  MatrixXd acc = MatrixXd::Zero(r, r);
  for (Eigen::Index a = 0; a < t; ++a) {
    for (Eigen::Index b = std::max<Eigen::Index>(0, a - 2);
         b <= std::min<Eigen::Index>(t - 1, a + 2); ++b) {
      acc += cc.residuals_projected(series, a) *
             cc.residuals_projected(series, b) *
             fit.projected_factors.row(a).transpose() *
             fit.projected_factors.row(b);
    }
  }
  const double ts = fit.weights.effective_size;
  const MatrixXd theta = acc * (double(t) * fit.bandwidth / (ts * ts));
  EXPECT_LT((est.theta_hat - theta).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((est.theta_hat - est.theta_hat.transpose()).cwiseAbs().maxCoeff(),
            1e-14);
}

TEST_F(InferenceCov, CommonSeCombinesBothPieces) {
  const Eigen::Index series = 2, period = 11;
  const svfm::SparsitySets sets;
  const auto se = svfm::estimate_common_se(fit, cc, series, period, sets);

  const MatrixXd gram = fit.loadings.transpose() * fit.loadings / double(n);
  const VectorXd gi = gram.inverse() * fit.loadings.row(series).transpose();
  const MatrixXd gamma =
      svfm::estimate_factor_cov(fit, cc.residuals, period, sets).gamma_hat;
  EXPECT_NEAR(se.v_hat, gi.dot(gamma * gi), 1e-12 * std::abs(se.v_hat));

  const VectorXd f_t = fit.projected_factors.row(period).transpose() /
                       std::sqrt(fit.weights.values(period));
  const MatrixXd theta =
      svfm::estimate_loading_cov(fit, cc.residuals_projected, series, sets)
          .theta_hat;
  EXPECT_NEAR(se.w_hat, f_t.dot(theta * f_t), 1e-12 * std::abs(se.w_hat));

  const double expected =
      std::sqrt(std::max(se.v_hat, 0.0) / double(n) +
                std::max(se.w_hat, 0.0) / (double(t) * fit.bandwidth));
  EXPECT_NEAR(se.se, expected, 1e-15);
  EXPECT_GT(se.se, 0.0);
}

TEST_F(InferenceCov, InputValidation) {
  const svfm::SparsitySets sets;
  EXPECT_THROW(svfm::estimate_factor_cov(fit, cc.residuals, t, sets),
               svfm::InvalidArgument);
  const MatrixXd short_resid = MatrixXd::Zero(n, t - 1);
  EXPECT_THROW(svfm::estimate_factor_cov(fit, short_resid, 0, sets),
               svfm::DimensionMismatch);
  EXPECT_THROW(
      svfm::estimate_loading_cov(fit, cc.residuals_projected, n, sets),
      svfm::InvalidArgument);

  // Loading and common-component errors need a kernel bandwidth.
  const auto constant = svfm::fit_constant(x, r);
  const auto cc_const = svfm::common_components(x, constant);
  EXPECT_THROW(svfm::estimate_loading_cov(constant, cc_const.residuals_projected,
                                          0, sets),
               svfm::InvalidArgument);
  EXPECT_THROW(svfm::estimate_common_se(constant, cc_const, 0, 0, sets),
               svfm::InvalidArgument);

  // Masked period: compact kernel gives zero weight far from the target.
  svfm::FitOptions opts;
  opts.min_effective_size = 1.0;
  VectorXd line(t);
  for (Eigen::Index i = 0; i < t; ++i) line(i) = double(i) / double(t - 1);
  const auto compact = svfm::fit_conditional(
      x, line, 0.1, 0.2, 1, svfm::KernelKind::epanechnikov, opts);
  const auto cc_compact = svfm::common_components(x, compact);
  EXPECT_THROW(
      svfm::estimate_factor_cov(compact, cc_compact.residuals, t - 1, sets),
      svfm::InvalidArgument);
}

TEST(GeneralizedCorrelation, CountsSharedSpanDimensions) {
  const Eigen::Index n = 50;
  MatrixXd q = random_matrix(n, 4, 10);
  Eigen::HouseholderQR<MatrixXd> qr(q);
  const MatrixXd basis = qr.householderQ() * MatrixXd::Identity(n, 4);

  const MatrixXd l1 = basis.leftCols(2);
  // Same span, different basis.
  MatrixXd mix(2, 2);
  mix << 2.0, -1.0, 0.5, 3.0;
  EXPECT_NEAR(svfm::generalized_correlation(l1, (l1 * mix).eval()), 2.0, 1e-10);

  // Orthogonal spans share nothing.
  const MatrixXd l2 = basis.rightCols(2);
  EXPECT_NEAR(svfm::generalized_correlation(l1, l2), 0.0, 1e-10);

  // One common direction out of two.
  MatrixXd l3(n, 2);
  l3.col(0) = basis.col(0);
  l3.col(1) = basis.col(3);
  EXPECT_NEAR(svfm::generalized_correlation(l1, l3), 1.0, 1e-10);

  // A one-column space inside a two-column space counts fully.
  EXPECT_NEAR(svfm::generalized_correlation(basis.col(0), l1), 1.0, 1e-10);
}

TEST(GeneralizedCorrelation, InvariantUnderInvertibleRecombination) {
  const Eigen::Index n = 40;
  const MatrixXd l1 = random_matrix(n, 3, 11);
  const MatrixXd l2 = random_matrix(n, 2, 12);
  const double base = svfm::generalized_correlation(l1, l2);
  EXPECT_GE(base, -1e-12);
  EXPECT_LE(base, 2.0 + 1e-12);

  MatrixXd a(3, 3);
  a << 1, 2, 0, -1, 0.5, 1, 0, 0, 4;
  MatrixXd b(2, 2);
  b << 0.3, -2, 1, 1;
  EXPECT_NEAR(svfm::generalized_correlation((l1 * a).eval(), (l2 * b).eval()),
              base, 1e-9);
  // Symmetric in its arguments.
  EXPECT_NEAR(svfm::generalized_correlation(l2, l1), base, 1e-10);
}

TEST(GeneralizedCorrelation, RejectsDegenerateInputs) {
  const MatrixXd l1 = random_matrix(20, 2, 13);
  EXPECT_THROW(svfm::generalized_correlation(l1, random_matrix(19, 2, 14)),
               svfm::DimensionMismatch);

  MatrixXd collinear(20, 2);
  collinear.col(0) = l1.col(0);
  collinear.col(1) = 2.0 * l1.col(0);
  EXPECT_THROW(svfm::generalized_correlation(l1, collinear),
               svfm::RankDeficient);
}

TEST(VecKron, VectorizationIdentity) {
  const MatrixXd a = random_matrix(3, 4, 20);
  const MatrixXd xm = random_matrix(4, 2, 21);
  const MatrixXd b = random_matrix(2, 5, 22);

  // vec(A X B) = (B' kron A) vec(X), column-major throughout.
  const VectorXd lhs = svfm::vec((a * xm * b).eval());
  const MatrixXd bt = b.transpose();
  const VectorXd rhs = svfm::kron<double>(bt, a) * svfm::vec(xm);
  ASSERT_EQ(lhs.size(), rhs.size());
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);

  const MatrixXd k = svfm::kron<double>(a, b);
  EXPECT_EQ(k.rows(), a.rows() * b.rows());
  EXPECT_EQ(k.cols(), a.cols() * b.cols());
  EXPECT_NEAR(k(0, 0), a(0, 0) * b(0, 0), 1e-15);
  EXPECT_NEAR(k(2 * 2 + 1, 3 * 5 + 4), a(2, 3) * b(1, 4), 1e-15);
}

}  // namespace
