#include "svfm/eigs.hpp"

#include <gtest/gtest.h>

#include <Eigen/Core>
#include <Eigen/SVD>

#include <random>

namespace {

Eigen::MatrixXd random_symmetric(int m, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd a(m, m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) a(i, j) = normal(gen);
  }
  return (a + a.transpose()) / 2.0;
}

TEST(Eigs, DiagonalMatrix) {
  Eigen::MatrixXd a = Eigen::Vector3d(3.0, 2.0, 1.0).asDiagonal();
  const auto res = svfm::top_r_symmetric_eig(a, 2);
  ASSERT_EQ(res.eigenvalues.size(), 2);
  EXPECT_NEAR(res.eigenvalues(0), 3.0, 1e-14);
  EXPECT_NEAR(res.eigenvalues(1), 2.0, 1e-14);
  EXPECT_NEAR(res.eigenvectors(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(res.eigenvectors(1, 1), 1.0, 1e-14);
  EXPECT_FALSE(res.repeated_eigenvalue);
}

TEST(Eigs, RepeatedEigenvalueFlag) {
  const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(3, 3);
  EXPECT_TRUE(svfm::top_r_symmetric_eig(identity, 1).repeated_eigenvalue);
  EXPECT_TRUE(svfm::top_r_symmetric_eig(identity, 2).repeated_eigenvalue);
  // Full-rank request has no trailing eigenvalue to collide with.
  EXPECT_FALSE(svfm::top_r_symmetric_eig(identity, 3).repeated_eigenvalue);

  Eigen::MatrixXd spread = Eigen::Vector3d(3.0, 2.0, 1.0).asDiagonal();
  EXPECT_FALSE(svfm::top_r_symmetric_eig(spread, 2).repeated_eigenvalue);
}

TEST(Eigs, MatchesSvdOracle) {
  // For a PSD matrix A = B B', the eigenvalues are the squared singular
  // values of B and the eigenvectors are B's left singular vectors.
  std::mt19937 gen(7);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd b(8, 5);
  for (int i = 0; i < b.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) b(i, j) = normal(gen);
  }
  const Eigen::MatrixXd a = b * b.transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU);

  const auto res = svfm::top_r_symmetric_eig(a, 4);
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(res.eigenvalues(j),
                svd.singularValues()(j) * svd.singularValues()(j), 1e-10);
    // Compare up to sign.
    const double align =
        std::abs(res.eigenvectors.col(j).dot(svd.matrixU().col(j)));
    EXPECT_NEAR(align, 1.0, 1e-10);
  }
}

TEST(Eigs, ResidualAndOrthonormality) {
  const Eigen::MatrixXd a = random_symmetric(12, 42);
  const auto res = svfm::top_r_symmetric_eig(a, 12);

  // Full decomposition reconstructs the matrix.
  const Eigen::MatrixXd rebuilt = res.eigenvectors *
                                  res.eigenvalues.asDiagonal() *
                                  res.eigenvectors.transpose();
  EXPECT_LT((rebuilt - a).norm(), 1e-12 * a.norm());

  // Orthonormal columns, descending eigenvalues, eigenpair residuals.
  EXPECT_LT((res.eigenvectors.transpose() * res.eigenvectors -
             Eigen::MatrixXd::Identity(12, 12))
                .norm(),
            1e-12);
  for (int j = 0; j < 12; ++j) {
    if (j > 0) EXPECT_GE(res.eigenvalues(j - 1), res.eigenvalues(j));
    const Eigen::VectorXd resid = a * res.eigenvectors.col(j) -
                                  res.eigenvalues(j) * res.eigenvectors.col(j);
    EXPECT_LT(resid.norm(), 1e-11 * a.norm());
  }
}

TEST(Eigs, SignConvention) {
  const Eigen::MatrixXd a = random_symmetric(9, 3);
  const auto res = svfm::top_r_symmetric_eig(a, 5);
  for (int j = 0; j < 5; ++j) {
    Eigen::Index which = 0;
    res.eigenvectors.col(j).cwiseAbs().maxCoeff(&which);
    EXPECT_GT(res.eigenvectors(which, j), 0.0);
  }

  // fix_column_signs is idempotent and flips a negated column back.
  Eigen::MatrixXd flipped = res.eigenvectors;
  flipped.col(2) = -flipped.col(2);
  svfm::fix_column_signs(flipped);
  EXPECT_EQ(flipped, res.eigenvectors);
}

TEST(Eigs, InputValidation) {
  const Eigen::MatrixXd rect = Eigen::MatrixXd::Zero(3, 4);
  EXPECT_THROW(svfm::top_r_symmetric_eig(rect, 1), svfm::DimensionMismatch);

  Eigen::MatrixXd asym(2, 2);
  asym << 1.0, 2.0, 0.0, 1.0;
  EXPECT_THROW(svfm::top_r_symmetric_eig(asym, 1), svfm::InvalidArgument);

  const Eigen::MatrixXd sym = random_symmetric(4, 1);
  EXPECT_THROW(svfm::top_r_symmetric_eig(sym, 0), svfm::InvalidArgument);
  EXPECT_THROW(svfm::top_r_symmetric_eig(sym, 5), svfm::InvalidArgument);

  Eigen::MatrixXd nan = sym;
  nan(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(svfm::top_r_symmetric_eig(nan, 1), svfm::NonFiniteValue);
}

}  // namespace
