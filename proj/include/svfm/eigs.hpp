#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <string>

#include "svfm/errors.hpp"

namespace svfm {

template <typename Scalar>
struct EigenResult {
  // Top-r eigenvalues, sorted descending.
  Eigen::Vector<Scalar, Eigen::Dynamic> eigenvalues;
  // m x r matrix of matching eigenvectors with orthonormal columns. Each
  // column's largest-magnitude entry is made positive (first such entry on
  // ties) so the decomposition is deterministic.
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> eigenvectors;
  // Set when the gap between the r-th and (r+1)-th eigenvalue is below
  // resolution, i.e. the returned eigenspace is not uniquely determined.
  bool repeated_eigenvalue = false;
};

// Deterministic sign fix: flip the column so its largest-|entry| is positive.
template <typename Derived>
void fix_column_signs(Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    Eigen::Index which = 0;
    m.col(j).cwiseAbs().maxCoeff(&which);
    if (m(which, j) < 0) m.col(j) = -m.col(j);
  }
}

// Top-r eigenpairs of a symmetric matrix, eigenvalues descending.
template <typename Derived>
EigenResult<typename Derived::Scalar> top_r_symmetric_eig(
    const Eigen::MatrixBase<Derived>& a, Eigen::Index r) {
  using Scalar = typename Derived::Scalar;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  const Eigen::Index m = a.rows();
  if (m != a.cols()) throw DimensionMismatch("matrix is not square");
  if (r < 1 || r > m) {
    throw InvalidArgument("rank " + std::to_string(long(r)) +
                          " out of range for a " + std::to_string(long(m)) +
                          "-dimensional matrix");
  }

  Matrix dense = a;
  if (!dense.allFinite()) throw NonFiniteValue("matrix has non-finite entries");
  const Scalar scale = dense.cwiseAbs().maxCoeff();
  const Scalar asym = (dense - dense.transpose()).cwiseAbs().maxCoeff();
  if (asym > Scalar(1e-10) * std::max(scale, Scalar(1))) {
    throw InvalidArgument("matrix is not symmetric to tolerance");
  }
  dense = ((dense + dense.transpose()) / Scalar(2)).eval();

  Eigen::SelfAdjointEigenSolver<Matrix> solver(dense);
  if (solver.info() != Eigen::Success) {
    throw NotConverged("symmetric eigendecomposition did not converge");
  }

  // Eigen sorts ascending; take the top r in descending order.
  EigenResult<Scalar> out;
  out.eigenvalues.resize(r);
  out.eigenvectors.resize(m, r);
  for (Eigen::Index j = 0; j < r; ++j) {
    out.eigenvalues(j) = solver.eigenvalues()(m - 1 - j);
    out.eigenvectors.col(j) = solver.eigenvectors().col(m - 1 - j);
  }
  fix_column_signs(out.eigenvectors);

  if (r < m) {
    const Scalar top = std::abs(solver.eigenvalues()(m - 1));
    const Scalar gap = out.eigenvalues(r - 1) - solver.eigenvalues()(m - 1 - r);
    out.repeated_eigenvalue = gap < Scalar(1e-10) * std::max(top, Scalar(1e-300));
  }
  return out;
}

}  // namespace svfm
