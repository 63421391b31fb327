#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "svfm/eigs.hpp"
#include "svfm/kernels.hpp"

namespace svfm {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Vector<Scalar, Eigen::Dynamic>;

struct FitOptions {
  // Floor on the effective sample size T(s).
  double min_effective_size = 10.0;
  // Subtract each series' unconditional mean before projecting. The mean is
  // stored on the fit and added back into common components.
  bool demean = false;
  // Which Gram matrix to eigendecompose. Both sides produce identical
  // results (up to numerical error); automatic picks the smaller problem.
  enum class Side { automatic, time, cross_section };
  Side side = Side::automatic;
};

// A latent factor fit conditioned on one target state. The projected panel
// is X^s = X * diag(sqrt(w)) with w_t = K((S_t - s)/h)/h, and the fit
// eigendecomposes (X^s)' X^s / (N T(s)) with T(s) = sum_t w_t.
template <typename Scalar>
struct ConditionalFit {
  Scalar state{};
  Scalar bandwidth{};
  Eigen::Index n_factors{};
  KernelWeights<Scalar> weights;
  // T x r projected factors F^s = sqrt(T(s)) * (top-r eigenvectors), so
  // (F^s)' F^s / T(s) = I_r.
  MatrixX<Scalar> projected_factors;
  // N x r loadings Lambda(s) = X^s F^s / T(s).
  MatrixX<Scalar> loadings;
  // Top-r eigenvalues, descending.
  VectorX<Scalar> eigenvalues;
  bool repeated_eigenvalue = false;
  bool nonpositive_eigenvalue = false;
  // Per-series means; size N when the fit demeaned, empty otherwise.
  VectorX<Scalar> row_means;

  bool demeaned() const { return row_means.size() > 0; }
};

namespace detail {

// Input panel on the scale the fit decomposes (demeaned when requested).
template <typename Scalar, typename DerivedX>
MatrixX<Scalar> fit_scale_panel(const Eigen::MatrixBase<DerivedX>& x,
                                const ConditionalFit<Scalar>& fit) {
  MatrixX<Scalar> xd = x;
  if (fit.demeaned()) xd.colwise() -= fit.row_means;
  return xd;
}

}  // namespace detail

// Weighted principal-component fit with caller-supplied weights. This is the
// computational core shared by the conditional fit (kernel weights) and the
// constant-loading fit (unit weights).
template <typename DerivedX>
ConditionalFit<typename DerivedX::Scalar> fit_weighted(
    const Eigen::MatrixBase<DerivedX>& x,
    KernelWeights<typename DerivedX::Scalar> weights, Eigen::Index r,
    const FitOptions& opts = {}) {
  using Scalar = typename DerivedX::Scalar;
  const Eigen::Index n = x.rows();
  const Eigen::Index t = x.cols();

  if (weights.values.size() != t) {
    throw DimensionMismatch("panel has " + std::to_string(long(t)) +
                            " periods but weights have " +
                            std::to_string(long(weights.values.size())));
  }
  if (r < 1 || r > std::min(n, t)) {
    throw InvalidArgument("factor count " + std::to_string(long(r)) +
                          " out of range for a " + std::to_string(long(n)) +
                          " x " + std::to_string(long(t)) + " panel");
  }
  if ((weights.values.array() < Scalar(0)).any()) {
    throw InvalidArgument("negative kernel weight");
  }
  const Scalar ts = weights.effective_size;
  if (!(ts > Scalar(0))) {
    throw EffectiveSampleTooSmall("effective sample size is zero");
  }

  ConditionalFit<Scalar> fit;
  fit.state = weights.state;
  fit.bandwidth = weights.bandwidth;
  fit.n_factors = r;
  fit.weights = std::move(weights);

  MatrixX<Scalar> xd = x;
  if (opts.demean) {
    fit.row_means = xd.rowwise().mean();
    xd.colwise() -= fit.row_means;
  }
  const VectorX<Scalar> sqrt_w = fit.weights.values.cwiseSqrt();
  const MatrixX<Scalar> xs = xd * sqrt_w.asDiagonal();

  FitOptions::Side side = opts.side;
  if (side == FitOptions::Side::automatic) {
    side = t <= n ? FitOptions::Side::time : FitOptions::Side::cross_section;
  }

  if (side == FitOptions::Side::cross_section) {
    // Eigendecompose the N x N Gram X^s (X^s)' / (N T(s)); loadings are the
    // scaled eigenvectors and factors follow by projection.
    const MatrixX<Scalar> gram =
        (xs * xs.transpose()) / (Scalar(n) * ts);
    auto eig = top_r_symmetric_eig(gram, r);
    if (eig.eigenvalues(r - 1) > Scalar(0)) {
      const VectorX<Scalar> scale =
          (Scalar(n) * eig.eigenvalues).cwiseSqrt();
      fit.projected_factors =
          xs.transpose() * eig.eigenvectors * scale.cwiseInverse().asDiagonal();
      fit.loadings = xs * fit.projected_factors / ts;
      fit.eigenvalues = std::move(eig.eigenvalues);
      fit.repeated_eigenvalue = eig.repeated_eigenvalue;
    } else {
      // Degenerate weighted panel (rank below r): the eigenvector-to-loading
      // conversion needs positive eigenvalues, so use the time side instead.
      side = FitOptions::Side::time;
    }
  }
  if (side == FitOptions::Side::time) {
    const MatrixX<Scalar> gram =
        (xs.transpose() * xs) / (Scalar(n) * ts);
    auto eig = top_r_symmetric_eig(gram, r);
    fit.projected_factors = std::sqrt(ts) * eig.eigenvectors;
    fit.loadings = xs * fit.projected_factors / ts;
    fit.eigenvalues = std::move(eig.eigenvalues);
    fit.repeated_eigenvalue = eig.repeated_eigenvalue;
  }

  fit.nonpositive_eigenvalue = !(fit.eigenvalues(r - 1) > Scalar(0));

  // Deterministic orientation shared by both sides: each loading column's
  // largest-|entry| positive, factors flipped to match.
  for (Eigen::Index j = 0; j < r; ++j) {
    Eigen::Index which = 0;
    fit.loadings.col(j).cwiseAbs().maxCoeff(&which);
    if (fit.loadings(which, j) < Scalar(0)) {
      fit.loadings.col(j) = -fit.loadings.col(j);
      fit.projected_factors.col(j) = -fit.projected_factors.col(j);
    }
  }
  return fit;
}

// Conditional fit at target state s with bandwidth h.
template <typename DerivedX, typename DerivedS>
ConditionalFit<typename DerivedX::Scalar> fit_conditional(
    const Eigen::MatrixBase<DerivedX>& x, const Eigen::DenseBase<DerivedS>& states,
    typename DerivedX::Scalar s, typename DerivedX::Scalar h, Eigen::Index r,
    KernelKind kind = KernelKind::gaussian, const FitOptions& opts = {}) {
  using Scalar = typename DerivedX::Scalar;
  if (states.size() != x.cols()) {
    throw DimensionMismatch("state path length " +
                            std::to_string(long(states.size())) +
                            " does not match panel periods " +
                            std::to_string(long(x.cols())));
  }
  auto w = kernel_weights(kind, states, s, h, Scalar(opts.min_effective_size));
  return fit_weighted(x, std::move(w), r, opts);
}

// Unit-weight fit: classical principal components with constant loadings.
// T(s) = T, so all conditional formulas reduce to their textbook forms.
template <typename DerivedX>
ConditionalFit<typename DerivedX::Scalar> fit_constant(
    const Eigen::MatrixBase<DerivedX>& x, Eigen::Index r,
    const FitOptions& opts = {}) {
  using Scalar = typename DerivedX::Scalar;
  KernelWeights<Scalar> w;
  w.values = VectorX<Scalar>::Ones(x.cols());
  w.state = std::numeric_limits<Scalar>::quiet_NaN();
  w.bandwidth = std::numeric_limits<Scalar>::quiet_NaN();
  w.effective_size = Scalar(x.cols());
  return fit_weighted(x, std::move(w), r, opts);
}

template <typename Scalar>
Scalar default_unprojection_floor(const ConditionalFit<Scalar>& fit) {
  return Scalar(1e-8) * fit.weights.values.maxCoeff();
}

// Factor estimates on the original (unprojected) time scale:
// F_t = F^s_t / sqrt(w_t). Periods with w_t below the floor carry no signal
// about the target state and are masked with NaN.
template <typename Scalar>
struct UnprojectedFactors {
  MatrixX<Scalar> factors;  // T x r, NaN rows where masked
  std::vector<Eigen::Index> valid_times;
};

template <typename Scalar>
UnprojectedFactors<Scalar> unprojected_factors(
    const ConditionalFit<Scalar>& fit,
    std::optional<Scalar> floor = std::nullopt) {
  const Scalar cut = floor.value_or(default_unprojection_floor(fit));
  const Eigen::Index t = fit.projected_factors.rows();

  UnprojectedFactors<Scalar> out;
  out.factors.setConstant(t, fit.n_factors,
                          std::numeric_limits<Scalar>::quiet_NaN());
  out.valid_times.reserve(std::size_t(t));
  for (Eigen::Index i = 0; i < t; ++i) {
    const Scalar w = fit.weights.values(i);
    if (w >= cut && w > Scalar(0)) {
      out.factors.row(i) = fit.projected_factors.row(i) / std::sqrt(w);
      out.valid_times.push_back(i);
    }
  }
  return out;
}

// Common components and both residual kinds for the panel the fit was
// computed from. On valid times the decomposition X = common + residuals
// holds exactly; masked times are NaN in both.
template <typename Scalar>
struct CommonComponents {
  MatrixX<Scalar> common;               // N x T
  MatrixX<Scalar> residuals;            // N x T, X - common
  MatrixX<Scalar> residuals_projected;  // N x T, X^s - Lambda (F^s)'
  std::vector<Eigen::Index> valid_times;
};

template <typename DerivedX, typename Scalar>
CommonComponents<Scalar> common_components(
    const Eigen::MatrixBase<DerivedX>& x, const ConditionalFit<Scalar>& fit,
    std::optional<Scalar> floor = std::nullopt) {
  const Eigen::Index n = x.rows();
  const Eigen::Index t = x.cols();
  if (fit.loadings.rows() != n || fit.projected_factors.rows() != t) {
    throw DimensionMismatch("panel shape does not match the fit");
  }

  const MatrixX<Scalar> xd = detail::fit_scale_panel(x, fit);
  const VectorX<Scalar> sqrt_w = fit.weights.values.cwiseSqrt();

  CommonComponents<Scalar> out;
  out.residuals_projected =
      xd * sqrt_w.asDiagonal() - fit.loadings * fit.projected_factors.transpose();

  const auto unproj = unprojected_factors(fit, floor);
  out.valid_times = unproj.valid_times;
  const Scalar nan = std::numeric_limits<Scalar>::quiet_NaN();
  out.common.setConstant(n, t, nan);
  out.residuals.setConstant(n, t, nan);
  for (Eigen::Index tt : out.valid_times) {
    out.common.col(tt) = fit.loadings * unproj.factors.row(tt).transpose();
    if (fit.demeaned()) out.common.col(tt) += fit.row_means;
    out.residuals.col(tt) = x.col(tt) - out.common.col(tt);
  }
  return out;
}

// Scale-normalized estimators: loadings_bar' loadings_bar / N = I_r and
// loadings_bar factors_bar' reproduces loadings (factors)' exactly.
template <typename Scalar>
struct NormalizedFit {
  MatrixX<Scalar> loadings_bar;  // N x r
  MatrixX<Scalar> factors_bar;   // T x r (projected scale)
};

template <typename Scalar>
NormalizedFit<Scalar> normalize_fit(const ConditionalFit<Scalar>& fit) {
  if (!(fit.eigenvalues(fit.n_factors - 1) > Scalar(0))) {
    throw SingularEigenvalue(
        "cannot normalize a fit with nonpositive eigenvalues");
  }
  const VectorX<Scalar> root = fit.eigenvalues.cwiseSqrt();
  NormalizedFit<Scalar> out;
  out.loadings_bar = fit.loadings * root.cwiseInverse().asDiagonal();
  out.factors_bar = fit.projected_factors * root.asDiagonal();
  return out;
}

// Fits over a grid of target states. Numerical failures at individual grid
// points (thin support, degenerate panels) are recorded and skipped.
template <typename Scalar>
struct StateSweep {
  VectorX<Scalar> states;
  std::vector<std::optional<ConditionalFit<Scalar>>> fits;
  // G x r: eigenvalue_j / trace of the projected second-moment matrix.
  MatrixX<Scalar> variance_shares;
  VectorX<Scalar> density;  // state density estimate per grid point
  std::vector<std::string> errors;  // empty string where the fit succeeded
};

template <typename DerivedX, typename DerivedS, typename DerivedG>
StateSweep<typename DerivedX::Scalar> state_sweep(
    const Eigen::MatrixBase<DerivedX>& x, const Eigen::DenseBase<DerivedS>& states,
    const Eigen::DenseBase<DerivedG>& grid, typename DerivedX::Scalar h,
    Eigen::Index r, KernelKind kind = KernelKind::gaussian,
    const FitOptions& opts = {}) {
  using Scalar = typename DerivedX::Scalar;
  const Eigen::Index g = grid.size();
  if (g == 0) throw InvalidArgument("empty state grid");

  StateSweep<Scalar> sweep;
  sweep.states = grid;
  sweep.fits.resize(std::size_t(g));
  sweep.variance_shares.setConstant(g, r, std::numeric_limits<Scalar>::quiet_NaN());
  sweep.density.setConstant(g, std::numeric_limits<Scalar>::quiet_NaN());
  sweep.errors.assign(std::size_t(g), "");

  for (Eigen::Index k = 0; k < g; ++k) {
    try {
      auto fit = fit_conditional(x, states, Scalar(grid.derived()(k)), h, r, kind, opts);
      const MatrixX<Scalar> xd = detail::fit_scale_panel(x, fit);
      const Scalar total =
          (xd * fit.weights.values.cwiseSqrt().asDiagonal()).squaredNorm() /
          (Scalar(x.rows()) * fit.weights.effective_size);
      if (total > Scalar(0)) {
        sweep.variance_shares.row(k) = fit.eigenvalues / total;
      }
      sweep.density(k) = density_estimate(fit.weights);
      sweep.fits[std::size_t(k)] = std::move(fit);
    } catch (const Error& e) {
      if (e.error_class() != ErrorClass::numerical) throw;
      sweep.errors[std::size_t(k)] = std::string(e.name()) + ": " + e.what();
    }
  }
  return sweep;
}

}  // namespace svfm
