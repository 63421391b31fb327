#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "svfm/estimator.hpp"

namespace svfm {

// R^2 of a common-component estimate against the panel, and optionally
// against the true common component. NaN cells of the estimate (masked or
// skipped periods) are excluded from every sum; their count is reported.
template <typename Scalar>
struct RsqResult {
  Scalar vs_panel{};
  std::optional<Scalar> vs_truth;
  Eigen::Index n_masked_cells{};
};

template <typename Scalar>
RsqResult<Scalar> rsq(const MatrixX<Scalar>& x, const MatrixX<Scalar>& c_hat,
                      const MatrixX<Scalar>* c_true = nullptr) {
  if (c_hat.rows() != x.rows() || c_hat.cols() != x.cols()) {
    throw DimensionMismatch("common component shape does not match the panel");
  }
  if (c_true != nullptr &&
      (c_true->rows() != x.rows() || c_true->cols() != x.cols())) {
    throw DimensionMismatch("true common component shape does not match the panel");
  }

  Scalar err_x = 0, den_x = 0, err_c = 0, den_c = 0;
  Eigen::Index masked = 0;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Scalar c = c_hat(i, j);
      if (!std::isfinite(double(c))) {
        ++masked;
        continue;
      }
      const Scalar xx = x(i, j);
      err_x += (xx - c) * (xx - c);
      den_x += xx * xx;
      if (c_true != nullptr) {
        const Scalar ct = (*c_true)(i, j);
        err_c += (ct - c) * (ct - c);
        den_c += ct * ct;
      }
    }
  }
  if (!(den_x > Scalar(0))) {
    throw ZeroDenominator("panel has zero sum of squares over unmasked cells");
  }

  RsqResult<Scalar> out;
  out.vs_panel = Scalar(1) - err_x / den_x;
  out.n_masked_cells = masked;
  if (c_true != nullptr) {
    if (!(den_c > Scalar(0))) {
      throw ZeroDenominator("true common component has zero sum of squares");
    }
    out.vs_truth = Scalar(1) - err_c / den_c;
  }
  return out;
}

// Common components by per-period loading refits: for each evaluation period
// t, loadings are estimated from the source panel at the period's state and
// the evaluation observation is projected onto them,
// C_t = Lambda_t (Lambda_t' Lambda_t)^-1 Lambda_t' X_t.
// With source == evaluation data this equals the in-sample common component
// of the fit at each period's own state; with a held-out evaluation panel it
// is the out-of-sample estimate.
template <typename Scalar>
struct StateProjectedCommon {
  MatrixX<Scalar> common;   // N x T_eval, NaN where skipped
  MatrixX<Scalar> factors;  // T_eval x r, NaN where skipped
  std::vector<Eigen::Index> skipped;
  std::vector<std::string> errors;  // aligned with skipped
};

template <typename Scalar>
StateProjectedCommon<Scalar> common_by_state_projection(
    const MatrixX<Scalar>& x_source, const VectorX<Scalar>& s_source,
    const MatrixX<Scalar>& x_eval, const VectorX<Scalar>& s_eval, Scalar h,
    Eigen::Index r, KernelKind kind = KernelKind::gaussian,
    const FitOptions& opts = {}) {
  const Eigen::Index n = x_source.rows();
  if (x_eval.rows() != n) throw DimensionMismatch("panels differ in series count");
  if (s_eval.size() != x_eval.cols() || s_source.size() != x_source.cols()) {
    throw DimensionMismatch("state path length does not match its panel");
  }

  const Scalar nan = std::numeric_limits<Scalar>::quiet_NaN();
  StateProjectedCommon<Scalar> out;
  out.common.setConstant(n, x_eval.cols(), nan);
  out.factors.setConstant(x_eval.cols(), r, nan);

  for (Eigen::Index t = 0; t < x_eval.cols(); ++t) {
    try {
      const auto fit =
          fit_conditional(x_source, s_source, s_eval(t), h, r, kind, opts);
      VectorX<Scalar> col = x_eval.col(t);
      if (fit.demeaned()) col -= fit.row_means;
      const MatrixX<Scalar> gram =
          fit.loadings.transpose() * fit.loadings;
      const auto ldlt = gram.ldlt();
      if (ldlt.info() != Eigen::Success ||
          !(ldlt.vectorD().minCoeff() >
            Scalar(1e-12) * ldlt.vectorD().maxCoeff())) {
        throw SingularLoadingGram("loading Gram matrix is numerically singular");
      }
      const VectorX<Scalar> f = ldlt.solve(fit.loadings.transpose() * col);
      out.factors.row(t) = f.transpose();
      out.common.col(t) = fit.loadings * f;
      if (fit.demeaned()) out.common.col(t) += fit.row_means;
    } catch (const Error& e) {
      if (e.error_class() != ErrorClass::numerical) throw;
      out.skipped.push_back(t);
      out.errors.push_back(std::string(e.name()) + ": " + e.what());
    }
  }
  return out;
}

// Out-of-sample common components: per-period loading refits on the training
// panel, projection of the held-out observations.
template <typename Scalar>
StateProjectedCommon<Scalar> oos_common_component(
    const MatrixX<Scalar>& x_train, const VectorX<Scalar>& s_train,
    const MatrixX<Scalar>& x_test, const VectorX<Scalar>& s_test, Scalar h,
    Eigen::Index r, KernelKind kind = KernelKind::gaussian,
    const FitOptions& opts = {}) {
  return common_by_state_projection(x_train, s_train, x_test, s_test, h, r,
                                    kind, opts);
}

// Constant-loading (classical PCA) analogue: loadings fitted once on the
// training panel, every held-out observation projected onto them.
template <typename Scalar>
StateProjectedCommon<Scalar> constant_projection(const MatrixX<Scalar>& x_train,
                                                 const MatrixX<Scalar>& x_test,
                                                 Eigen::Index r,
                                                 const FitOptions& opts = {}) {
  if (x_test.rows() != x_train.rows()) {
    throw DimensionMismatch("panels differ in series count");
  }
  const auto fit = fit_constant(x_train, r, opts);
  MatrixX<Scalar> xt = x_test;
  if (fit.demeaned()) xt.colwise() -= fit.row_means;

  const MatrixX<Scalar> gram = fit.loadings.transpose() * fit.loadings;
  const auto ldlt = gram.ldlt();
  if (ldlt.info() != Eigen::Success ||
      !(ldlt.vectorD().minCoeff() >
        Scalar(1e-12) * ldlt.vectorD().maxCoeff())) {
    throw SingularLoadingGram("loading Gram matrix is numerically singular");
  }
  StateProjectedCommon<Scalar> out;
  out.factors = ldlt.solve(fit.loadings.transpose() * xt).transpose();
  out.common = fit.loadings * out.factors.transpose();
  if (fit.demeaned()) out.common.colwise() += fit.row_means;
  return out;
}

struct BacktestOptions {
  Eigen::Index initial_train = 0;
  Eigen::Index refit_every = 1;
  double bandwidth = 0.0;
  Eigen::Index n_factors = 1;
  KernelKind kind = KernelKind::gaussian;
  FitOptions fit;

  void validate(Eigen::Index t) const {
    if (initial_train < 2 || initial_train >= t) {
      throw ConfigError("initial training window must lie strictly inside the sample");
    }
    if (refit_every < 1) throw ConfigError("refit interval must be positive");
    if (!(bandwidth > 0)) throw ConfigError("bandwidth must be positive");
  }
};

// Walk-forward out-of-sample common components on an expanding window.
// Observations at or after each refit point are predicted using only data
// strictly before it.
template <typename Scalar>
struct BacktestReport {
  std::vector<Eigen::Index> refit_points;
  MatrixX<Scalar> common;  // N x T, NaN on the initial window and skips
  RsqResult<Scalar> fit_quality;
  std::vector<Eigen::Index> skipped;
  std::vector<std::string> errors;
};

template <typename Scalar>
BacktestReport<Scalar> expanding_backtest(const MatrixX<Scalar>& x,
                                          const VectorX<Scalar>& s,
                                          const BacktestOptions& opts,
                                          const MatrixX<Scalar>* c_true = nullptr) {
  const Eigen::Index t = x.cols();
  opts.validate(t);

  BacktestReport<Scalar> report;
  report.common.setConstant(x.rows(), t,
                            std::numeric_limits<Scalar>::quiet_NaN());

  for (Eigen::Index start = opts.initial_train; start < t;
       start += opts.refit_every) {
    report.refit_points.push_back(start);
    const Eigen::Index stop = std::min<Eigen::Index>(start + opts.refit_every, t);
    const auto train_x = x.leftCols(start);
    const auto train_s = s.head(start);
    const auto proj = common_by_state_projection<Scalar>(
        train_x, train_s, x.middleCols(start, stop - start),
        s.segment(start, stop - start), Scalar(opts.bandwidth), opts.n_factors,
        opts.kind, opts.fit);
    report.common.middleCols(start, stop - start) = proj.common;
    for (std::size_t k = 0; k < proj.skipped.size(); ++k) {
      report.skipped.push_back(start + proj.skipped[k]);
      report.errors.push_back(proj.errors[k]);
    }
  }

  const MatrixX<Scalar> x_test = x.rightCols(t - opts.initial_train);
  const MatrixX<Scalar> c_test = report.common.rightCols(t - opts.initial_train);
  if (c_true != nullptr) {
    const MatrixX<Scalar> ct = c_true->rightCols(t - opts.initial_train);
    report.fit_quality = rsq<Scalar>(x_test, c_test, &ct);
  } else {
    report.fit_quality = rsq<Scalar>(x_test, c_test);
  }
  return report;
}

// Mean-variance weights in factor space from a factor return series
// (NaN rows are skipped): w = Cov^-1 mean. A numerically singular factor
// covariance gets a small ridge; if that still fails the portfolio refuses.
template <typename Scalar>
VectorX<Scalar> mv_factor_weights(const MatrixX<Scalar>& factor_series,
                                  bool* ridged = nullptr) {
  const Eigen::Index r = factor_series.cols();
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < factor_series.rows(); ++i) {
    if (factor_series.row(i).allFinite()) rows.push_back(i);
  }
  if (Eigen::Index(rows.size()) < r + 1) {
    throw SingularFactorCov("not enough factor observations to estimate moments");
  }
  VectorX<Scalar> mean = VectorX<Scalar>::Zero(r);
  for (Eigen::Index i : rows) mean += factor_series.row(i).transpose();
  mean /= Scalar(rows.size());
  MatrixX<Scalar> cov = MatrixX<Scalar>::Zero(r, r);
  for (Eigen::Index i : rows) {
    const VectorX<Scalar> d = factor_series.row(i).transpose() - mean;
    cov.noalias() += d * d.transpose();
  }
  cov /= Scalar(rows.size() - 1);

  auto solvable = [&](const MatrixX<Scalar>& m) {
    Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> eig(m);
    return eig.eigenvalues().minCoeff() >
           Scalar(1e-12) * std::max(eig.eigenvalues().maxCoeff(), Scalar(0));
  };
  if (!solvable(cov)) {
    cov += MatrixX<Scalar>::Identity(r, r) *
           (Scalar(1e-8) * std::max(cov.trace() / Scalar(r), Scalar(1e-300)));
    if (ridged != nullptr) *ridged = true;
    if (!solvable(cov)) {
      throw SingularFactorCov("factor covariance matrix is numerically singular");
    }
  }
  return cov.ldlt().solve(mean);
}

// Factor-space weights mapped to asset space and normalized to unit gross
// exposure. The mapping omega = Lambda (Lambda'Lambda)^-1 w makes the
// portfolio invariant to the rotational indeterminacy of the fit.
template <typename Scalar>
VectorX<Scalar> asset_weights(const MatrixX<Scalar>& loadings,
                              const VectorX<Scalar>& factor_weights) {
  const MatrixX<Scalar> gram = loadings.transpose() * loadings;
  const auto ldlt = gram.ldlt();
  if (ldlt.info() != Eigen::Success ||
      !(ldlt.vectorD().minCoeff() >
        Scalar(1e-12) * ldlt.vectorD().maxCoeff())) {
    throw SingularLoadingGram("loading Gram matrix is numerically singular");
  }
  VectorX<Scalar> omega = loadings * ldlt.solve(factor_weights);
  const Scalar gross = omega.template lpNorm<1>();
  if (!(gross > Scalar(0))) {
    throw ZeroDenominator("portfolio weights are identically zero");
  }
  return omega / gross;
}

template <typename Scalar>
struct PortfolioReport {
  std::vector<Eigen::Index> times;       // evaluation periods
  VectorX<Scalar> returns;               // realized excess returns, NaN = skipped
  MatrixX<Scalar> factor_weights;        // one row per refit step
  std::vector<Eigen::Index> refit_points;
  Scalar mean_return{};
  Scalar volatility{};
  Scalar sharpe_annualized{};
  bool ridged_covariance = false;
};

// Walk-forward mean-variance factor portfolio. At each refit point the
// factor return series is re-estimated on the training window (per-period
// loading refits + cross-sectional regression), weights are formed from its
// moments, and the realized next-period returns use loadings at the known
// period state with weights fixed at the period start.
template <typename Scalar>
PortfolioReport<Scalar> mv_factor_portfolio(const MatrixX<Scalar>& x,
                                            const VectorX<Scalar>& s,
                                            const BacktestOptions& opts,
                                            Scalar risk_free = 0,
                                            Scalar periods_per_year = 252) {
  const Eigen::Index t = x.cols();
  opts.validate(t);

  PortfolioReport<Scalar> report;
  report.returns.setConstant(t - opts.initial_train,
                             std::numeric_limits<Scalar>::quiet_NaN());
  report.factor_weights.resize(0, opts.n_factors);

  for (Eigen::Index start = opts.initial_train; start < t;
       start += opts.refit_every) {
    report.refit_points.push_back(start);
    const Eigen::Index stop = std::min<Eigen::Index>(start + opts.refit_every, t);
    const auto train_x = x.leftCols(start);
    const auto train_s = s.head(start);

    // Training factor series at each window period's own state.
    const auto train_proj = common_by_state_projection<Scalar>(
        train_x, train_s, train_x, train_s, Scalar(opts.bandwidth),
        opts.n_factors, opts.kind, opts.fit);
    bool ridged = false;
    const VectorX<Scalar> w = mv_factor_weights<Scalar>(train_proj.factors, &ridged);
    report.ridged_covariance = report.ridged_covariance || ridged;
    report.factor_weights.conservativeResize(report.factor_weights.rows() + 1,
                                             opts.n_factors);
    report.factor_weights.bottomRows(1) = w.transpose();

    for (Eigen::Index period = start; period < stop; ++period) {
      report.times.push_back(period);
      try {
        const auto fit = fit_conditional(train_x, train_s, s(period),
                                         Scalar(opts.bandwidth), opts.n_factors,
                                         opts.kind, opts.fit);
        const VectorX<Scalar> omega = asset_weights<Scalar>(fit.loadings, w);
        VectorX<Scalar> col = x.col(period);
        if (fit.demeaned()) col -= fit.row_means;
        report.returns(period - opts.initial_train) =
            omega.dot(col) - risk_free;
      } catch (const Error& e) {
        if (e.error_class() != ErrorClass::numerical) throw;
      }
    }
  }

  std::vector<Scalar> realized;
  for (Eigen::Index i = 0; i < report.returns.size(); ++i) {
    if (std::isfinite(double(report.returns(i)))) {
      realized.push_back(report.returns(i));
    }
  }
  if (realized.size() < 2) {
    throw ZeroVariance("not enough realized portfolio returns");
  }
  Scalar mean = 0;
  for (Scalar v : realized) mean += v;
  mean /= Scalar(realized.size());
  Scalar var = 0;
  for (Scalar v : realized) var += (v - mean) * (v - mean);
  var /= Scalar(realized.size() - 1);
  if (!(var > Scalar(0))) {
    throw ZeroDenominator("flat portfolio return path; volatility is zero");
  }
  report.mean_return = mean;
  report.volatility = std::sqrt(var);
  report.sharpe_annualized =
      mean / report.volatility * std::sqrt(periods_per_year);
  return report;
}

// Per-state eigenvalue shares from a sweep, for scree-style diagnostics.
template <typename Scalar>
struct VarianceShares {
  VectorX<Scalar> states;
  MatrixX<Scalar> shares;  // G x r, NaN at failed grid points
};

template <typename Scalar>
VarianceShares<Scalar> variance_explained_shares(const StateSweep<Scalar>& sweep) {
  return {sweep.states, sweep.variance_shares};
}

}  // namespace svfm
