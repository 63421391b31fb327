#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "svfm/estimator.hpp"
#include "svfm/sparsity.hpp"
#include "svfm/stats.hpp"

namespace svfm {

// Column-major vectorization and Kronecker product; the global convention is
// vec(A X B) = (B' (x) A) vec(X).
template <typename Derived>
VectorX<typename Derived::Scalar> vec(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> dense = m;
  return Eigen::Map<VectorX<Scalar>>(dense.data(), dense.size());
}

template <typename Scalar>
MatrixX<Scalar> kron(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  MatrixX<Scalar> out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

namespace detail {

template <typename Scalar>
VectorX<Scalar> positive_eigenvalue_inverses(const ConditionalFit<Scalar>& fit) {
  if (!(fit.eigenvalues(fit.n_factors - 1) > Scalar(0))) {
    throw SingularEigenvalue("fit has nonpositive eigenvalues");
  }
  return fit.eigenvalues.cwiseInverse();
}

// (1/N) sum_{(i,j) in cross pattern} Lambda_i Lambda_j' e_it e_jt.
template <typename Scalar>
MatrixX<Scalar> loading_residual_gram(const MatrixX<Scalar>& loadings,
                                      const MatrixX<Scalar>& residuals,
                                      Eigen::Index t, const PairPattern& cross) {
  const Eigen::Index n = loadings.rows();
  const Eigen::Index r = loadings.cols();
  MatrixX<Scalar> acc = MatrixX<Scalar>::Zero(r, r);
  cross.for_each(n, [&](Eigen::Index i, Eigen::Index j) {
    acc.noalias() += (residuals(i, t) * residuals(j, t)) *
                     (loadings.row(i).transpose() * loadings.row(j));
  });
  return acc / Scalar(n);
}

template <typename Scalar>
MatrixX<Scalar> symmetrized(const MatrixX<Scalar>& m) {
  return (m + m.transpose()) / Scalar(2);
}

}  // namespace detail

// Asymptotic covariance of the factor estimate at one period:
// Pi_t = V^-1 [ (1/N) sum_{(i,j)} Lambda_i Lambda_j' e_it e_jt ] V^-1,
// where e are unprojected residuals and (i,j) runs over the cross-sectional
// sparsity set. sqrt(N) (F_t_hat - H' F_t) is asymptotically N(0, Pi_t).
template <typename Scalar>
struct FactorCov {
  MatrixX<Scalar> pi_hat;     // r x r
  MatrixX<Scalar> gamma_hat;  // the bracket, before the V^-1 sandwich
};

template <typename Scalar>
FactorCov<Scalar> estimate_factor_cov(const ConditionalFit<Scalar>& fit,
                                      const MatrixX<Scalar>& residuals,
                                      Eigen::Index t, const SparsitySets& sets) {
  if (residuals.rows() != fit.loadings.rows() ||
      residuals.cols() != fit.projected_factors.rows()) {
    throw DimensionMismatch("residual matrix shape does not match the fit");
  }
  if (t < 0 || t >= residuals.cols()) throw InvalidArgument("period out of range");
  if (!residuals.col(t).allFinite()) {
    throw InvalidArgument("residuals at the requested period are masked");
  }
  sets.cross.validate(residuals.rows());

  const VectorX<Scalar> vinv = detail::positive_eigenvalue_inverses(fit);
  FactorCov<Scalar> out;
  out.gamma_hat =
      detail::loading_residual_gram(fit.loadings, residuals, t, sets.cross);
  out.pi_hat = detail::symmetrized<Scalar>(
      vinv.asDiagonal() * out.gamma_hat * vinv.asDiagonal());
  return out;
}

// Asymptotic covariance of the loading estimate for one series:
// Theta_i = (T h / T(s)^2) sum_{(t,u)} F^s_t (F^s_u)' e^s_it e^s_iu,
// where e^s are projected residuals and (t,u) runs over the time sparsity
// set. sqrt(T h) (Lambda_i_hat - H^-1 Lambda_i(s)) is asym. N(0, Theta_i).
template <typename Scalar>
struct LoadingCov {
  MatrixX<Scalar> theta_hat;  // r x r
};

template <typename Scalar>
LoadingCov<Scalar> estimate_loading_cov(const ConditionalFit<Scalar>& fit,
                                        const MatrixX<Scalar>& residuals_projected,
                                        Eigen::Index i, const SparsitySets& sets) {
  const Eigen::Index n = fit.loadings.rows();
  const Eigen::Index t = fit.projected_factors.rows();
  if (residuals_projected.rows() != n || residuals_projected.cols() != t) {
    throw DimensionMismatch("residual matrix shape does not match the fit");
  }
  if (i < 0 || i >= n) throw InvalidArgument("series out of range");
  if (!std::isfinite(double(fit.bandwidth))) {
    throw InvalidArgument("loading covariance requires a kernel fit");
  }
  sets.time.validate(t);

  const Eigen::Index r = fit.n_factors;
  MatrixX<Scalar> acc = MatrixX<Scalar>::Zero(r, r);
  sets.time.for_each(t, [&](Eigen::Index a, Eigen::Index b) {
    acc.noalias() += (residuals_projected(i, a) * residuals_projected(i, b)) *
                     (fit.projected_factors.row(a).transpose() *
                      fit.projected_factors.row(b));
  });
  const Scalar ts = fit.weights.effective_size;
  LoadingCov<Scalar> out;
  out.theta_hat = detail::symmetrized<Scalar>(
      acc * (Scalar(t) * fit.bandwidth / (ts * ts)));
  return out;
}

// Pointwise standard error of the common component estimate C_it:
// se^2 = V_it / N + W_it / (T h) with
//   V_it = Lambda_i' (Lambda'Lambda/N)^-1 Gamma_t (Lambda'Lambda/N)^-1 Lambda_i
//   W_it = F_t' Theta_i F_t  (unprojected factor at t).
template <typename Scalar>
struct CommonSe {
  Scalar v_hat;  // cross-sectional variance piece (raw quadratic form)
  Scalar w_hat;  // time-series variance piece (raw quadratic form)
  Scalar se;     // sqrt(max(V,0)/N + max(W,0)/(T h))
};

template <typename Scalar>
CommonSe<Scalar> estimate_common_se(const ConditionalFit<Scalar>& fit,
                                    const CommonComponents<Scalar>& components,
                                    Eigen::Index i, Eigen::Index t,
                                    const SparsitySets& sets) {
  const Eigen::Index n = fit.loadings.rows();
  const Eigen::Index periods = fit.projected_factors.rows();
  if (i < 0 || i >= n) throw InvalidArgument("series out of range");
  if (t < 0 || t >= periods) throw InvalidArgument("period out of range");
  if (!std::isfinite(double(fit.bandwidth))) {
    throw InvalidArgument("common-component standard errors require a kernel fit");
  }

  // Cross-sectional piece.
  const MatrixX<Scalar> gram =
      fit.loadings.transpose() * fit.loadings / Scalar(n);
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> gram_eig(gram);
  const Scalar gmax = gram_eig.eigenvalues().maxCoeff();
  const Scalar gmin = gram_eig.eigenvalues().minCoeff();
  if (!(gmin > Scalar(1e-12) * gmax)) {
    throw SingularLoadingGram("loading Gram matrix is numerically singular");
  }
  const auto gamma =
      estimate_factor_cov(fit, components.residuals, t, sets).gamma_hat;
  const VectorX<Scalar> gi =
      gram_eig.eigenvectors() *
      (gram_eig.eigenvectors().transpose() * fit.loadings.row(i).transpose())
          .cwiseQuotient(gram_eig.eigenvalues());

  // Time-series piece at the unprojected factor.
  const Scalar w_t = fit.weights.values(t);
  if (!(w_t >= default_unprojection_floor(fit)) || !(w_t > Scalar(0))) {
    throw InvalidArgument("period carries no weight at the target state");
  }
  const VectorX<Scalar> f_t =
      fit.projected_factors.row(t).transpose() / std::sqrt(w_t);
  const auto theta = estimate_loading_cov(fit, components.residuals_projected,
                                          i, sets);

  CommonSe<Scalar> out;
  out.v_hat = gi.dot(gamma * gi);
  out.w_hat = f_t.dot(theta.theta_hat * f_t);
  out.se = std::sqrt(std::max(out.v_hat, Scalar(0)) / Scalar(n) +
                     std::max(out.w_hat, Scalar(0)) /
                         (Scalar(periods) * fit.bandwidth));
  return out;
}

// Trace measure of how much of one loading span lies inside another:
// rho = tr[ (L1'L1/N)^-1 (L1'L2/N) (L2'L2/N)^-1 (L2'L1/N) ] in [0, min(r1,r2)].
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar generalized_correlation(
    const Eigen::MatrixBase<DerivedA>& l1, const Eigen::MatrixBase<DerivedB>& l2) {
  using Scalar = typename DerivedA::Scalar;
  const Eigen::Index n = l1.rows();
  if (l2.rows() != n) throw DimensionMismatch("loading matrices differ in series count");
  if (l1.cols() < 1 || l2.cols() < 1) throw InvalidArgument("empty loading matrix");

  const MatrixX<Scalar> g11 = l1.transpose() * l1 / Scalar(n);
  const MatrixX<Scalar> g12 = l1.transpose() * l2 / Scalar(n);
  const MatrixX<Scalar> g22 = l2.transpose() * l2 / Scalar(n);

  for (const MatrixX<Scalar>* g : {&g11, &g22}) {
    Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> eig(*g);
    if (!(eig.eigenvalues().minCoeff() >
          Scalar(1e-12) * eig.eigenvalues().maxCoeff())) {
      throw RankDeficient("loading matrix is numerically rank deficient");
    }
  }
  const MatrixX<Scalar> a = g11.ldlt().solve(g12);
  const MatrixX<Scalar> b = g22.ldlt().solve(g12.transpose());
  return (a * b).trace();
}

// One state's inputs to the span-equality test, in normalized form.
template <typename Scalar>
struct GcStateInput {
  Scalar state{};
  Scalar bandwidth{};
  Scalar effective_size{};
  VectorX<Scalar> eigenvalues;          // V_r of the fit, descending
  MatrixX<Scalar> loadings_bar;         // N x r
  MatrixX<Scalar> factors_bar;          // T x r, projected scale
  MatrixX<Scalar> residuals_projected;  // N x T
};

template <typename DerivedX, typename Scalar>
GcStateInput<Scalar> make_gc_state(const Eigen::MatrixBase<DerivedX>& x,
                                   const ConditionalFit<Scalar>& fit) {
  auto nfit = normalize_fit(fit);
  GcStateInput<Scalar> g;
  g.state = fit.state;
  g.bandwidth = fit.bandwidth;
  g.effective_size = fit.weights.effective_size;
  g.eigenvalues = fit.eigenvalues;
  const MatrixX<Scalar> xs = detail::fit_scale_panel(x, fit) *
                             fit.weights.values.cwiseSqrt().asDiagonal();
  g.residuals_projected =
      xs - nfit.loadings_bar * nfit.factors_bar.transpose();
  g.loadings_bar = std::move(nfit.loadings_bar);
  g.factors_bar = std::move(nfit.factors_bar);
  return g;
}

template <typename Scalar>
struct GcDiagnostics {
  std::array<std::array<MatrixX<Scalar>, 2>, 2> e_hat;  // E_{u,v}
  std::array<std::array<MatrixX<Scalar>, 2>, 2> x_hat;  // x_{l,l'}
  std::array<std::array<MatrixX<Scalar>, 2>, 2> z_hat;  // z_{p,w}
  std::array<MatrixX<Scalar>, 2> sigma_u;               // span-noise cov, both orientations
  VectorX<Scalar> xi;
  VectorX<Scalar> b;
  MatrixX<Scalar> d;
  MatrixX<Scalar> sigma_bb;
};

template <typename Scalar>
struct GcTestResult {
  Scalar rho_hat{};
  Eigen::Index n_factors{};
  Scalar bias{};       // -tr(Sigma_u), the O(1/N + 1/(T h)) correction
  Scalar variance{};   // 2 T h tr(Sigma_u^2)
  Scalar statistic{};  // sqrt(N T h) (rho - r - bias) / sqrt(variance)
  Scalar p_value{};    // one-sided; small values reject span equality
  bool clipped_covariance = false;  // diagnostic moment covariance needed PSD repair
};

// Span-equality test between the loadings at two states. Under equal spans
// the statistic is asymptotically standard normal; under differing spans it
// diverges to -infinity, so the one-sided p-value is Phi(statistic).
template <typename Scalar>
GcTestResult<Scalar> gc_test(const GcStateInput<Scalar>& s1,
                             const GcStateInput<Scalar>& s2,
                             const SparsitySets& sets,
                             GcDiagnostics<Scalar>* diagnostics = nullptr) {
  const Eigen::Index n = s1.loadings_bar.rows();
  const Eigen::Index t = s1.factors_bar.rows();
  const Eigen::Index r = s1.loadings_bar.cols();
  if (s2.loadings_bar.rows() != n || s2.factors_bar.rows() != t) {
    throw DimensionMismatch("the two states come from different panels");
  }
  if (s2.loadings_bar.cols() != r) {
    throw DimensionMismatch("the two states use different factor counts");
  }
  const Scalar h = s1.bandwidth;
  if (!(std::abs(double(h - s2.bandwidth)) <= 1e-12 * std::abs(double(h)))) {
    throw InvalidArgument("the two states use different bandwidths");
  }
  if (!std::isfinite(double(h))) {
    throw InvalidArgument("the span test requires kernel fits");
  }
  sets.cross.validate(n);
  sets.time.validate(t);

  const std::array<const GcStateInput<Scalar>*, 2> st = {&s1, &s2};

  // A noiseless panel has no sampling error to normalize by.
  for (int l = 0; l < 2; ++l) {
    const Scalar fitted = (st[l]->loadings_bar * st[l]->factors_bar.transpose()).norm();
    if (st[l]->residuals_projected.norm() <=
        Scalar(1e-10) * std::max(fitted, Scalar(1e-300))) {
      throw ZeroVariance("projected residuals vanish; the test statistic is undefined");
    }
  }

  // Loading Grams G(p,u) = Lb_p' Lb_u / N and eigenvalue inverses.
  std::array<std::array<MatrixX<Scalar>, 2>, 2> g;
  for (int p = 0; p < 2; ++p) {
    for (int u = 0; u < 2; ++u) {
      g[p][u] = st[p]->loadings_bar.transpose() * st[u]->loadings_bar / Scalar(n);
    }
  }
  std::array<MatrixX<Scalar>, 2> ginv;
  for (int l = 0; l < 2; ++l) {
    Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> eig(g[l][l]);
    if (!(eig.eigenvalues().minCoeff() >
          Scalar(1e-12) * eig.eigenvalues().maxCoeff())) {
      throw RankDeficient("normalized loading Gram is numerically singular");
    }
    ginv[l] = eig.eigenvectors() *
              eig.eigenvalues().cwiseInverse().asDiagonal() *
              eig.eigenvectors().transpose();
    if (!(st[l]->eigenvalues.minCoeff() > Scalar(0))) {
      throw SingularEigenvalue("fit has nonpositive eigenvalues");
    }
  }
  std::array<VectorX<Scalar>, 2> vinv;
  for (int l = 0; l < 2; ++l) vinv[l] = st[l]->eigenvalues.cwiseInverse();

  const MatrixX<Scalar>& g2 = g[0][1];
  const MatrixX<Scalar>& g3 = g[1][0];
  const MatrixX<Scalar>& g1i = ginv[0];
  const MatrixX<Scalar>& g4i = ginv[1];

  GcTestResult<Scalar> out;
  out.n_factors = r;
  out.rho_hat = (g1i * g2 * g4i * g3).trace();

  // E_{u,v} = (1/(N T(s_u) T(s_v))) sum_{(t1,t2)} Fb^u_t1 (Fb^v_t2)'
  //           * <eb^u_t1, eb^v_t2>.
  std::array<std::array<MatrixX<Scalar>, 2>, 2> e_hat;
  for (int u = 0; u < 2; ++u) {
    for (int v = 0; v < 2; ++v) {
      MatrixX<Scalar> acc = MatrixX<Scalar>::Zero(r, r);
      sets.time.for_each(t, [&](Eigen::Index a, Eigen::Index b) {
        const Scalar dot =
            st[u]->residuals_projected.col(a).dot(st[v]->residuals_projected.col(b));
        acc.noalias() += dot * (st[u]->factors_bar.row(a).transpose() *
                                st[v]->factors_bar.row(b));
      });
      e_hat[u][v] = acc / (Scalar(n) * st[u]->effective_size * st[v]->effective_size);
    }
  }

  // x_{u,v,p,w} = Vinv_p G(p,u) E_{u,v} G(v,w) Vinv_w.
  const auto x_term = [&](int u, int v, int p, int w) -> MatrixX<Scalar> {
    return vinv[p].asDiagonal() * g[p][u] * e_hat[u][v] * g[v][w] *
           vinv[w].asDiagonal();
  };
  std::array<std::array<MatrixX<Scalar>, 2>, 2> x_hat;
  for (int l = 0; l < 2; ++l) {
    for (int lp = 0; lp < 2; ++lp) {
      x_hat[l][lp] =
          x_term(l, lp, l, lp) + x_term(l, l, l, lp) + x_term(lp, lp, l, lp);
    }
  }

  // Span-misfit noise covariance. With P_l the projector onto the state-l
  // loading span, rho - r = -tr(U'U)/N exactly for U = (I - P_l) Lb_{l'},
  // whose rows are u_i = lb_{l',i} - G(l',l) lb_{l,i}; the plug-in covariance
  // of u_i combines the diagonal x quadruples S_{u,v} = x_{u,v,u,v}:
  //   Sigma_u = S_{l'l'} + R S_{ll} R' - R S_{ll'} - S_{l'l} R',  R = G(l',l).
  const auto span_noise_cov = [&](int l, int lp) -> MatrixX<Scalar> {
    const MatrixX<Scalar>& rot = g[lp][l];
    return detail::symmetrized<Scalar>(
        x_term(lp, lp, lp, lp) + rot * x_term(l, l, l, l) * rot.transpose() -
        rot * x_term(l, lp, l, lp) - x_term(lp, l, lp, l) * rot.transpose());
  };
  // Both orientations are averaged so the result is symmetric in (s1, s2).
  const MatrixX<Scalar> su_fwd = span_noise_cov(0, 1);
  const MatrixX<Scalar> su_rev = span_noise_cov(1, 0);

  // E[rho - r] = -tr(Sigma_u), and rho - r - bias is a centered quadratic
  // form in the span noise with variance 2 tr(Sigma_u^2) / (N^2 T h) --
  // hence 2 T h tr(Sigma_u^2) after the sqrt(N T h) scaling.
  out.bias = -(su_fwd.trace() + su_rev.trace()) / Scalar(2);
  out.variance =
      Scalar(t) * h * ((su_fwd * su_fwd).trace() + (su_rev * su_rev).trace());
  if (!(out.variance > Scalar(0))) {
    throw ZeroVariance("test variance estimate is zero");
  }
  out.statistic = std::sqrt(Scalar(n) * Scalar(t) * h) *
                  (out.rho_hat - Scalar(r) - out.bias) /
                  std::sqrt(out.variance);
  out.p_value = normal_cdf(out.statistic);
  if (diagnostics == nullptr) return out;

  // Everything below reports the linearized delta-method pieces (gradient,
  // bias blocks, Kronecker derivative, moment covariance) for inspection;
  // none of it feeds the statistic.
  diagnostics->e_hat = e_hat;
  diagnostics->x_hat = x_hat;
  diagnostics->sigma_u = {su_fwd, su_rev};

  // Gradient of the trace in the four Grams, stacked [G1; G2; G3; G4].
  VectorX<Scalar> xi(4 * r * r);
  xi << vec((-(g1i * g2 * g4i * g3 * g1i)).transpose().eval()),
      vec(g1i * g2 * g4i), vec(g4i * g3 * g1i),
      vec((-(g4i * g3 * g1i * g2 * g4i)).transpose().eval());

  // z_{p,w} = Vinv_p (1/(N^2 T(s_p))) sum_{(i,j)} lb_{p,i} <eb^p_i, eb^p_j> lb'_{w,j}.
  std::array<std::array<MatrixX<Scalar>, 2>, 2> z_hat;
  for (int p = 0; p < 2; ++p) {
    for (int w = 0; w < 2; ++w) {
      MatrixX<Scalar> acc = MatrixX<Scalar>::Zero(r, r);
      sets.cross.for_each(n, [&](Eigen::Index i, Eigen::Index j) {
        const Scalar dot =
            st[p]->residuals_projected.row(i).dot(st[p]->residuals_projected.row(j));
        acc.noalias() += dot * (st[p]->loadings_bar.row(i).transpose() *
                                st[w]->loadings_bar.row(j));
      });
      z_hat[p][w] = vinv[p].asDiagonal() * acc /
                    (Scalar(n) * Scalar(n) * st[p]->effective_size);
    }
  }

  VectorX<Scalar> b(4 * r * r);
  for (int l = 0; l < 2; ++l) {
    for (int lp = 0; lp < 2; ++lp) {
      b.segment((2 * l + lp) * r * r, r * r) =
          vec(x_hat[l][lp] + z_hat[l][lp] + z_hat[lp][l]);
    }
  }

  // Derivative matrix D mapping the moment blocks [mu_11; mu_12; mu_21; mu_22]
  // into the Gram blocks [G1; G2; G3; G4].
  const MatrixX<Scalar> identity = MatrixX<Scalar>::Identity(r, r);
  const auto m_blocks = [&](int l, int lp) {
    // For block (l,l'): the four Kronecker terms multiply mu_{l,l'}, mu_{l,l},
    // mu_{l',l} and mu_{l',l'} respectively.
    MatrixX<Scalar> m1 = vinv[l].asDiagonal() * g[l][l];
    MatrixX<Scalar> m3 = MatrixX<Scalar>(vinv[l].asDiagonal());
    MatrixX<Scalar> m4 = g[l][lp];
    MatrixX<Scalar> m6 = g[lp][lp];
    MatrixX<Scalar> m7 = g[l][lp];
    MatrixX<Scalar> m8 = MatrixX<Scalar>(vinv[lp].asDiagonal());
    struct Terms {
      MatrixX<Scalar> a, bt, c, dk;
    } terms;
    terms.a = kron<Scalar>(identity, m1);                       // mu_{l,l'}
    terms.bt = kron<Scalar>(m3, m4.transpose());                // mu_{l,l}
    terms.c = kron<Scalar>(identity, m6.transpose());           // mu_{l',l}
    terms.dk = kron<Scalar>(m8.transpose(), m7);                // mu_{l',l'}
    return terms;
  };

  const Eigen::Index rr = r * r;
  MatrixX<Scalar> d = MatrixX<Scalar>::Zero(4 * rr, 4 * rr);
  {
    const auto t11 = m_blocks(0, 0);
    d.block(0, 0, rr, rr) = t11.a + t11.bt + t11.c + t11.dk;
    const auto t12 = m_blocks(0, 1);
    d.block(rr, 0 * rr, rr, rr) = t12.bt;
    d.block(rr, 1 * rr, rr, rr) = t12.a;
    d.block(rr, 2 * rr, rr, rr) = t12.c;
    d.block(rr, 3 * rr, rr, rr) = t12.dk;
    const auto t21 = m_blocks(1, 0);
    d.block(2 * rr, 0 * rr, rr, rr) = t21.dk;
    d.block(2 * rr, 1 * rr, rr, rr) = t21.c;
    d.block(2 * rr, 2 * rr, rr, rr) = t21.a;
    d.block(2 * rr, 3 * rr, rr, rr) = t21.bt;
    const auto t22 = m_blocks(1, 1);
    d.block(3 * rr, 3 * rr, rr, rr) = t22.a + t22.bt + t22.c + t22.dk;
  }

  // Sigma_BB: scaled covariance of the stacked moment blocks. Block (u,v)
  // of the per-observation vector is vec(Fb^u_t lb_{v,i}') eb^u_it / T(s_u).
  MatrixX<Scalar> sigma = MatrixX<Scalar>::Zero(4 * rr, 4 * rr);
  {
    VectorX<Scalar> ga(4 * rr), gb(4 * rr);
    const auto fill = [&](VectorX<Scalar>& dst, Eigen::Index i, Eigen::Index tt) {
      for (int u = 0; u < 2; ++u) {
        const Scalar e_scaled =
            st[u]->residuals_projected(i, tt) / st[u]->effective_size;
        for (int v = 0; v < 2; ++v) {
          auto block = dst.segment((2 * u + v) * rr, rr);
          // vec of the rank-one matrix Fb^u_t lb_{v,i}' (column-major).
          for (Eigen::Index m = 0; m < r; ++m) {
            block.segment(m * r, r) = st[u]->factors_bar.row(tt).transpose() *
                                      (st[v]->loadings_bar(i, m) * e_scaled);
          }
        }
      }
    };
    sets.for_each_joint(n, t,
                        [&](Eigen::Index i, Eigen::Index a, Eigen::Index j,
                            Eigen::Index bb) {
                          fill(ga, i, a);
                          fill(gb, j, bb);
                          sigma.noalias() += ga * gb.transpose();
                        });
    sigma *= Scalar(t) * h / Scalar(n);
    sigma = detail::symmetrized<Scalar>(sigma);

    Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> eig(sigma);
    const Scalar tol = Scalar(-1e-10) * std::abs(sigma.trace());
    if ((eig.eigenvalues().array() < tol).any()) {
      out.clipped_covariance = true;
    }
    if ((eig.eigenvalues().array() < Scalar(0)).any()) {
      sigma = eig.eigenvectors() *
              eig.eigenvalues().cwiseMax(Scalar(0)).asDiagonal() *
              eig.eigenvectors().transpose();
    }
  }

  diagnostics->z_hat = z_hat;
  diagnostics->xi = xi;
  diagnostics->b = b;
  diagnostics->d = d;
  diagnostics->sigma_bb = sigma;
  return out;
}

// Span-equality tests over all pairs of grid states. Per-point fit failures
// and per-pair test failures are recorded, not thrown.
template <typename Scalar>
struct PairwiseTestGrid {
  VectorX<Scalar> states;
  MatrixX<Scalar> statistic;  // symmetric, NaN diagonal
  MatrixX<Scalar> p_value;
  MatrixX<Scalar> rho_hat;
  std::vector<std::string> errors;  // flattened row-major G x G, "" = ok
};

template <typename DerivedX, typename DerivedS, typename DerivedG>
PairwiseTestGrid<typename DerivedX::Scalar> pairwise_test_grid(
    const Eigen::MatrixBase<DerivedX>& x, const Eigen::DenseBase<DerivedS>& states,
    const Eigen::DenseBase<DerivedG>& grid, typename DerivedX::Scalar h,
    Eigen::Index r, KernelKind kind = KernelKind::gaussian,
    const SparsitySets& sets = SparsitySets::defaults(),
    const FitOptions& opts = {}) {
  using Scalar = typename DerivedX::Scalar;
  const Eigen::Index g = grid.size();
  if (g < 2) throw InvalidArgument("pairwise test grid needs at least two states");

  PairwiseTestGrid<Scalar> out;
  out.states = grid;
  const Scalar nan = std::numeric_limits<Scalar>::quiet_NaN();
  out.statistic.setConstant(g, g, nan);
  out.p_value.setConstant(g, g, nan);
  out.rho_hat.setConstant(g, g, nan);
  out.errors.assign(std::size_t(g * g), "");

  const std::size_t n_points = std::size_t(g);
  std::vector<std::optional<GcStateInput<Scalar>>> prepared(n_points);
  std::vector<std::string> fit_errors(n_points, "");
  for (Eigen::Index k = 0; k < g; ++k) {
    try {
      auto fit = fit_conditional(x, states, Scalar(grid.derived()(k)), h, r, kind, opts);
      prepared[std::size_t(k)] = make_gc_state(x, fit);
    } catch (const Error& e) {
      if (e.error_class() != ErrorClass::numerical) throw;
      fit_errors[std::size_t(k)] = std::string(e.name()) + ": " + e.what();
    }
  }

  for (Eigen::Index a = 0; a < g; ++a) {
    for (Eigen::Index b = a + 1; b < g; ++b) {
      std::string message;
      if (!fit_errors[std::size_t(a)].empty()) {
        message = "state fit failed: " + fit_errors[std::size_t(a)];
      } else if (!fit_errors[std::size_t(b)].empty()) {
        message = "state fit failed: " + fit_errors[std::size_t(b)];
      } else {
        try {
          const auto res =
              gc_test(*prepared[std::size_t(a)], *prepared[std::size_t(b)], sets);
          out.statistic(a, b) = out.statistic(b, a) = res.statistic;
          out.p_value(a, b) = out.p_value(b, a) = res.p_value;
          out.rho_hat(a, b) = out.rho_hat(b, a) = res.rho_hat;
        } catch (const Error& e) {
          if (e.error_class() != ErrorClass::numerical) throw;
          message = std::string(e.name()) + ": " + e.what();
        }
      }
      out.errors[std::size_t(a * g + b)] = message;
      out.errors[std::size_t(b * g + a)] = message;
    }
  }
  return out;
}

}  // namespace svfm
