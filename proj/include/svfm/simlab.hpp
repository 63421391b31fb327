#pragma once

#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "svfm/estimator.hpp"
#include "svfm/evalkit.hpp"
#include "svfm/inference.hpp"
#include "svfm/parallel.hpp"
#include "svfm/rng.hpp"

namespace svfm {

using Eigen::Index;
using MatrixXd = Eigen::MatrixXd;
using VectorXd = Eigen::VectorXd;

// Ornstein-Uhlenbeck parameters: dS = theta (mu - S) dt + sigma dW.
struct OuParams {
  double theta = 1.0;
  double mu = 0.2;
  double sigma = 1.0;
};

// Exact discretization at unit time steps, initialized at the stationary
// distribution N(mu, sigma^2 / (2 theta)).
inline VectorXd simulate_ou_state(Index t, const OuParams& p, CounterRng& rng) {
  if (t < 1) throw InvalidArgument("state path length must be positive");
  if (!(p.theta > 0) || !(p.sigma >= 0)) {
    throw ConfigError("OU parameters require theta > 0 and sigma >= 0");
  }
  const double decay = std::exp(-p.theta);
  const double stationary_sd = p.sigma / std::sqrt(2.0 * p.theta);
  const double step_sd =
      p.sigma * std::sqrt((1.0 - std::exp(-2.0 * p.theta)) / (2.0 * p.theta));

  VectorXd s(t);
  s(0) = p.mu + stationary_sd * rng.normal();
  for (Index i = 1; i < t; ++i) {
    s(i) = p.mu + decay * (s(i - 1) - p.mu) + step_sd * rng.normal();
  }
  return s;
}

inline VectorXd simulate_ou_state(Index t, const OuParams& p,
                                  std::uint64_t seed, std::uint64_t stream = 0) {
  CounterRng rng(seed, stream);
  return simulate_ou_state(t, p, rng);
}

enum class StateModel { ou, uniform01, two_state_ou };
enum class LoadingModel { cubic, constant, break_linear, break_quadratic, exp_two_state };
enum class ErrorModel { iid_normal, heteroskedastic, cross_dependent };

// Synthetic panel generator configuration. The default reproduces the
// baseline one-factor design: OU state, cubic state-varying loadings with
// standard normal coefficients, iid standard normal errors.
struct DgpConfig {
  Index n = 100;
  Index t = 500;
  Index n_factors = 1;

  StateModel state_model = StateModel::ou;
  OuParams ou;

  LoadingModel loading_model = LoadingModel::cubic;
  double break_point = 0.3;

  ErrorModel error_model = ErrorModel::iid_normal;
  double hetero_min = 0.5;
  double hetero_max = 1.5;
  double cross_corr = 0.5;

  // Observed state = true state + state_noise * N(0,1).
  double state_noise = 0.0;
  // Multiplies the error term; zero gives a noiseless panel.
  double noise_scale = 1.0;

  std::uint64_t seed = 0;

  void validate() const {
    if (n < 1 || t < 1) throw ConfigError("panel dimensions must be positive");
    if (n_factors < 1 || n_factors > std::min(n, t)) {
      throw ConfigError("factor count out of range");
    }
    if (hetero_min <= 0 || hetero_max < hetero_min) {
      throw ConfigError("heteroskedasticity bounds must satisfy 0 < min <= max");
    }
    if (std::abs(cross_corr) >= 1) {
      throw ConfigError("cross-sectional correlation must lie in (-1, 1)");
    }
    if (state_noise < 0 || noise_scale < 0) {
      throw ConfigError("noise magnitudes must be nonnegative");
    }
    if (loading_model == LoadingModel::exp_two_state &&
        state_model != StateModel::two_state_ou) {
      throw ConfigError("exp_two_state loadings require the two-state model");
    }
    if (state_model == StateModel::two_state_ou &&
        loading_model != LoadingModel::exp_two_state) {
      throw ConfigError("the two-state model is only used with exp_two_state loadings");
    }
  }
};

// One generated panel together with everything needed to evaluate the
// estimators against the truth.
struct SimPanel {
  MatrixXd x;               // N x T observations
  VectorXd state_true;      // T
  VectorXd state_observed;  // state_true + noise
  VectorXd state_second;    // second state path (two-state model), else empty
  MatrixXd factors;         // T x r true factors
  MatrixXd common;          // N x T true common component
  MatrixXd errors;          // N x T error term (already scaled)

  LoadingModel loading_model = LoadingModel::cubic;
  double break_point = 0.3;
  std::vector<MatrixXd> coeffs;  // loading coefficient matrices, N x r each

  // True loading matrix at a state value (single-state models).
  MatrixXd loading_at(double s) const {
    switch (loading_model) {
      case LoadingModel::cubic:
        return coeffs[0] + 0.5 * s * coeffs[1] + 0.25 * s * s * coeffs[2] +
               0.125 * s * s * s * coeffs[3];
      case LoadingModel::constant:
        return coeffs[0];
      case LoadingModel::break_linear:
        return s <= break_point
                   ? MatrixXd(coeffs[0] + (s - break_point) * coeffs[1])
                   : coeffs[0];
      case LoadingModel::break_quadratic:
        return s <= break_point
                   ? MatrixXd(coeffs[0] + (s - break_point) * coeffs[1] +
                              (s - break_point) * (s - break_point) * coeffs[2])
                   : coeffs[0];
      case LoadingModel::exp_two_state:
        throw InvalidArgument(
            "two-state loadings need both state values; use loading_at(s1, s2)");
    }
    throw InvalidArgument("unknown loading model");
  }

  MatrixXd loading_at(double s1, double s2) const {
    if (loading_model != LoadingModel::exp_two_state) {
      throw InvalidArgument("two-argument loadings exist only for exp_two_state");
    }
    return (coeffs[0] * s1 + coeffs[1] * s2).array().exp().matrix();
  }
};

namespace detail {

// Fixed substream layout per replication so studies can redraw selected
// pieces only. Components 0..2 (state, coefficients, factors) are the
// panel's structure; 3..4 (errors, observation noise) are its noise.
inline CounterRng component_rng(std::uint64_t seed, std::uint64_t rep,
                                unsigned component, bool fix_structure) {
  const bool structural = component <= 2;
  const std::uint64_t effective_rep = (fix_structure && structural) ? 0 : rep;
  return CounterRng(seed, effective_rep * 5 + component);
}

inline MatrixXd normal_matrix(Index rows, Index cols, CounterRng& rng) {
  MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  }
  return m;
}

}  // namespace detail

// Generates one synthetic panel. rep selects the replication substream;
// fix_structure holds the state path, loading coefficients and factors at
// their rep-0 draws so only the errors (and observation noise) vary.
inline SimPanel generate_panel(const DgpConfig& cfg, std::uint64_t rep = 0,
                               bool fix_structure = false) {
  cfg.validate();
  SimPanel panel;
  panel.loading_model = cfg.loading_model;
  panel.break_point = cfg.break_point;

  // State path(s).
  {
    CounterRng rng = detail::component_rng(cfg.seed, rep, 0, fix_structure);
    switch (cfg.state_model) {
      case StateModel::ou:
        panel.state_true = simulate_ou_state(cfg.t, cfg.ou, rng);
        break;
      case StateModel::uniform01: {
        panel.state_true.resize(cfg.t);
        for (Index i = 0; i < cfg.t; ++i) panel.state_true(i) = rng.uniform01();
        break;
      }
      case StateModel::two_state_ou:
        panel.state_true = simulate_ou_state(cfg.t, cfg.ou, rng);
        panel.state_second = simulate_ou_state(cfg.t, cfg.ou, rng);
        break;
    }
  }

  // Loading coefficients.
  {
    CounterRng rng = detail::component_rng(cfg.seed, rep, 1, fix_structure);
    std::size_t n_coeffs = 0;
    switch (cfg.loading_model) {
      case LoadingModel::cubic:
        n_coeffs = 4;
        break;
      case LoadingModel::constant:
        n_coeffs = 1;
        break;
      case LoadingModel::break_linear:
      case LoadingModel::exp_two_state:
        n_coeffs = 2;
        break;
      case LoadingModel::break_quadratic:
        n_coeffs = 3;
        break;
    }
    for (std::size_t k = 0; k < n_coeffs; ++k) {
      panel.coeffs.push_back(detail::normal_matrix(cfg.n, cfg.n_factors, rng));
    }
  }

  // Factors.
  {
    CounterRng rng = detail::component_rng(cfg.seed, rep, 2, fix_structure);
    panel.factors = detail::normal_matrix(cfg.t, cfg.n_factors, rng);
  }

  // Errors.
  {
    CounterRng rng = detail::component_rng(cfg.seed, rep, 3, fix_structure);
    panel.errors = detail::normal_matrix(cfg.n, cfg.t, rng);
    switch (cfg.error_model) {
      case ErrorModel::iid_normal:
        break;
      case ErrorModel::heteroskedastic: {
        VectorXd sd(cfg.n);
        for (Index i = 0; i < cfg.n; ++i) {
          sd(i) = rng.uniform(cfg.hetero_min, cfg.hetero_max);
        }
        panel.errors = sd.asDiagonal() * panel.errors;
        break;
      }
      case ErrorModel::cross_dependent: {
        // AR(1) recursion across series gives Corr(e_i, e_j) = rho^|i-j|
        // with unit marginal variances.
        const double rho = cfg.cross_corr;
        const double innov = std::sqrt(1.0 - rho * rho);
        for (Index t = 0; t < cfg.t; ++t) {
          for (Index i = 1; i < cfg.n; ++i) {
            panel.errors(i, t) =
                rho * panel.errors(i - 1, t) + innov * panel.errors(i, t);
          }
        }
        break;
      }
    }
    panel.errors *= cfg.noise_scale;
  }

  // Observation noise on the state.
  {
    panel.state_observed = panel.state_true;
    if (cfg.state_noise > 0) {
      CounterRng rng = detail::component_rng(cfg.seed, rep, 4, fix_structure);
      for (Index i = 0; i < cfg.t; ++i) {
        panel.state_observed(i) += cfg.state_noise * rng.normal();
      }
    }
  }

  // Assemble X = common + errors with loadings at the true state.
  panel.common.resize(cfg.n, cfg.t);
  for (Index t = 0; t < cfg.t; ++t) {
    const MatrixXd lam =
        cfg.loading_model == LoadingModel::exp_two_state
            ? panel.loading_at(panel.state_true(t), panel.state_second(t))
            : panel.loading_at(panel.state_true(t));
    panel.common.col(t) = lam * panel.factors.row(t).transpose();
  }
  panel.x = panel.common + panel.errors;
  return panel;
}

// Rotation matrix H linking the estimate to the truth at the fit's state:
// H = (Lambda(s)' Lambda(s) / N) ((F^s)' F^s_hat / T(s)) V^-1, with
// F^s_t = sqrt(w_t) F_t. The estimate satisfies F_t_hat ~ H' F_t and
// Lambda_hat(s) ~ Lambda(s) (H^-1)' asymptotically.
inline MatrixXd rotation_h(const SimPanel& panel, const ConditionalFit<double>& fit) {
  if (panel.loading_model == LoadingModel::exp_two_state) {
    throw InvalidArgument("rotation matrix is defined for single-state loadings");
  }
  if (!(fit.eigenvalues.minCoeff() > 0)) {
    throw SingularEigenvalue("fit has nonpositive eigenvalues");
  }
  const MatrixXd lam = panel.loading_at(fit.state);
  const Index n = lam.rows();
  const MatrixXd gram = lam.transpose() * lam / double(n);
  const MatrixXd cross = panel.factors.transpose() *
                         fit.weights.values.cwiseSqrt().asDiagonal() *
                         fit.projected_factors / fit.weights.effective_size;
  return gram * cross * fit.eigenvalues.cwiseInverse().asDiagonal();
}

// ---------------------------------------------------------------------------
// Monte Carlo studies.

enum class DistributionTarget { loading, factor, common, gc_null };

struct DistributionStudyConfig {
  DgpConfig dgp;
  double target_state = 0.5;
  double second_state = std::numeric_limits<double>::quiet_NaN();  // gc_null
  double bandwidth = 0.3;
  KernelKind kind = KernelKind::gaussian;
  SparsitySets sets = SparsitySets::defaults();
  FitOptions fit;
  int n_reps = 1000;
  unsigned n_threads = 0;
};

struct DistributionStudyResult {
  std::vector<double> sample;  // standardized values, pooled across reps
  double mean{};
  double variance{};
  double ks_distance{};
  int n_reps{};
  int n_failed{};
  std::vector<std::string> failures;  // first few failure messages
};

namespace detail {

inline Index closest_valid_time(const VectorXd& states,
                                const std::vector<Index>& valid, double s) {
  if (valid.empty()) throw EffectiveSampleTooSmall("no valid periods near the target state");
  Index best = valid.front();
  for (Index t : valid) {
    if (std::abs(states(t) - s) < std::abs(states(best) - s)) best = t;
  }
  return best;
}

}  // namespace detail

// Samples the standardized estimation errors of one estimator family across
// replications, for comparison with the standard normal limit.
inline DistributionStudyResult mc_distribution_study(
    const DistributionStudyConfig& cfg, DistributionTarget target) {
  if (!(cfg.dgp.noise_scale > 0)) {
    throw ZeroVariance(
        "noiseless panels have degenerate standardized errors; the study is undefined");
  }
  if (target == DistributionTarget::gc_null &&
      !std::isfinite(cfg.second_state)) {
    throw ConfigError("gc_null study needs a second target state");
  }
  if (cfg.n_reps < 1) throw ConfigError("replication count must be positive");

  const bool fix_structure = target == DistributionTarget::gc_null;
  std::vector<std::vector<double>> slots(std::size_t(cfg.n_reps));
  std::vector<std::string> failures(std::size_t(cfg.n_reps));

  parallel_for(
      std::size_t(cfg.n_reps),
      [&](std::size_t rep) {
        try {
          const SimPanel panel = generate_panel(cfg.dgp, rep, fix_structure);
          const auto fit = fit_conditional(
              panel.x, panel.state_observed, cfg.target_state, cfg.bandwidth,
              cfg.dgp.n_factors, cfg.kind, cfg.fit);
          std::vector<double>& out = slots[rep];

          switch (target) {
            case DistributionTarget::loading: {
              // Rotated truth: the loading regression is linear in the panel
              // given the fitted factor basis, so its systematic part is the
              // same regression applied to the noiseless panel,
              // C^s F_hat^s / T(s). This equals the H-rotated loading for
              // state-constant loadings and otherwise also absorbs the
              // kernel smoothing bias (the estimand at bandwidth h).
              const MatrixXd target_lam =
                  panel.common * fit.weights.values.cwiseSqrt().asDiagonal() *
                  fit.projected_factors / fit.weights.effective_size;
              const auto cc = common_components(panel.x, fit);
              const double th = double(cfg.dgp.t) * cfg.bandwidth;
              for (Index i = 0; i < cfg.dgp.n; ++i) {
                const auto theta =
                    estimate_loading_cov(fit, cc.residuals_projected, i, cfg.sets);
                for (Index k = 0; k < cfg.dgp.n_factors; ++k) {
                  const double sd = std::sqrt(theta.theta_hat(k, k));
                  if (!(sd > 0)) throw ZeroVariance("zero loading variance estimate");
                  out.push_back(std::sqrt(th) *
                                (fit.loadings(i, k) - target_lam(i, k)) / sd);
                }
              }
              break;
            }
            case DistributionTarget::factor: {
              const MatrixXd h = rotation_h(panel, fit);
              const auto unproj = unprojected_factors(fit);
              const Index t_star = detail::closest_valid_time(
                  panel.state_observed, unproj.valid_times, cfg.target_state);
              const auto cc = common_components(panel.x, fit);
              const auto pi =
                  estimate_factor_cov(fit, cc.residuals, t_star, cfg.sets);
              const VectorXd target_f =
                  h.transpose() * panel.factors.row(t_star).transpose();
              for (Index k = 0; k < cfg.dgp.n_factors; ++k) {
                const double sd = std::sqrt(pi.pi_hat(k, k));
                if (!(sd > 0)) throw ZeroVariance("zero factor variance estimate");
                out.push_back(std::sqrt(double(cfg.dgp.n)) *
                              (unproj.factors(t_star, k) - target_f(k)) / sd);
              }
              break;
            }
            case DistributionTarget::common: {
              const auto cc = common_components(panel.x, fit);
              const auto unproj = unprojected_factors(fit);
              const Index t_star = detail::closest_valid_time(
                  panel.state_observed, unproj.valid_times, cfg.target_state);
              const MatrixXd lam_true = panel.loading_at(cfg.target_state);
              for (Index i = 0; i < cfg.dgp.n; ++i) {
                const double c_true =
                    lam_true.row(i).dot(panel.factors.row(t_star));
                const auto se =
                    estimate_common_se(fit, cc, i, t_star, cfg.sets);
                if (!(se.se > 0)) throw ZeroVariance("zero common-component variance estimate");
                out.push_back((cc.common(i, t_star) - c_true) / se.se);
              }
              break;
            }
            case DistributionTarget::gc_null: {
              const auto fit2 = fit_conditional(
                  panel.x, panel.state_observed, cfg.second_state, cfg.bandwidth,
                  cfg.dgp.n_factors, cfg.kind, cfg.fit);
              const auto g1 = make_gc_state(panel.x, fit);
              const auto g2 = make_gc_state(panel.x, fit2);
              out.push_back(gc_test(g1, g2, cfg.sets).statistic);
              break;
            }
          }
        } catch (const Error& e) {
          if (e.error_class() != ErrorClass::numerical) throw;
          failures[rep] = std::string(e.name()) + ": " + e.what();
        }
      },
      cfg.n_threads);

  DistributionStudyResult result;
  result.n_reps = cfg.n_reps;
  for (std::size_t rep = 0; rep < slots.size(); ++rep) {
    if (!failures[rep].empty()) {
      ++result.n_failed;
      if (result.failures.size() < 5) result.failures.push_back(failures[rep]);
      continue;
    }
    result.sample.insert(result.sample.end(), slots[rep].begin(), slots[rep].end());
  }
  if (result.sample.size() < 2) {
    throw ZeroVariance("too few successful replications to summarize");
  }
  const auto summary = summarize(result.sample);
  result.mean = summary.mean;
  result.variance = summary.variance;
  result.ks_distance = ks_distance_to_normal(result.sample);
  return result;
}

struct PowerStudyConfig {
  DgpConfig dgp;  // state/loading models define the alternative
  std::vector<std::pair<double, double>> pairs;
  std::vector<std::pair<Index, Index>> sizes;  // (N, T)
  double bandwidth = 0.3;
  KernelKind kind = KernelKind::gaussian;
  SparsitySets sets = SparsitySets::defaults();
  FitOptions fit;
  int n_reps = 500;
  double critical_value = -1.65;  // one-sided 5% normal quantile
  unsigned n_threads = 0;
};

struct PowerStudyResult {
  std::vector<std::pair<Index, Index>> sizes;
  std::vector<std::pair<double, double>> pairs;
  // acceptance(a, b): share of replications at size a whose statistic for
  // pair b stayed above the critical value.
  MatrixXd acceptance;
  MatrixXd n_failed;
};

// Acceptance rates of the span-equality test across panel sizes and state
// pairs. Pairs on the flat side of the loading function measure size; pairs
// straddling a break measure power (low acceptance = break detected).
inline PowerStudyResult mc_power_study(const PowerStudyConfig& cfg) {
  if (cfg.pairs.empty() || cfg.sizes.empty()) {
    throw ConfigError("power study needs at least one pair and one size");
  }
  if (cfg.n_reps < 1) throw ConfigError("replication count must be positive");

  // Fit each distinct state once per replication.
  std::vector<double> grid;
  for (auto [a, b] : cfg.pairs) {
    for (double s : {a, b}) {
      if (std::find(grid.begin(), grid.end(), s) == grid.end()) grid.push_back(s);
    }
  }

  PowerStudyResult result;
  result.sizes = cfg.sizes;
  result.pairs = cfg.pairs;
  result.acceptance.setZero(Index(cfg.sizes.size()), Index(cfg.pairs.size()));
  result.n_failed.setZero(Index(cfg.sizes.size()), Index(cfg.pairs.size()));

  for (std::size_t a = 0; a < cfg.sizes.size(); ++a) {
    DgpConfig dgp = cfg.dgp;
    dgp.n = cfg.sizes[a].first;
    dgp.t = cfg.sizes[a].second;

    MatrixXd accept = MatrixXd::Zero(Index(cfg.n_reps), Index(cfg.pairs.size()));
    MatrixXd failed = MatrixXd::Zero(Index(cfg.n_reps), Index(cfg.pairs.size()));

    parallel_for(
        std::size_t(cfg.n_reps),
        [&](std::size_t rep) {
          const SimPanel panel = generate_panel(dgp, rep);
          std::vector<std::optional<GcStateInput<double>>> prepared(grid.size());
          for (std::size_t k = 0; k < grid.size(); ++k) {
            try {
              const auto fit = fit_conditional(
                  panel.x, panel.state_observed, grid[k], cfg.bandwidth,
                  dgp.n_factors, cfg.kind, cfg.fit);
              prepared[k] = make_gc_state(panel.x, fit);
            } catch (const Error& e) {
              if (e.error_class() != ErrorClass::numerical) throw;
            }
          }
          for (std::size_t b = 0; b < cfg.pairs.size(); ++b) {
            const auto ia = std::find(grid.begin(), grid.end(), cfg.pairs[b].first) -
                            grid.begin();
            const auto ib = std::find(grid.begin(), grid.end(), cfg.pairs[b].second) -
                            grid.begin();
            if (!prepared[std::size_t(ia)] || !prepared[std::size_t(ib)]) {
              failed(Index(rep), Index(b)) = 1;
              continue;
            }
            try {
              const auto res = gc_test(*prepared[std::size_t(ia)],
                                       *prepared[std::size_t(ib)], cfg.sets);
              accept(Index(rep), Index(b)) =
                  res.statistic >= cfg.critical_value ? 1 : 0;
            } catch (const Error& e) {
              if (e.error_class() != ErrorClass::numerical) throw;
              failed(Index(rep), Index(b)) = 1;
            }
          }
        },
        cfg.n_threads);

    for (std::size_t b = 0; b < cfg.pairs.size(); ++b) {
      const double bad = failed.col(Index(b)).sum();
      const double good = double(cfg.n_reps) - bad;
      result.n_failed(Index(a), Index(b)) = bad;
      result.acceptance(Index(a), Index(b)) =
          good > 0 ? accept.col(Index(b)).sum() / good
                   : std::numeric_limits<double>::quiet_NaN();
    }
  }
  return result;
}

struct RsqStudyConfig {
  DgpConfig dgp;
  double bandwidth = 0.3;
  KernelKind kind = KernelKind::gaussian;
  FitOptions fit;
  int n_reps = 20;
  unsigned n_threads = 0;
};

// In-sample and out-of-sample fit quality of the state-conditional model
// under increasingly noisy state observation, against the constant-loading
// benchmark. Out-of-sample trains on the first half of the sample.
struct NoisyStateRsqResult {
  std::vector<std::string> labels;
  std::vector<double> noise_levels;  // NaN entry = constant-loading row
  // Columns: in-sample R^2 vs panel, vs truth; out-of-sample vs panel, vs truth.
  MatrixXd values;
};

inline NoisyStateRsqResult mc_rsq_noisy_state_study(
    const RsqStudyConfig& cfg, std::vector<double> noise_levels = {0.0, 0.1, 0.5, 1.0, 2.0},
    bool include_constant = true) {
  if (cfg.n_reps < 1) throw ConfigError("replication count must be positive");
  const std::size_t n_rows = noise_levels.size() + (include_constant ? 1 : 0);

  std::vector<MatrixXd> per_rep(std::size_t(cfg.n_reps));
  parallel_for(
      std::size_t(cfg.n_reps),
      [&](std::size_t rep) {
        DgpConfig dgp = cfg.dgp;
        dgp.state_noise = 0.0;
        const SimPanel panel = generate_panel(dgp, rep);
        // One shared observation-noise draw, scaled per level so the rows
        // differ only in the noise magnitude.
        VectorXd obs_noise(dgp.t);
        {
          CounterRng rng = detail::component_rng(dgp.seed, rep, 4, false);
          for (Index i = 0; i < dgp.t; ++i) obs_noise(i) = rng.normal();
        }
        const Index split = dgp.t / 2;
        const MatrixXd x_train = panel.x.leftCols(split);
        const MatrixXd x_test = panel.x.rightCols(dgp.t - split);
        const MatrixXd c_test = panel.common.rightCols(dgp.t - split);

        MatrixXd rows(Index(n_rows), 4);
        for (std::size_t lev = 0; lev < noise_levels.size(); ++lev) {
          const VectorXd observed =
              panel.state_true + noise_levels[lev] * obs_noise;
          const auto in_proj = common_by_state_projection<double>(
              panel.x, observed, panel.x, observed, cfg.bandwidth,
              dgp.n_factors, cfg.kind, cfg.fit);
          const auto in_rsq = rsq<double>(panel.x, in_proj.common, &panel.common);

          const VectorXd s_train = observed.head(split);
          const VectorXd s_test = observed.tail(dgp.t - split);
          const auto oos = oos_common_component<double>(
              x_train, s_train, x_test, s_test, cfg.bandwidth, dgp.n_factors,
              cfg.kind, cfg.fit);
          const auto oos_rsq = rsq<double>(x_test, oos.common, &c_test);

          rows(Index(lev), 0) = in_rsq.vs_panel;
          rows(Index(lev), 1) = *in_rsq.vs_truth;
          rows(Index(lev), 2) = oos_rsq.vs_panel;
          rows(Index(lev), 3) = *oos_rsq.vs_truth;
        }
        if (include_constant) {
          const auto fit = fit_constant(panel.x, dgp.n_factors, cfg.fit);
          const auto cc = common_components(panel.x, fit);
          const auto in_rsq = rsq<double>(panel.x, cc.common, &panel.common);
          const auto oos =
              constant_projection<double>(x_train, x_test, dgp.n_factors, cfg.fit);
          const auto oos_rsq = rsq<double>(x_test, oos.common, &c_test);
          rows(Index(n_rows) - 1, 0) = in_rsq.vs_panel;
          rows(Index(n_rows) - 1, 1) = *in_rsq.vs_truth;
          rows(Index(n_rows) - 1, 2) = oos_rsq.vs_panel;
          rows(Index(n_rows) - 1, 3) = *oos_rsq.vs_truth;
        }
        per_rep[rep] = rows;
      },
      cfg.n_threads);

  NoisyStateRsqResult result;
  result.values = MatrixXd::Zero(Index(n_rows), 4);
  for (const MatrixXd& rows : per_rep) result.values += rows;
  result.values /= double(cfg.n_reps);
  for (double lev : noise_levels) {
    result.noise_levels.push_back(lev);
    result.labels.push_back("state_noise=" + std::to_string(lev));
  }
  if (include_constant) {
    result.noise_levels.push_back(std::numeric_limits<double>::quiet_NaN());
    result.labels.push_back("constant_loading");
  }
  return result;
}

// Out-of-sample fit quality as a function of the number of fitted factors,
// for the state-conditional model (conditioning on the first state only)
// against the constant-loading benchmark. Used with the two-state DGP whose
// true factor count is 1.
struct FactorCountRsqResult {
  // index k-1 holds results for k fitted factors.
  // Columns: state model R^2 vs panel, vs truth; constant model vs panel, vs truth.
  MatrixXd mean_values;                 // max_r x 4
  std::vector<MatrixXd> per_rep;        // each max_r x 4
};

inline FactorCountRsqResult mc_rsq_factor_count_study(const RsqStudyConfig& cfg,
                                                      Index max_r = 8) {
  if (cfg.n_reps < 1) throw ConfigError("replication count must be positive");
  if (max_r < 1) throw ConfigError("factor count range must be positive");

  FactorCountRsqResult result;
  result.per_rep.assign(std::size_t(cfg.n_reps), MatrixXd());

  parallel_for(
      std::size_t(cfg.n_reps),
      [&](std::size_t rep) {
        const SimPanel panel = generate_panel(cfg.dgp, rep);
        const Index split = cfg.dgp.t / 2;
        const MatrixXd x_train = panel.x.leftCols(split);
        const MatrixXd x_test = panel.x.rightCols(cfg.dgp.t - split);
        const MatrixXd c_test = panel.common.rightCols(cfg.dgp.t - split);
        const VectorXd s_train = panel.state_observed.head(split);
        const VectorXd s_test = panel.state_observed.tail(cfg.dgp.t - split);

        MatrixXd rows(max_r, 4);
        for (Index k = 1; k <= max_r; ++k) {
          const auto oos = oos_common_component<double>(
              x_train, s_train, x_test, s_test, cfg.bandwidth, k, cfg.kind,
              cfg.fit);
          const auto srsq = rsq<double>(x_test, oos.common, &c_test);
          const auto pca = constant_projection<double>(x_train, x_test, k, cfg.fit);
          const auto prsq = rsq<double>(x_test, pca.common, &c_test);
          rows(k - 1, 0) = srsq.vs_panel;
          rows(k - 1, 1) = *srsq.vs_truth;
          rows(k - 1, 2) = prsq.vs_panel;
          rows(k - 1, 3) = *prsq.vs_truth;
        }
        result.per_rep[rep] = rows;
      },
      cfg.n_threads);

  result.mean_values = MatrixXd::Zero(max_r, 4);
  for (const MatrixXd& rows : result.per_rep) result.mean_values += rows;
  result.mean_values /= double(cfg.n_reps);
  return result;
}

}  // namespace svfm
