#include "svfm/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "svfm/estimator.hpp"
#include "svfm/evalkit.hpp"
#include "svfm/inference.hpp"
#include "svfm/io.hpp"
#include "svfm/simlab.hpp"

namespace svfm::cli {

namespace {

using nlohmann::json;

std::filesystem::path output_file(const std::string& out_dir, const std::string& name) {
  std::filesystem::create_directories(out_dir);
  return std::filesystem::path(out_dir) / name;
}

void write_report(const std::string& out_dir, const std::string& name, const json& j) {
  io::write_text_file(output_file(out_dir, name).string(), j.dump(2) + "\n");
}

std::vector<std::string> factor_labels(Eigen::Index r) {
  std::vector<std::string> labels;
  for (Eigen::Index k = 1; k <= r; ++k) labels.push_back("factor" + std::to_string(long(k)));
  return labels;
}

std::vector<std::string> state_labels(const Eigen::VectorXd& states) {
  std::vector<std::string> labels;
  for (Eigen::Index i = 0; i < states.size(); ++i) {
    labels.push_back(io::format_double(states(i)));
  }
  return labels;
}

double json_safe(double v) { return std::isfinite(v) ? v : 0.0; }

// Options shared by all data-driven commands, with config-file fallback.
struct DataOptions {
  std::string data_path;
  std::string layout = "time";
  std::string state_column = "state";
  std::string transform = "none";
  std::string kernel = "gaussian";
  double bandwidth = 0.3;
  long long n_factors = 1;
  double min_effective = 10.0;
  bool demean = false;
  std::string cross = "diagonal";
  long long time_lag = 0;
  std::string out_dir = "svfm_out";
  std::string config_path;
  std::vector<std::string> overrides;
  bool has_inference = false;

  void add_to(CLI::App* cmd, bool needs_inference) {
    has_inference = needs_inference;
    cmd->add_option("--data", data_path, "Panel CSV file");
    cmd->add_option("--layout", layout, "CSV layout: time (rows are periods) or series");
    cmd->add_option("--state-column", state_column, "Header of the state column");
    cmd->add_option("--transform", transform, "State transform: none, log, log_normalized");
    cmd->add_option("--kernel", kernel, "Kernel: gaussian, uniform, epanechnikov, biweight, triweight");
    cmd->add_option("--bandwidth", bandwidth, "Kernel bandwidth");
    cmd->add_option("--factors,-r", n_factors, "Number of factors");
    cmd->add_option("--min-effective", min_effective, "Floor on the effective sample size T(s)");
    cmd->add_flag("--demean", demean, "Subtract per-series means before fitting");
    if (needs_inference) {
      cmd->add_option("--cross", cross, "Cross-sectional error dependence: diagonal, banded:<k>, full");
      cmd->add_option("--time-lag", time_lag, "Serial error dependence lag (banded)");
    }
    cmd->add_option("--out", out_dir, "Output directory");
    cmd->add_option("--config", config_path, "key=value config file (flags override it)");
    cmd->add_option("--set", overrides, "Extra key=value overrides (repeatable)");
  }

  // Precedence: built-in defaults < config file < --set overrides < flags.
  void finalize(CLI::App* cmd) {
    io::KeyValueConfig cfg;
    if (!config_path.empty()) cfg = io::KeyValueConfig::from_file(config_path);
    cfg.merge(io::KeyValueConfig::from_pairs(overrides));

    const auto use = [&](const char* flag) { return cmd->count(flag) == 0; };
    if (use("--data")) data_path = cfg.get_string("data", data_path);
    if (use("--layout")) layout = cfg.get_string("layout", layout);
    if (use("--state-column")) state_column = cfg.get_string("state_column", state_column);
    if (use("--transform")) transform = cfg.get_string("transform", transform);
    if (use("--kernel")) kernel = cfg.get_string("kernel", kernel);
    if (use("--bandwidth")) bandwidth = cfg.get_double("bandwidth", bandwidth);
    if (use("--factors")) n_factors = cfg.get_int("factors", n_factors);
    if (use("--min-effective")) min_effective = cfg.get_double("min_effective", min_effective);
    if (use("--demean")) demean = cfg.get_bool("demean", demean);
    if (has_inference) {
      if (use("--cross")) cross = cfg.get_string("cross", cross);
      if (use("--time-lag")) time_lag = cfg.get_int("time_lag", time_lag);
    }
    if (use("--out")) out_dir = cfg.get_string("out", out_dir);

    if (data_path.empty()) throw ConfigError("--data (or config key 'data') is required");
    if (!(bandwidth > 0)) throw ConfigError("bandwidth must be positive");
    if (n_factors < 1) throw ConfigError("factor count must be positive");
    if (time_lag < 0) throw ConfigError("time lag must be nonnegative");
  }

  io::LoadedPanel load() const {
    io::LoadOptions lo;
    lo.layout = io::layout_from_string(layout);
    lo.state_column = state_column;
    lo.transform = io::transform_from_string(transform);
    auto loaded = io::load_panel_csv(data_path, lo);
    if (!loaded.state) {
      throw MisalignedState("panel has no state column '" + state_column + "'");
    }
    return loaded;
  }

  KernelKind kernel_kind() const { return kernel_from_string(kernel); }

  FitOptions fit_options() const {
    FitOptions opts;
    opts.min_effective_size = min_effective;
    opts.demean = demean;
    return opts;
  }

  SparsitySets sparsity() const {
    SparsitySets sets = SparsitySets::defaults(int(time_lag));
    if (cross == "diagonal") {
      sets.cross = PairPattern::diagonal();
    } else if (cross == "full") {
      sets.cross = PairPattern::full();
    } else if (cross.rfind("banded:", 0) == 0) {
      sets.cross = PairPattern::banded(std::stoi(cross.substr(7)));
    } else {
      throw ConfigError("unknown cross-sectional pattern: " + cross);
    }
    return sets;
  }
};

struct GridOptions {
  std::string explicit_grid;
  double grid_min = 0.0;
  double grid_max = 0.0;
  long long grid_points = 0;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--grid", explicit_grid, "Comma-separated list of target states");
    cmd->add_option("--grid-min", grid_min, "Grid lower end");
    cmd->add_option("--grid-max", grid_max, "Grid upper end");
    cmd->add_option("--grid-points", grid_points, "Number of grid points");
  }

  bool specified(CLI::App* cmd) const {
    return cmd->count("--grid") > 0 || cmd->count("--grid-points") > 0;
  }

  Eigen::VectorXd build(CLI::App* cmd) const {
    if (cmd->count("--grid") > 0) {
      if (cmd->count("--grid-points") > 0) {
        throw ConfigError("--grid and --grid-min/max/points are mutually exclusive");
      }
      std::vector<double> vals;
      std::string token;
      for (char c : explicit_grid + ",") {
        if (c == ',') {
          if (!token.empty()) {
            vals.push_back(std::stod(token));
            token.clear();
          }
        } else {
          token.push_back(c);
        }
      }
      if (vals.empty()) throw ConfigError("empty --grid");
      return Eigen::Map<Eigen::VectorXd>(vals.data(), Eigen::Index(vals.size()));
    }
    if (grid_points < 2 || !(grid_max > grid_min)) {
      throw ConfigError("grid needs --grid-min < --grid-max and --grid-points >= 2");
    }
    return Eigen::VectorXd::LinSpaced(grid_points, grid_min, grid_max);
  }
};

// ---------------------------------------------------------------------------

void run_fit(const DataOptions& data, double s, bool write_components) {
  const auto loaded = data.load();
  const auto& x = loaded.panel.values;
  const auto fit = fit_conditional(x, loaded.state->values, s, data.bandwidth,
                                   data.n_factors, data.kernel_kind(),
                                   data.fit_options());
  const auto unproj = unprojected_factors(fit);
  const auto cc = common_components(x, fit);

  const auto& out = data.out_dir;
  io::write_matrix_csv(output_file(out, "loadings.csv").string(), fit.loadings,
                       loaded.panel.series_ids, factor_labels(fit.n_factors), "series");
  io::write_matrix_csv(output_file(out, "projected_factors.csv").string(),
                       fit.projected_factors, loaded.panel.time_ids,
                       factor_labels(fit.n_factors), "time");
  io::write_matrix_csv(output_file(out, "factors.csv").string(), unproj.factors,
                       loaded.panel.time_ids, factor_labels(fit.n_factors), "time");
  io::write_matrix_csv(output_file(out, "eigenvalues.csv").string(),
                       fit.eigenvalues, factor_labels(fit.n_factors),
                       {"eigenvalue"}, "component");
  io::write_matrix_csv(output_file(out, "weights.csv").string(),
                       fit.weights.values, loaded.panel.time_ids, {"weight"}, "time");
  if (write_components) {
    io::write_matrix_csv(output_file(out, "common.csv").string(), cc.common,
                         loaded.panel.series_ids, loaded.panel.time_ids, "series");
    io::write_matrix_csv(output_file(out, "residuals.csv").string(), cc.residuals,
                         loaded.panel.series_ids, loaded.panel.time_ids, "series");
  }

  const MatrixX<double> xd = fit.demeaned()
                                 ? MatrixX<double>(x.colwise() - fit.row_means)
                                 : MatrixX<double>(x);
  const double total = (xd * fit.weights.values.cwiseSqrt().asDiagonal()).squaredNorm() /
                       (double(x.rows()) * fit.weights.effective_size);

  json summary{
      {"command", "fit"},
      {"state", s},
      {"bandwidth", data.bandwidth},
      {"kernel", data.kernel},
      {"n_factors", fit.n_factors},
      {"n_series", x.rows()},
      {"n_periods", x.cols()},
      {"effective_size", fit.weights.effective_size},
      {"state_density", density_estimate(fit.weights)},
      {"n_valid_times", cc.valid_times.size()},
      {"repeated_eigenvalue", fit.repeated_eigenvalue},
      {"nonpositive_eigenvalue", fit.nonpositive_eigenvalue},
      {"demeaned", fit.demeaned()},
  };
  for (Eigen::Index k = 0; k < fit.n_factors; ++k) {
    summary["eigenvalues"].push_back(fit.eigenvalues(k));
    summary["variance_shares"].push_back(
        total > 0 ? fit.eigenvalues(k) / total
                  : std::numeric_limits<double>::quiet_NaN());
  }
  write_report(out, "summary.json", summary);

  std::cout << "fit: s=" << s << " h=" << data.bandwidth << " r=" << fit.n_factors
            << " T(s)=" << fit.weights.effective_size
            << " valid_times=" << cc.valid_times.size() << " -> " << out << "\n";
}

void run_sweep(const DataOptions& data, const Eigen::VectorXd& grid) {
  const auto loaded = data.load();
  const auto& x = loaded.panel.values;
  const auto sweep = state_sweep(x, loaded.state->values, grid, data.bandwidth,
                                 data.n_factors, data.kernel_kind(),
                                 data.fit_options());

  const auto& out = data.out_dir;
  const auto labels = state_labels(sweep.states);
  io::write_matrix_csv(output_file(out, "variance_shares.csv").string(),
                       sweep.variance_shares, labels,
                       factor_labels(data.n_factors), "state");
  io::write_matrix_csv(output_file(out, "density.csv").string(), sweep.density,
                       labels, {"density"}, "state");

  MatrixX<double> eigenvalues(grid.size(), data.n_factors);
  eigenvalues.setConstant(std::numeric_limits<double>::quiet_NaN());

  // Loading curves, one file per factor: states down the rows, series across
  // the columns. Columns are sign-aligned between consecutive grid points so
  // the curves stay continuous (each fit's own orientation is arbitrary).
  std::vector<MatrixX<double>> curves(
      std::size_t(data.n_factors),
      MatrixX<double>::Constant(grid.size(), x.rows(),
                                std::numeric_limits<double>::quiet_NaN()));
  const ConditionalFit<double>* previous = nullptr;
  for (Eigen::Index g = 0; g < grid.size(); ++g) {
    if (!sweep.fits[std::size_t(g)]) continue;
    const auto& fit = *sweep.fits[std::size_t(g)];
    eigenvalues.row(g) = fit.eigenvalues;
    for (Eigen::Index k = 0; k < data.n_factors; ++k) {
      double sign = 1.0;
      if (previous != nullptr &&
          previous->loadings.col(k).dot(fit.loadings.col(k)) < 0) {
        sign = -1.0;
      }
      curves[std::size_t(k)].row(g) = sign * fit.loadings.col(k).transpose();
    }
    previous = &fit;
  }
  for (Eigen::Index k = 0; k < data.n_factors; ++k) {
    io::write_matrix_csv(
        output_file(out, "loadings_factor" + std::to_string(long(k + 1)) + ".csv").string(),
        curves[std::size_t(k)], labels, loaded.panel.series_ids, "state");
  }
  io::write_matrix_csv(output_file(out, "eigenvalues.csv").string(), eigenvalues,
                       labels, factor_labels(data.n_factors), "state");

  json summary{{"command", "sweep"},
               {"bandwidth", data.bandwidth},
               {"kernel", data.kernel},
               {"n_factors", data.n_factors},
               {"grid_points", grid.size()}};
  int n_failed = 0;
  for (Eigen::Index g = 0; g < grid.size(); ++g) {
    if (!sweep.errors[std::size_t(g)].empty()) {
      ++n_failed;
      summary["failures"].push_back(
          {{"state", sweep.states(g)}, {"error", sweep.errors[std::size_t(g)]}});
    }
  }
  summary["n_failed"] = n_failed;
  write_report(out, "summary.json", summary);

  std::cout << "sweep: " << grid.size() << " states, " << n_failed
            << " failed -> " << out << "\n";
}

void run_test(const DataOptions& data, CLI::App* cmd, double s1, double s2,
              const GridOptions& grid_opts) {
  const auto loaded = data.load();
  const auto& x = loaded.panel.values;
  const auto sets = data.sparsity();
  const auto& out = data.out_dir;

  if (grid_opts.specified(cmd)) {
    const auto grid = grid_opts.build(cmd);
    const auto result =
        pairwise_test_grid(x, loaded.state->values, grid, data.bandwidth,
                           data.n_factors, data.kernel_kind(), sets,
                           data.fit_options());
    const auto labels = state_labels(result.states);
    io::write_matrix_csv(output_file(out, "statistic.csv").string(),
                         result.statistic, labels, labels, "state");
    io::write_matrix_csv(output_file(out, "pvalue.csv").string(), result.p_value,
                         labels, labels, "state");
    io::write_matrix_csv(output_file(out, "rho.csv").string(), result.rho_hat,
                         labels, labels, "state");

    json summary{{"command", "test"},
                 {"bandwidth", data.bandwidth},
                 {"n_factors", data.n_factors},
                 {"grid_points", grid.size()}};
    int n_failed = 0;
    const Eigen::Index g = grid.size();
    for (Eigen::Index a = 0; a < g; ++a) {
      for (Eigen::Index b = a + 1; b < g; ++b) {
        const auto& err = result.errors[std::size_t(a * g + b)];
        if (!err.empty()) {
          ++n_failed;
          summary["failures"].push_back({{"state_1", result.states(a)},
                                         {"state_2", result.states(b)},
                                         {"error", err}});
        }
      }
    }
    summary["n_failed_pairs"] = n_failed;
    write_report(out, "summary.json", summary);
    std::cout << "test grid: " << g << " states, " << n_failed
              << " failed pairs -> " << out << "\n";
    return;
  }

  if (cmd->count("--s1") == 0 || cmd->count("--s2") == 0) {
    throw ConfigError("test needs either --s1/--s2 or a grid");
  }
  const auto fit1 = fit_conditional(x, loaded.state->values, s1, data.bandwidth,
                                    data.n_factors, data.kernel_kind(),
                                    data.fit_options());
  const auto fit2 = fit_conditional(x, loaded.state->values, s2, data.bandwidth,
                                    data.n_factors, data.kernel_kind(),
                                    data.fit_options());
  const auto result =
      gc_test(make_gc_state(x, fit1), make_gc_state(x, fit2), sets);

  json summary{{"command", "test"},
               {"state_1", s1},
               {"state_2", s2},
               {"bandwidth", data.bandwidth},
               {"n_factors", data.n_factors},
               {"rho", result.rho_hat},
               {"bias_correction", result.bias},
               {"variance", result.variance},
               {"statistic", result.statistic},
               {"p_value", result.p_value},
               {"clipped_covariance", result.clipped_covariance}};
  write_report(out, "test.json", summary);
  std::cout << "test: s1=" << s1 << " s2=" << s2 << " rho=" << result.rho_hat
            << " statistic=" << result.statistic << " p=" << result.p_value
            << " -> " << out << "\n";
}

// ---------------------------------------------------------------------------
// Simulation studies.

struct SimulateOptions {
  std::string study;
  long long n = 0;       // 0 = study default
  long long t = 0;
  long long reps = 0;
  double bandwidth = 0.0;
  double s = 0.5;
  double s1 = 0.4;
  double s2 = 0.6;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string out_dir = "svfm_out";
};

DgpConfig base_dgp(const SimulateOptions& o, Index n_default, Index t_default) {
  DgpConfig dgp;
  dgp.n = o.n > 0 ? Index(o.n) : n_default;
  dgp.t = o.t > 0 ? Index(o.t) : t_default;
  dgp.seed = o.seed;
  return dgp;
}

void run_simulate_fig1(const SimulateOptions& o) {
  DistributionStudyConfig cfg;
  cfg.dgp = base_dgp(o, 100, 500);
  cfg.target_state = o.s;
  cfg.bandwidth = o.bandwidth > 0 ? o.bandwidth : 0.3;
  cfg.n_reps = o.reps > 0 ? int(o.reps) : 1000;
  cfg.n_threads = o.threads;

  json summary{{"command", "simulate"},
               {"study", "fig1"},
               {"n", cfg.dgp.n},
               {"t", cfg.dgp.t},
               {"bandwidth", cfg.bandwidth},
               {"n_reps", cfg.n_reps},
               {"seed", o.seed}};

  const auto run_target = [&](DistributionTarget target, const std::string& name) {
    DistributionStudyConfig c = cfg;
    if (target == DistributionTarget::gc_null) {
      c.dgp.loading_model = LoadingModel::constant;  // spans equal under H0
      c.target_state = o.s1;
      c.second_state = o.s2;
    }
    const auto res = mc_distribution_study(c, target);
    Eigen::Map<const Eigen::VectorXd> sample(res.sample.data(),
                                             Eigen::Index(res.sample.size()));
    io::write_matrix_csv(output_file(o.out_dir, name + "_sample.csv").string(),
                         sample, {}, {"standardized"}, "draw");
    summary["targets"][name] = {{"mean", res.mean},
                                {"variance", res.variance},
                                {"ks_distance", res.ks_distance},
                                {"n_values", res.sample.size()},
                                {"n_failed", res.n_failed}};
    std::cout << "fig1 " << name << ": mean=" << res.mean
              << " var=" << res.variance << " ks=" << res.ks_distance
              << " failed=" << res.n_failed << "\n";
  };
  run_target(DistributionTarget::loading, "loading");
  run_target(DistributionTarget::factor, "factor");
  run_target(DistributionTarget::common, "common");
  run_target(DistributionTarget::gc_null, "gc_null");
  write_report(o.out_dir, "summary.json", summary);
}

void run_simulate_table1(const SimulateOptions& o) {
  PowerStudyConfig cfg;
  cfg.dgp = base_dgp(o, 0, 0);  // sizes come from the size list
  cfg.dgp.state_model = StateModel::uniform01;
  // Compact-support kernel: windows on the flat side of the loading break
  // carry no weight from the varying regime, so the (0.90, 0.95) pair is an
  // exact null. A gaussian kernel would leak mass across the break and turn
  // that size benchmark into a mild alternative.
  cfg.kind = KernelKind::epanechnikov;
  cfg.bandwidth = o.bandwidth > 0 ? o.bandwidth : 0.3;
  cfg.n_reps = o.reps > 0 ? int(o.reps) : 500;
  cfg.n_threads = o.threads;
  cfg.pairs = {{0.10, 0.90}, {0.25, 0.75}, {0.40, 0.60}, {0.90, 0.95}};
  cfg.sizes = {{50, 250}, {100, 500}, {200, 1000}};
  if (o.n > 0 && o.t > 0) cfg.sizes = {{Index(o.n), Index(o.t)}};

  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  for (auto [a, b] : cfg.pairs) {
    col_labels.push_back("(" + io::format_double(a) + ";" + io::format_double(b) + ")");
  }
  MatrixX<double> table(Eigen::Index(cfg.sizes.size()) * 2, Eigen::Index(cfg.pairs.size()));
  MatrixX<double> failures = table;

  json summary{{"command", "simulate"}, {"study", "tableI"},
               {"n_reps", cfg.n_reps}, {"bandwidth", cfg.bandwidth},
               {"kernel", "epanechnikov"}, {"seed", o.seed}};
  int row = 0;
  for (const auto model : {LoadingModel::break_linear, LoadingModel::break_quadratic}) {
    cfg.dgp.loading_model = model;
    const auto res = mc_power_study(cfg);
    const std::string tag = model == LoadingModel::break_linear ? "linear" : "quadratic";
    for (std::size_t a = 0; a < cfg.sizes.size(); ++a) {
      table.row(row) = res.acceptance.row(Eigen::Index(a));
      failures.row(row) = res.n_failed.row(Eigen::Index(a));
      row_labels.push_back(tag + "_" + std::to_string(cfg.sizes[a].first) + "x" +
                           std::to_string(cfg.sizes[a].second));
      ++row;
    }
  }
  io::write_matrix_csv(output_file(o.out_dir, "acceptance.csv").string(), table,
                       row_labels, col_labels, "design");
  io::write_matrix_csv(output_file(o.out_dir, "failures.csv").string(), failures,
                       row_labels, col_labels, "design");
  write_report(o.out_dir, "summary.json", summary);
  std::cout << "tableI: " << table.rows() << " designs x " << table.cols()
            << " pairs -> " << o.out_dir << "\n";
}

void run_simulate_table_a1(const SimulateOptions& o) {
  RsqStudyConfig cfg;
  cfg.dgp = base_dgp(o, 100, 500);
  cfg.bandwidth = o.bandwidth > 0 ? o.bandwidth : 0.3;
  cfg.n_reps = o.reps > 0 ? int(o.reps) : 20;
  cfg.n_threads = o.threads;

  const auto res = mc_rsq_noisy_state_study(cfg);
  io::write_matrix_csv(output_file(o.out_dir, "table.csv").string(), res.values,
                       res.labels,
                       {"rsq_x_in", "rsq_c_in", "rsq_x_out", "rsq_c_out"},
                       "design");
  json summary{{"command", "simulate"},   {"study", "tableAI"},
               {"n", cfg.dgp.n},          {"t", cfg.dgp.t},
               {"bandwidth", cfg.bandwidth}, {"n_reps", cfg.n_reps},
               {"seed", o.seed}};
  for (std::size_t i = 0; i < res.labels.size(); ++i) {
    summary["rows"].push_back({{"label", res.labels[i]},
                               {"rsq_x_in", json_safe(res.values(Eigen::Index(i), 0))},
                               {"rsq_c_in", json_safe(res.values(Eigen::Index(i), 1))},
                               {"rsq_x_out", json_safe(res.values(Eigen::Index(i), 2))},
                               {"rsq_c_out", json_safe(res.values(Eigen::Index(i), 3))}});
  }
  write_report(o.out_dir, "summary.json", summary);
  std::cout << "tableAI: " << res.labels.size() << " designs -> " << o.out_dir << "\n";
}

void run_simulate_fig_a1(const SimulateOptions& o) {
  RsqStudyConfig cfg;
  cfg.dgp = base_dgp(o, 100, 500);
  cfg.dgp.state_model = StateModel::two_state_ou;
  cfg.dgp.loading_model = LoadingModel::exp_two_state;
  cfg.bandwidth = o.bandwidth > 0 ? o.bandwidth : 0.3;
  cfg.n_reps = o.reps > 0 ? int(o.reps) : 20;
  cfg.n_threads = o.threads;

  const auto res = mc_rsq_factor_count_study(cfg, 8);
  std::vector<std::string> row_labels;
  for (Eigen::Index k = 1; k <= res.mean_values.rows(); ++k) {
    row_labels.push_back(std::to_string(long(k)));
  }
  io::write_matrix_csv(output_file(o.out_dir, "curves.csv").string(),
                       res.mean_values, row_labels,
                       {"state_rsq_x", "state_rsq_c", "pca_rsq_x", "pca_rsq_c"},
                       "n_factors");
  json summary{{"command", "simulate"}, {"study", "figA1"},
               {"n", cfg.dgp.n},        {"t", cfg.dgp.t},
               {"bandwidth", cfg.bandwidth}, {"n_reps", cfg.n_reps},
               {"seed", o.seed}};
  write_report(o.out_dir, "summary.json", summary);
  std::cout << "figA1: factor counts 1.." << res.mean_values.rows() << " -> "
            << o.out_dir << "\n";
}

void run_simulate(const SimulateOptions& o) {
  if (o.study == "fig1") {
    run_simulate_fig1(o);
  } else if (o.study == "tableI") {
    run_simulate_table1(o);
  } else if (o.study == "tableAI") {
    run_simulate_table_a1(o);
  } else if (o.study == "figA1") {
    run_simulate_fig_a1(o);
  } else {
    throw UnknownCommand("unknown study: " + o.study +
                         " (expected fig1, tableI, tableAI or figA1)");
  }
}

// ---------------------------------------------------------------------------

void run_backtest(const DataOptions& data, long long initial_train,
                  long long refit_every, bool portfolio, double risk_free,
                  double periods_per_year) {
  const auto loaded = data.load();
  const auto& x = loaded.panel.values;

  BacktestOptions opts;
  opts.initial_train = Eigen::Index(initial_train);
  opts.refit_every = Eigen::Index(refit_every);
  opts.bandwidth = data.bandwidth;
  opts.n_factors = data.n_factors;
  opts.kind = data.kernel_kind();
  opts.fit = data.fit_options();

  const auto report = expanding_backtest<double>(x, loaded.state->values, opts);
  const auto& out = data.out_dir;
  io::write_matrix_csv(output_file(out, "oos_common.csv").string(), report.common,
                       loaded.panel.series_ids, loaded.panel.time_ids, "series");

  json summary{{"command", "backtest"},
               {"initial_train", initial_train},
               {"refit_every", refit_every},
               {"bandwidth", data.bandwidth},
               {"n_factors", data.n_factors},
               {"n_refits", report.refit_points.size()},
               {"rsq_oos", report.fit_quality.vs_panel},
               {"n_masked_cells", report.fit_quality.n_masked_cells},
               {"n_skipped_periods", report.skipped.size()}};
  for (std::size_t k = 0; k < report.skipped.size() && k < 10; ++k) {
    summary["skipped"].push_back({{"period", report.skipped[k]},
                                  {"error", report.errors[k]}});
  }

  if (portfolio) {
    const auto pf = mv_factor_portfolio<double>(x, loaded.state->values, opts,
                                                risk_free, periods_per_year);
    std::vector<std::string> time_ids;
    for (Eigen::Index t = opts.initial_train; t < x.cols(); ++t) {
      time_ids.push_back(loaded.panel.time_ids[std::size_t(t)]);
    }
    io::write_matrix_csv(output_file(out, "portfolio_returns.csv").string(),
                         pf.returns, time_ids, {"excess_return"}, "time");
    std::vector<std::string> step_labels;
    for (Eigen::Index p : pf.refit_points) {
      step_labels.push_back(loaded.panel.time_ids[std::size_t(p)]);
    }
    io::write_matrix_csv(output_file(out, "factor_weights.csv").string(),
                         pf.factor_weights, step_labels,
                         factor_labels(opts.n_factors), "refit_time");
    summary["portfolio"] = {{"mean_excess_return", pf.mean_return},
                            {"volatility", pf.volatility},
                            {"sharpe_annualized", pf.sharpe_annualized},
                            {"ridged_covariance", pf.ridged_covariance}};
    std::cout << "backtest: oos rsq=" << report.fit_quality.vs_panel
              << " sharpe=" << pf.sharpe_annualized << " -> " << out << "\n";
  } else {
    std::cout << "backtest: oos rsq=" << report.fit_quality.vs_panel << " -> "
              << out << "\n";
  }
  write_report(out, "report.json", summary);
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  CLI::App app{"State-varying latent factor models: kernel-projected principal components"};
  app.require_subcommand(1);

  // fit ----------------------------------------------------------------
  auto* fit_cmd = app.add_subcommand("fit", "Conditional factor fit at one target state");
  DataOptions fit_data;
  fit_data.add_to(fit_cmd, false);
  double fit_state = 0.0;
  bool fit_components = false;
  fit_cmd->add_option("--state,-s", fit_state, "Target state")->required();
  fit_cmd->add_flag("--write-components", fit_components,
                    "Also write common components and residuals");

  // sweep --------------------------------------------------------------
  auto* sweep_cmd = app.add_subcommand("sweep", "Conditional fits over a state grid");
  DataOptions sweep_data;
  sweep_data.add_to(sweep_cmd, false);
  GridOptions sweep_grid;
  sweep_grid.add_to(sweep_cmd);

  // test ---------------------------------------------------------------
  auto* test_cmd = app.add_subcommand("test", "Span-equality test between states");
  DataOptions test_data;
  test_data.add_to(test_cmd, true);
  GridOptions test_grid;
  test_grid.add_to(test_cmd);
  double test_s1 = 0.0, test_s2 = 0.0;
  test_cmd->add_option("--s1", test_s1, "First target state");
  test_cmd->add_option("--s2", test_s2, "Second target state");

  // simulate -----------------------------------------------------------
  auto* sim_cmd = app.add_subcommand("simulate", "Monte Carlo studies on synthetic panels");
  SimulateOptions sim;
  sim_cmd->add_option("study", sim.study, "Study: fig1, tableI, tableAI, figA1")->required();
  sim_cmd->add_option("--N", sim.n, "Cross-section size override");
  sim_cmd->add_option("--T", sim.t, "Sample length override");
  sim_cmd->add_option("--reps", sim.reps, "Replication count override");
  sim_cmd->add_option("--bandwidth", sim.bandwidth, "Bandwidth override");
  sim_cmd->add_option("--state,-s", sim.s, "Target state (distribution studies)");
  sim_cmd->add_option("--s1", sim.s1, "First state of the null-test study");
  sim_cmd->add_option("--s2", sim.s2, "Second state of the null-test study");
  sim_cmd->add_option("--seed", sim.seed, "Generator seed");
  sim_cmd->add_option("--threads", sim.threads, "Worker threads (0 = all cores)");
  sim_cmd->add_option("--out", sim.out_dir, "Output directory");

  // backtest -----------------------------------------------------------
  auto* back_cmd = app.add_subcommand("backtest", "Walk-forward out-of-sample evaluation");
  DataOptions back_data;
  back_data.add_to(back_cmd, false);
  long long initial_train = 0, refit_every = 1;
  bool portfolio = false;
  double risk_free = 0.0, periods_per_year = 252.0;
  back_cmd->add_option("--initial-train", initial_train, "Initial training window length")
      ->required();
  back_cmd->add_option("--refit-every", refit_every, "Periods between refits");
  back_cmd->add_flag("--portfolio", portfolio, "Also run the mean-variance factor portfolio");
  back_cmd->add_option("--risk-free", risk_free, "Per-period risk-free rate");
  back_cmd->add_option("--periods-per-year", periods_per_year, "Annualization factor");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*fit_cmd) {
      fit_data.finalize(fit_cmd);
      run_fit(fit_data, fit_state, fit_components);
    } else if (*sweep_cmd) {
      sweep_data.finalize(sweep_cmd);
      run_sweep(sweep_data, sweep_grid.build(sweep_cmd));
    } else if (*test_cmd) {
      test_data.finalize(test_cmd);
      run_test(test_data, test_cmd, test_s1, test_s2, test_grid);
    } else if (*sim_cmd) {
      run_simulate(sim);
    } else if (*back_cmd) {
      back_data.finalize(back_cmd);
      run_backtest(back_data, initial_train, refit_every, portfolio, risk_free,
                   periods_per_year);
    }
  } catch (const Error& e) {
    json record{{"error", e.name()},
                {"message", e.what()},
                {"exit_code", exit_code_for(e.error_class())}};
    std::cerr << record.dump() << "\n";
    return exit_code_for(e.error_class());
  } catch (const std::exception& e) {
    json record{{"error", "InternalError"}, {"message", e.what()}, {"exit_code", 3}};
    std::cerr << record.dump() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace svfm::cli
