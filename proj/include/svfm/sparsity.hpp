#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdlib>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "svfm/errors.hpp"

namespace svfm {

// Index-pair set describing which error covariances are assumed nonzero
// along one axis (cross-section or time). Sets are symmetric and contain the
// diagonal; iteration emits ordered pairs, so (a,b) and (b,a) both appear.
class PairPattern {
 public:
  enum class Kind { diagonal, banded, custom, full };

  static PairPattern diagonal() { return PairPattern(Kind::diagonal, 0, {}); }

  // All pairs with |a - b| <= lag.
  static PairPattern banded(int lag) {
    if (lag < 0) throw ConfigError("band lag must be nonnegative");
    return PairPattern(Kind::banded, lag, {});
  }

  // Explicit pair list; symmetrized and the diagonal added automatically.
  static PairPattern custom(std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs) {
    return PairPattern(Kind::custom, 0, std::move(pairs));
  }

  // Every pair. Quadratic in the axis length; meant for oracle checks and
  // small diagnostics, not production sparsity assumptions.
  static PairPattern full() { return PairPattern(Kind::full, 0, {}); }

  Kind kind() const { return kind_; }
  int lag() const { return lag_; }

  // Members per row, used to enforce the boundedness assumption.
  Eigen::Index row_count(Eigen::Index n) const {
    switch (kind_) {
      case Kind::diagonal:
        return 1;
      case Kind::banded:
        return std::min<Eigen::Index>(2 * lag_ + 1, n);
      case Kind::full:
        return n;
      case Kind::custom: {
        std::vector<Eigen::Index> counts(std::size_t(n), 1);
        for (auto [a, b] : pairs_) {
          if (a != b) ++counts[std::size_t(a)];
        }
        return *std::max_element(counts.begin(), counts.end());
      }
    }
    return n;
  }

  void validate(Eigen::Index n, Eigen::Index max_per_row = 1024) const {
    if (kind_ == Kind::custom) {
      for (auto [a, b] : pairs_) {
        if (a < 0 || b < 0 || a >= n || b >= n) {
          throw ConfigError("pair index out of range");
        }
      }
    }
    if (kind_ != Kind::full && row_count(n) > max_per_row) {
      throw ConfigError("sparsity pattern exceeds the per-row cap of " +
                        std::to_string(long(max_per_row)));
    }
  }

  // Calls f(a, b) for every ordered pair in the set.
  template <typename F>
  void for_each(Eigen::Index n, F&& f) const {
    switch (kind_) {
      case Kind::diagonal:
        for (Eigen::Index a = 0; a < n; ++a) f(a, a);
        return;
      case Kind::banded:
        for (Eigen::Index a = 0; a < n; ++a) {
          const Eigen::Index lo = std::max<Eigen::Index>(0, a - lag_);
          const Eigen::Index hi = std::min<Eigen::Index>(n - 1, a + lag_);
          for (Eigen::Index b = lo; b <= hi; ++b) f(a, b);
        }
        return;
      case Kind::full:
        for (Eigen::Index a = 0; a < n; ++a) {
          for (Eigen::Index b = 0; b < n; ++b) f(a, b);
        }
        return;
      case Kind::custom: {
        std::set<std::pair<Eigen::Index, Eigen::Index>> seen;
        for (Eigen::Index a = 0; a < n; ++a) seen.emplace(a, a);
        for (auto [a, b] : pairs_) {
          if (a >= n || b >= n) throw ConfigError("pair index out of range");
          seen.emplace(a, b);
          seen.emplace(b, a);
        }
        for (auto [a, b] : seen) f(a, b);
        return;
      }
    }
  }

 private:
  PairPattern(Kind kind, int lag,
              std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs)
      : kind_(kind), lag_(lag), pairs_(std::move(pairs)) {}

  Kind kind_;
  int lag_;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs_;
};

// Sparsity assumptions for all covariance plug-ins. The joint set over
// (series, time) pairs is same-series x time-pattern by default; full means
// every ((i,t),(j,u)) combination (oracle checks only).
struct SparsitySets {
  PairPattern cross = PairPattern::diagonal();  // (i,j) with E[e_it e_jt] != 0
  PairPattern time = PairPattern::diagonal();   // (t,u) with E[e_it e_iu] != 0
  enum class Joint { same_series_time_pattern, full };
  Joint joint = Joint::same_series_time_pattern;

  static SparsitySets defaults(int time_lag = 0) {
    SparsitySets s;
    if (time_lag > 0) s.time = PairPattern::banded(time_lag);
    return s;
  }

  static SparsitySets all_pairs() {
    SparsitySets s;
    s.cross = PairPattern::full();
    s.time = PairPattern::full();
    s.joint = Joint::full;
    return s;
  }

  // Calls f(i, t, j, u) for every ordered joint pair ((i,t),(j,u)).
  template <typename F>
  void for_each_joint(Eigen::Index n, Eigen::Index t, F&& f) const {
    if (joint == Joint::full) {
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index a = 0; a < t; ++a)
          for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index b = 0; b < t; ++b) f(i, a, j, b);
      return;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      time.for_each(t, [&](Eigen::Index a, Eigen::Index b) { f(i, a, i, b); });
    }
  }
};

}  // namespace svfm
