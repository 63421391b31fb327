#pragma once

#include <Eigen/Core>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "svfm/errors.hpp"

namespace svfm::io {

enum class Layout { rows_are_time, rows_are_series };
enum class StateTransform { none, log_raw, log_normalized };

Layout layout_from_string(const std::string& name);
StateTransform transform_from_string(const std::string& name);

struct PanelData {
  Eigen::MatrixXd values;  // N series x T periods
  std::vector<std::string> series_ids;
  std::vector<std::string> time_ids;
};

struct StateSeries {
  Eigen::VectorXd values;  // aligned with the panel's periods
  std::string id;
};

struct LoadOptions {
  Layout layout = Layout::rows_are_time;
  // Name of the state column (rows_are_time layout only); empty = none.
  std::string state_column;
  StateTransform transform = StateTransform::none;
};

struct LoadedPanel {
  PanelData panel;
  std::optional<StateSeries> state;
};

// Reads a labeled CSV panel. Row/column headers become series and time ids;
// time ids must be strictly increasing (numerically when every id parses as
// a number, lexicographically otherwise). Missing and non-finite cells are
// reported with their coordinates.
LoadedPanel load_panel_csv(const std::string& path, const LoadOptions& opts = {});

// Shortest-exact decimal formatting: 17 significant digits round-trip to the
// same double.
std::string format_double(double v);

// Writes a labeled CSV matrix with LF line endings. NaN cells are written
// empty; their count is returned. Empty label vectors auto-number.
std::size_t write_matrix_csv(const std::string& path, const Eigen::MatrixXd& m,
                             std::vector<std::string> row_labels = {},
                             std::vector<std::string> col_labels = {},
                             const std::string& corner = "");

// Reads back a matrix written by write_matrix_csv (labels are discarded,
// empty cells become NaN).
Eigen::MatrixXd read_matrix_csv(const std::string& path);

void write_text_file(const std::string& path, const std::string& contents);

// Flat key=value configuration ('#' starts a comment). Later sources merged
// on top override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path);
  // Each entry must look like key=value.
  static KeyValueConfig from_pairs(const std::vector<std::string>& pairs);

  void merge(const KeyValueConfig& overrides);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  unsigned long long get_uint(const std::string& key, unsigned long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace svfm::io
