#include "svfm/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <system_error>

namespace svfm::io {

namespace {

std::string strip(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(strip(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  fields.push_back(strip(current));
  return fields;
}

bool parse_double(const std::string& field, double& out) {
  const char* begin = field.data();
  const char* end = begin + field.size();
  const auto res = std::from_chars(begin, end, out);
  return res.ec == std::errc() && res.ptr == end;
}

double parse_cell(const std::string& field, const std::string& row_label,
                  const std::string& col_label) {
  const std::string where = " at row '" + row_label + "', column '" + col_label + "'";
  if (field.empty()) throw MissingCell("missing cell" + where);
  double v = 0;
  if (!parse_double(field, v)) {
    throw ParseError("cannot parse '" + field + "' as a number" + where);
  }
  if (!std::isfinite(v)) throw NonFiniteValue("non-finite value" + where);
  return v;
}

std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (strip(line).empty()) continue;
    rows.push_back(split_csv_line(line));
  }
  if (rows.size() < 2) throw ParseError("'" + path + "' has no data rows");
  const std::size_t width = rows.front().size();
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != width) {
      throw ParseError("'" + path + "' row " + std::to_string(r + 1) + " has " +
                       std::to_string(rows[r].size()) + " fields, expected " +
                       std::to_string(width));
    }
  }
  return rows;
}

void require_strictly_increasing(const std::vector<std::string>& time_ids) {
  bool all_numeric = true;
  std::vector<double> numeric(time_ids.size());
  for (std::size_t i = 0; i < time_ids.size(); ++i) {
    if (!parse_double(time_ids[i], numeric[i])) {
      all_numeric = false;
      break;
    }
  }
  for (std::size_t i = 1; i < time_ids.size(); ++i) {
    const bool ok = all_numeric ? numeric[i] > numeric[i - 1]
                                : time_ids[i] > time_ids[i - 1];
    if (!ok) {
      throw ParseError("time ids are not strictly increasing at '" +
                       time_ids[i] + "'");
    }
  }
}

void apply_transform(StateSeries& state, StateTransform transform) {
  if (transform == StateTransform::none) return;
  for (Eigen::Index i = 0; i < state.values.size(); ++i) {
    if (!(state.values(i) > 0)) {
      throw NonFiniteValue("log transform of nonpositive state value at period " +
                           std::to_string(long(i)));
    }
    state.values(i) = std::log(state.values(i));
  }
  if (transform == StateTransform::log_normalized) {
    const double mean = state.values.mean();
    const double sd = std::sqrt(
        (state.values.array() - mean).square().sum() /
        std::max<double>(1.0, double(state.values.size() - 1)));
    if (!(sd > 0)) {
      throw ZeroDenominator("state series is constant; cannot normalize");
    }
    state.values = (state.values.array() - mean) / sd;
  }
}

}  // namespace

Layout layout_from_string(const std::string& name) {
  if (name == "time" || name == "rows_are_time") return Layout::rows_are_time;
  if (name == "series" || name == "rows_are_series") return Layout::rows_are_series;
  throw ConfigError("unknown layout: " + name);
}

StateTransform transform_from_string(const std::string& name) {
  if (name == "none") return StateTransform::none;
  if (name == "log") return StateTransform::log_raw;
  if (name == "log_normalized") return StateTransform::log_normalized;
  throw ConfigError("unknown state transform: " + name);
}

LoadedPanel load_panel_csv(const std::string& path, const LoadOptions& opts) {
  const auto rows = read_csv_rows(path);
  const auto& header = rows.front();
  if (header.size() < 2) throw ParseError("'" + path + "' needs at least one data column");

  LoadedPanel out;

  if (opts.layout == Layout::rows_are_time) {
    // Columns are series (plus an optional state column); rows are periods.
    Eigen::Index state_col = -1;
    std::vector<Eigen::Index> series_cols;
    for (std::size_t c = 1; c < header.size(); ++c) {
      if (!opts.state_column.empty() && header[c] == opts.state_column) {
        if (state_col >= 0) throw ParseError("duplicate state column '" + header[c] + "'");
        state_col = Eigen::Index(c);
      } else {
        series_cols.push_back(Eigen::Index(c));
      }
    }
    if (!opts.state_column.empty() && state_col < 0) {
      throw MisalignedState("state column '" + opts.state_column + "' not found");
    }
    if (series_cols.empty()) throw ParseError("no series columns in '" + path + "'");

    const Eigen::Index n = Eigen::Index(series_cols.size());
    const Eigen::Index t = Eigen::Index(rows.size() - 1);
    out.panel.values.resize(n, t);
    for (Eigen::Index c : series_cols) out.panel.series_ids.push_back(header[std::size_t(c)]);
    if (state_col >= 0) {
      out.state = StateSeries{Eigen::VectorXd(t), header[std::size_t(state_col)]};
    }

    for (Eigen::Index tt = 0; tt < t; ++tt) {
      const auto& row = rows[std::size_t(tt) + 1];
      out.panel.time_ids.push_back(row[0]);
      for (Eigen::Index i = 0; i < n; ++i) {
        out.panel.values(i, tt) =
            parse_cell(row[std::size_t(series_cols[std::size_t(i)])], row[0],
                       out.panel.series_ids[std::size_t(i)]);
      }
      if (state_col >= 0) {
        const std::string& field = row[std::size_t(state_col)];
        if (field.empty()) {
          throw MisalignedState("state value missing at period '" + row[0] + "'");
        }
        out.state->values(tt) = parse_cell(field, row[0], out.state->id);
      }
    }
  } else {
    // Columns are periods; rows are series. A state column cannot align with
    // the time axis in this layout.
    if (!opts.state_column.empty()) {
      throw ConfigError("state columns require the rows_are_time layout");
    }
    const Eigen::Index t = Eigen::Index(header.size() - 1);
    const Eigen::Index n = Eigen::Index(rows.size() - 1);
    out.panel.values.resize(n, t);
    for (std::size_t c = 1; c < header.size(); ++c) {
      out.panel.time_ids.push_back(header[c]);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& row = rows[std::size_t(i) + 1];
      out.panel.series_ids.push_back(row[0]);
      for (Eigen::Index tt = 0; tt < t; ++tt) {
        out.panel.values(i, tt) = parse_cell(
            row[std::size_t(tt) + 1], row[0], out.panel.time_ids[std::size_t(tt)]);
      }
    }
  }

  require_strictly_increasing(out.panel.time_ids);
  {
    auto sorted = out.panel.series_ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ParseError("duplicate series ids in '" + path + "'");
    }
  }
  if (out.state) apply_transform(*out.state, opts.transform);
  return out;
}

std::string format_double(double v) {
  char buffer[64];
  const auto res = std::to_chars(buffer, buffer + sizeof(buffer), v,
                                 std::chars_format::general, 17);
  return std::string(buffer, res.ptr);
}

std::size_t write_matrix_csv(const std::string& path, const Eigen::MatrixXd& m,
                             std::vector<std::string> row_labels,
                             std::vector<std::string> col_labels,
                             const std::string& corner) {
  if (row_labels.empty()) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      row_labels.push_back(std::to_string(long(i)));
    }
  }
  if (col_labels.empty()) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      col_labels.push_back(std::to_string(long(j)));
    }
  }
  if (Eigen::Index(row_labels.size()) != m.rows() ||
      Eigen::Index(col_labels.size()) != m.cols()) {
    throw DimensionMismatch("label counts do not match the matrix shape");
  }

  std::ostringstream body;
  body << corner;
  for (const auto& label : col_labels) body << ',' << label;
  body << '\n';

  std::size_t n_empty = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    body << row_labels[std::size_t(i)];
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      body << ',';
      if (std::isnan(m(i, j))) {
        ++n_empty;
      } else {
        body << format_double(m(i, j));
      }
    }
    body << '\n';
  }
  write_text_file(path, body.str());
  return n_empty;
}

Eigen::MatrixXd read_matrix_csv(const std::string& path) {
  const auto rows = read_csv_rows(path);
  const Eigen::Index r = Eigen::Index(rows.size() - 1);
  const Eigen::Index c = Eigen::Index(rows.front().size() - 1);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    const auto& row = rows[std::size_t(i) + 1];
    for (Eigen::Index j = 0; j < c; ++j) {
      const std::string& field = row[std::size_t(j) + 1];
      if (field.empty()) {
        m(i, j) = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double v = 0;
      if (!parse_double(field, v)) {
        throw ParseError("cannot parse '" + field + "' in '" + path + "'");
      }
      m(i, j) = v;
    }
  }
  return m;
}

void write_text_file(const std::string& path, const std::string& contents) {
  std::ofstream outfile(path, std::ios::binary);
  if (!outfile) throw IoError("cannot open '" + path + "' for writing");
  outfile << contents;
  if (!outfile) throw IoError("failed writing '" + path + "'");
}

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  KeyValueConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = strip(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        " is not key=value: '" + line + "'");
    }
    const std::string key = strip(line.substr(0, eq));
    if (key.empty()) {
      throw ConfigError("empty key on config line " + std::to_string(line_no));
    }
    cfg.values_[key] = strip(line.substr(eq + 1));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::from_pairs(const std::vector<std::string>& pairs) {
  KeyValueConfig cfg;
  for (const auto& pair : pairs) {
    const std::size_t eq = pair.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override is not key=value: '" + pair + "'");
    }
    cfg.values_[strip(pair.substr(0, eq))] = strip(pair.substr(eq + 1));
  }
  return cfg;
}

void KeyValueConfig::merge(const KeyValueConfig& overrides) {
  for (const auto& [key, value] : overrides.values_) values_[key] = value;
}

bool KeyValueConfig::has(const std::string& key) const {
  return values_.count(key) != 0;
}

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  double v = 0;
  if (!parse_double(it->second, v)) {
    throw ConfigError("config key '" + key + "' is not a number: '" + it->second + "'");
  }
  return v;
}

long long KeyValueConfig::get_int(const std::string& key, long long fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  long long v = 0;
  const auto res =
      std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (res.ec != std::errc() || res.ptr != it->second.data() + it->second.size()) {
    throw ConfigError("config key '" + key + "' is not an integer: '" + it->second + "'");
  }
  return v;
}

unsigned long long KeyValueConfig::get_uint(const std::string& key,
                                            unsigned long long fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  unsigned long long v = 0;
  const auto res =
      std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (res.ec != std::errc() || res.ptr != it->second.data() + it->second.size()) {
    throw ConfigError("config key '" + key + "' is not a nonnegative integer: '" +
                      it->second + "'");
  }
  return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: '" + v + "'");
}

}  // namespace svfm::io
