#pragma once

// CSV and JSON ingestion for shares, shifts and units.
//
// Schemas (CSV header names; JSON mirrors them as an array of objects):
//   shares: unit_id, shift_id, weight              (long format)
//   shifts: shift_id, value, [cluster], [period], [exchange_group], [series],
//           [p_*]... covariates, any other column kept as a label column
//   units:  unit_id, y, [x], [w_e], [pi_*]... controls, any other column
//           kept as a label column (clusters, placebos)

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shiftshare/data.hpp"

namespace shiftshare {

enum class Format { csv, json };

inline Format parse_format(const std::string& s) {
  if (s == "csv") return Format::csv;
  if (s == "json") return Format::json;
  throw ValidationError("unknown format '" + s + "' (expected csv or json)");
}

/// Header plus string cells; the common currency of both input formats.
struct Table {
  std::string source;
  Labels header;
  std::vector<Labels> rows;

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t k = 0; k < header.size(); ++k) {
      if (header[k] == name) return k;
    }
    return std::nullopt;
  }

  std::size_t require(const std::string& name) const {
    if (auto k = find(name)) return *k;
    throw SchemaError(source + ": missing required column '" + name + "'");
  }

  double number(std::size_t row, std::size_t col) const {
    const auto& cell = rows[row][col];
    auto v = detail::parse_double(cell);
    if (!v) {
      throw ValidationError(source + ": row " + std::to_string(row + 2) + ", column '" + header[col] + "': '" +
                            cell + "' is not a number");
    }
    return *v;
  }
};

namespace detail {

inline Labels split_csv_line(const std::string& line, const std::string& source, std::size_t line_no) {
  Labels out;
  std::string cell;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cell += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cell));
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  if (quoted) throw ValidationError(source + ": line " + std::to_string(line_no) + ": unterminated quote");
  out.push_back(std::move(cell));
  return out;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace detail

inline Table parse_csv(const std::string& text, const std::string& source) {
  Table t;
  t.source = source;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = detail::split_csv_line(line, source, line_no);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw ValidationError(source + ": line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                            " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw SchemaError(source + ": empty file");
  return t;
}

inline Table read_csv(const std::filesystem::path& path) { return parse_csv(detail::read_file(path), path.string()); }

inline Table parse_json_table(const std::string& text, const std::string& source) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(source + ": " + e.what());
  }
  if (!doc.is_array()) throw SchemaError(source + ": expected a JSON array of records");
  Table t;
  t.source = source;
  for (const auto& rec : doc) {
    if (!rec.is_object()) throw SchemaError(source + ": every record must be an object");
    for (const auto& [key, _] : rec.items()) {
      if (!t.find(key)) t.header.push_back(key);
    }
  }
  for (const auto& rec : doc) {
    Labels row(t.header.size());
    for (std::size_t k = 0; k < t.header.size(); ++k) {
      auto it = rec.find(t.header[k]);
      if (it == rec.end() || it->is_null()) {
        row[k] = "NA";
      } else if (it->is_string()) {
        row[k] = it->get<std::string>();
      } else if (it->is_number_float()) {
        row[k] = detail::format_double(it->get<double>());
      } else if (it->is_number()) {
        row[k] = it->dump();
      } else {
        throw ValidationError(source + ": field '" + t.header[k] + "' must be a string or number");
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline Table read_table(const std::filesystem::path& path, Format format) {
  const auto text = detail::read_file(path);
  return format == Format::csv ? parse_csv(text, path.string()) : parse_json_table(text, path.string());
}

struct InputPaths {
  std::filesystem::path shares;
  std::filesystem::path shifts;
  std::filesystem::path units;
};

struct LoadedData {
  ShareMatrix shares;
  ShiftTable shifts;
  Dataset dataset;
  Labels warnings;
};

inline bool starts_with(const std::string& s, const std::string& prefix) {
  return s.size() >= prefix.size() && s.compare(0, prefix.size(), prefix) == 0;
}

inline ShiftTable shifts_from_table(const Table& t) {
  ShiftTable s;
  const auto id_col = t.require("shift_id");
  const auto value_col = t.require("value");
  const auto m = t.rows.size();
  s.values = Vector(static_cast<Index>(m));
  for (std::size_t r = 0; r < m; ++r) {
    s.ids.push_back(t.rows[r][id_col]);
    const double v = t.number(r, value_col);
    if (!std::isfinite(v)) {
      throw ValidationError(t.source + ": row " + std::to_string(r + 2) + ", column 'value': shift '" +
                            t.rows[r][id_col] + "' is not finite");
    }
    s.values[static_cast<Index>(r)] = v;
  }
  std::vector<std::size_t> cov_cols;
  for (std::size_t k = 0; k < t.header.size(); ++k) {
    const auto& name = t.header[k];
    if (k == id_col || k == value_col) continue;
    if (starts_with(name, "p_")) {
      cov_cols.push_back(k);
      continue;
    }
    Labels col;
    for (const auto& row : t.rows) col.push_back(row[k]);
    if (name == "cluster") s.cluster = std::move(col);
    else if (name == "period") s.period = std::move(col);
    else if (name == "exchange_group") s.exchange_group = std::move(col);
    else if (name == "series") s.series = std::move(col);
    else s.extra[name] = std::move(col);
  }
  s.covariates = Matrix(static_cast<Index>(m), static_cast<Index>(cov_cols.size()));
  for (std::size_t c = 0; c < cov_cols.size(); ++c) {
    s.covariate_names.push_back(t.header[cov_cols[c]]);
    for (std::size_t r = 0; r < m; ++r) s.covariates(static_cast<Index>(r), static_cast<Index>(c)) = t.number(r, cov_cols[c]);
  }
  s.validate();
  return s;
}

inline Dataset dataset_from_table(const Table& t) {
  const auto id_col = t.require("unit_id");
  const auto y_col = t.require("y");
  const auto x_col = t.find("x");
  const auto w_col = t.find("w_e");
  const auto n = t.rows.size();
  Labels ids;
  Vector y(static_cast<Index>(n));
  std::optional<Vector> x;
  if (x_col) x = Vector(static_cast<Index>(n));
  Vector w = Vector::Ones(static_cast<Index>(n));
  for (std::size_t r = 0; r < n; ++r) {
    ids.push_back(t.rows[r][id_col]);
    y[static_cast<Index>(r)] = t.number(r, y_col);
    if (x_col) (*x)[static_cast<Index>(r)] = t.number(r, *x_col);
    if (w_col) w[static_cast<Index>(r)] = t.number(r, *w_col);
  }
  std::vector<std::size_t> ctrl_cols;
  std::map<std::string, Labels> labels;
  for (std::size_t k = 0; k < t.header.size(); ++k) {
    if (k == id_col || k == y_col || (x_col && k == *x_col) || (w_col && k == *w_col)) continue;
    if (starts_with(t.header[k], "pi_")) {
      ctrl_cols.push_back(k);
      continue;
    }
    Labels col;
    for (const auto& row : t.rows) col.push_back(row[k]);
    labels[t.header[k]] = std::move(col);
  }
  Matrix controls(static_cast<Index>(n), static_cast<Index>(ctrl_cols.size()));
  Labels names;
  for (std::size_t c = 0; c < ctrl_cols.size(); ++c) {
    names.push_back(t.header[ctrl_cols[c]]);
    for (std::size_t r = 0; r < n; ++r) controls(static_cast<Index>(r), static_cast<Index>(c)) = t.number(r, ctrl_cols[c]);
  }
  try {
    auto d = Dataset::make(std::move(ids), std::move(y), std::move(x), std::move(controls), std::move(names), std::move(w));
    d.labels = std::move(labels);
    d.validate();
    return d;
  } catch (const ValidationError& e) {
    throw ValidationError(t.source + ": " + e.what());
  }
}

/// Cross-references a long-format share table against unit and shift ids.
inline ShareMatrix shares_from_table(const Table& t, const Labels& unit_ids, const Labels& shift_ids, Labels* warnings) {
  const auto u_col = t.require("unit_id");
  const auto s_col = t.require("shift_id");
  const auto w_col = t.require("weight");
  std::map<std::string, Index> unit_index, shift_index;
  for (std::size_t i = 0; i < unit_ids.size(); ++i) unit_index[unit_ids[i]] = static_cast<Index>(i);
  for (std::size_t j = 0; j < shift_ids.size(); ++j) shift_index[shift_ids[j]] = static_cast<Index>(j);
  std::vector<ShareMatrix::Entry> entries;
  std::set<std::string> unknown_units, unknown_shifts;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& u = t.rows[r][u_col];
    const auto& s = t.rows[r][s_col];
    const double w = t.number(r, w_col);
    if (!std::isfinite(w)) {
      throw ValidationError(t.source + ": row " + std::to_string(r + 2) + ": share for unit '" + u + "', shift '" + s +
                            "' is not finite");
    }
    if (w < 0.0) {
      throw ValidationError(t.source + ": row " + std::to_string(r + 2) + ": negative share " + detail::format_double(w) +
                            " for unit '" + u + "', shift '" + s + "'");
    }
    auto iu = unit_index.find(u);
    auto is = shift_index.find(s);
    if (iu == unit_index.end()) unknown_units.insert(u);
    if (is == shift_index.end()) unknown_shifts.insert(s);
    if (iu == unit_index.end() || is == shift_index.end()) continue;
    entries.push_back({iu->second, is->second, w});
  }
  auto join = [](const std::set<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) out += (out.empty() ? "'" : ", '") + id + "'";
    return out;
  };
  if (!unknown_units.empty() || !unknown_shifts.empty()) {
    std::string msg = t.source + ": ids not found in the unit/shift tables;";
    if (!unknown_units.empty()) msg += " units " + join(unknown_units) + ";";
    if (!unknown_shifts.empty()) msg += " shifts " + join(unknown_shifts) + ";";
    throw ValidationError(msg);
  }
  try {
    ShareMatrix shares(unit_ids, shift_ids, entries);
    if (warnings) {
      for (Index i : shares.zero_rows()) {
        warnings->push_back("unit '" + unit_ids[static_cast<std::size_t>(i)] + "' has no exposure (all-zero share row)");
      }
    }
    return shares;
  } catch (const ValidationError& e) {
    throw ValidationError(t.source + ": " + e.what());
  }
}

inline LoadedData load(const InputPaths& paths, Format format) {
  LoadedData out;
  out.shifts = shifts_from_table(read_table(paths.shifts, format));
  out.dataset = dataset_from_table(read_table(paths.units, format));
  out.shares = shares_from_table(read_table(paths.shares, format), out.dataset.unit_ids, out.shifts.ids, &out.warnings);
  return out;
}

inline LoadedData load_csv(const InputPaths& paths) { return load(paths, Format::csv); }
inline LoadedData load_json(const InputPaths& paths) { return load(paths, Format::json); }

// ---------------------------------------------------------------------------
// Serialization

inline Table shares_table(const ShareMatrix& shares) {
  Table t{"shares", {"unit_id", "shift_id", "weight"}, {}};
  for (const auto& e : shares.entries()) {
    t.rows.push_back({shares.row_ids()[static_cast<std::size_t>(e.row)], shares.col_ids()[static_cast<std::size_t>(e.col)],
                      detail::format_double(e.weight)});
  }
  return t;
}

inline Table shifts_table(const ShiftTable& s) {
  Table t{"shifts", {"shift_id", "value"}, {}};
  std::vector<const Labels*> label_cols;
  auto add = [&](const std::string& name, const Labels& col) {
    t.header.push_back(name);
    label_cols.push_back(&col);
  };
  if (s.cluster) add("cluster", *s.cluster);
  if (s.period) add("period", *s.period);
  if (s.exchange_group) add("exchange_group", *s.exchange_group);
  if (s.series) add("series", *s.series);
  for (const auto& [name, col] : s.extra) add(name, col);
  for (const auto& name : s.covariate_names) t.header.push_back(name);
  for (Index j = 0; j < s.size(); ++j) {
    Labels row{s.ids[static_cast<std::size_t>(j)], detail::format_double(s.values[j])};
    for (const auto* col : label_cols) row.push_back((*col)[static_cast<std::size_t>(j)]);
    for (Index k = 0; k < s.covariates.cols(); ++k) row.push_back(detail::format_double(s.covariates(j, k)));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline Table units_table(const Dataset& d) {
  Table t{"units", {"unit_id", "y"}, {}};
  if (d.regressor) t.header.push_back("x");
  t.header.push_back("w_e");
  for (const auto& name : d.control_names) t.header.push_back(name);
  for (const auto& [name, _] : d.labels) t.header.push_back(name);
  for (Index i = 0; i < d.size(); ++i) {
    Labels row{d.unit_ids[static_cast<std::size_t>(i)], detail::format_double(d.outcome[i])};
    if (d.regressor) row.push_back(detail::format_double((*d.regressor)[i]));
    row.push_back(detail::format_double(d.raw_weights[i]));
    for (Index k = 0; k < d.controls.cols(); ++k) row.push_back(detail::format_double(d.controls(i, k)));
    for (const auto& [_, col] : d.labels) row.push_back(col[static_cast<std::size_t>(i)]);
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline std::string to_csv(const Table& t) {
  std::ostringstream os;
  auto line = [&](const Labels& cells) {
    for (std::size_t k = 0; k < cells.size(); ++k) os << (k ? "," : "") << detail::csv_escape(cells[k]);
    os << '\n';
  };
  line(t.header);
  for (const auto& row : t.rows) line(row);
  return os.str();
}

/// Numeric-looking cells become JSON numbers, everything else strings.
inline nlohmann::json to_json(const Table& t, const std::set<std::string>& string_columns) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& row : t.rows) {
    nlohmann::json rec = nlohmann::json::object();
    for (std::size_t k = 0; k < t.header.size(); ++k) {
      const auto& name = t.header[k];
      auto v = detail::parse_double(row[k]);
      if (!string_columns.count(name) && v && std::isfinite(*v)) rec[name] = *v;
      else rec[name] = row[k];
    }
    arr.push_back(std::move(rec));
  }
  return arr;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << text;
}

inline void save(const LoadedData& data, const InputPaths& paths, Format format) {
  const auto shares = shares_table(data.shares);
  const auto shifts = shifts_table(data.shifts);
  const auto units = units_table(data.dataset);
  if (format == Format::csv) {
    write_text(paths.shares, to_csv(shares));
    write_text(paths.shifts, to_csv(shifts));
    write_text(paths.units, to_csv(units));
    return;
  }
  // Ids and label columns stay strings so "007" survives the trip.
  std::set<std::string> unit_strings{"unit_id"}, shift_strings{"shift_id", "cluster", "period", "exchange_group", "series"};
  for (const auto& [name, _] : data.dataset.labels) unit_strings.insert(name);
  for (const auto& [name, _] : data.shifts.extra) shift_strings.insert(name);
  write_text(paths.shares, to_json(shares, {"unit_id", "shift_id"}).dump(1) + "\n");
  write_text(paths.shifts, to_json(shifts, shift_strings).dump(1) + "\n");
  write_text(paths.units, to_json(units, unit_strings).dump(1) + "\n");
}

}  // namespace shiftshare
