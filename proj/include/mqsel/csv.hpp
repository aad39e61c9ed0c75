#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mqsel/error.hpp"
#include "mqsel/model.hpp"

namespace mqsel {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

/// RFC 4180: comma delimiter, optional double-quoted fields with "" as the
/// escaped quote, LF or CRLF line ends, mandatory header row. A leading UTF-8
/// byte order mark is skipped. Rows are numbered from 1 at the header.
inline CsvTable parse_csv(const std::string& text, const std::string& source = "<input>") {
  CsvTable table;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  bool after_quote = false;
  std::size_t line = 1;
  std::size_t record_line = 1;
  std::size_t pos = text.rfind("\xEF\xBB\xBF", 0) == 0 ? 3 : 0;

  auto where = [&](std::size_t row) { return source + ": row " + std::to_string(row); };
  auto end_field = [&]() {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
    after_quote = false;
  };
  auto end_record = [&]() {
    end_field();
    const bool blank = record.size() == 1 && record.front().empty();
    if (!blank) {
      if (table.header.empty()) {
        table.header = std::move(record);
      } else {
        detail::require(record.size() == table.header.size(), ErrorCode::ParseError,
                        where(record_line) + ": expected " + std::to_string(table.header.size()) + " fields, found " +
                            std::to_string(record.size()));
        table.rows.push_back(std::move(record));
      }
    }
    record.clear();
  };

  for (; pos < text.size(); ++pos) {
    const char c = text[pos];
    if (quoted) {
      if (c == '"') {
        if (pos + 1 < text.size() && text[pos + 1] == '"') {
          field.push_back('"');
          ++pos;
        } else {
          quoted = false;
          after_quote = true;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    if (c == ',') {
      end_field();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && pos + 1 < text.size() && text[pos + 1] == '\n') ++pos;
      end_record();
      ++line;
      record_line = line;
    } else if (c == '"') {
      detail::require(!field_started && !after_quote, ErrorCode::ParseError,
                      where(line) + ", field " + std::to_string(record.size() + 1) + ": stray quote");
      quoted = true;
      field_started = true;
    } else {
      detail::require(!after_quote, ErrorCode::ParseError,
                      where(line) + ", field " + std::to_string(record.size() + 1) + ": text after closing quote");
      field.push_back(c);
      field_started = true;
    }
  }
  detail::require(!quoted, ErrorCode::ParseError, where(record_line) + ": unterminated quoted field");
  if (field_started || !record.empty()) end_record();
  detail::require(!table.header.empty(), ErrorCode::ParseError, source + ": missing header row");
  return table;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  detail::require(static_cast<bool>(in), ErrorCode::FileNotFound, "cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline CsvTable read_csv(const std::string& path) { return parse_csv(read_text_file(path), path); }

namespace detail {

inline double parse_cell(const std::string& cell, const std::string& source, std::size_t row, std::size_t col,
                         const std::string& column) {
  auto first = cell.find_first_not_of(" \t");
  auto last = cell.find_last_not_of(" \t");
  const std::string where = source + ": row " + std::to_string(row) + ", column " + std::to_string(col) + " ('" +
                            column + "')";
  require(first != std::string::npos, ErrorCode::ParseError, where + ": empty cell");
  const char* begin = cell.data() + first;
  const char* end = cell.data() + last + 1;
  if (*begin == '+') ++begin;
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  require(ec == std::errc() && ptr == end, ErrorCode::ParseError, where + ": '" + cell + "' is not a number");
  require(std::isfinite(value), ErrorCode::ParseError, where + ": non-finite value '" + cell + "'");
  return value;
}

}  // namespace detail

/// One experiment per CSV table. Predictor order is the column order of the
/// first table (or `reference_names` when given); every other table must carry
/// the same predictor names, in any order.
inline MultiExperimentDataset tables_to_dataset(const std::vector<CsvTable>& tables,
                                                const std::vector<std::string>& sources,
                                                const std::string& response_column,
                                                std::vector<std::string> reference_names = {}) {
  detail::require(!tables.empty(), ErrorCode::EmptyInput, "at least one data file is required");
  std::vector<Experiment> experiments;
  for (std::size_t k = 0; k < tables.size(); ++k) {
    const auto& t = tables[k];
    const auto& src = sources[k];
    std::map<std::string, std::size_t> position;
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      detail::require(position.emplace(t.header[c], c).second, ErrorCode::HeaderMismatch,
                      src + ": duplicate column '" + t.header[c] + "'");
    }
    const auto resp = position.find(response_column);
    detail::require(resp != position.end(), ErrorCode::ResponseColumnMissing,
                    src + ": no response column '" + response_column + "'");
    std::vector<std::string> names;
    for (const auto& h : t.header) {
      if (h != response_column) names.push_back(h);
    }
    if (reference_names.empty()) reference_names = names;
    const std::set<std::string> have(names.begin(), names.end());
    const std::set<std::string> want(reference_names.begin(), reference_names.end());
    if (have != want) {
      std::string missing, extra;
      for (const auto& w : want) {
        if (!have.count(w)) missing += (missing.empty() ? "" : ", ") + w;
      }
      for (const auto& h : have) {
        if (!want.count(h)) extra += (extra.empty() ? "" : ", ") + h;
      }
      detail::fail(ErrorCode::HeaderMismatch, src + ": predictor names differ (missing: [" + missing +
                                                  "], unexpected: [" + extra + "])");
    }
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    const auto p = static_cast<Eigen::Index>(reference_names.size());
    Experiment e{Eigen::VectorXd(n), Eigen::MatrixXd(n, p)};
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& row = t.rows[static_cast<std::size_t>(i)];
      const auto rowno = static_cast<std::size_t>(i) + 2;
      e.response(i) = detail::parse_cell(row[resp->second], src, rowno, resp->second + 1, response_column);
      for (Eigen::Index j = 0; j < p; ++j) {
        const auto c = position.at(reference_names[static_cast<std::size_t>(j)]);
        e.design(i, j) = detail::parse_cell(row[c], src, rowno, c + 1, t.header[c]);
      }
    }
    experiments.push_back(std::move(e));
  }
  return MultiExperimentDataset::validate(std::move(experiments), std::move(reference_names));
}

inline MultiExperimentDataset ingest_csv(const std::vector<std::string>& paths, const std::string& response_column,
                                         std::vector<std::string> reference_names = {}) {
  std::vector<CsvTable> tables;
  for (const auto& path : paths) tables.push_back(read_csv(path));
  return tables_to_dataset(tables, paths, response_column, std::move(reference_names));
}

/// 17 significant digits, enough to parse back to the same double.
inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

namespace detail {

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Response first, then the predictors in dataset order.
inline std::string experiment_to_csv(const MultiExperimentDataset& data, std::size_t k,
                                     const std::string& response_column) {
  std::string out = detail::csv_quote(response_column);
  for (const auto& name : data.predictor_names()) out += "," + detail::csv_quote(name);
  out += "\n";
  const auto& e = data.experiment(k);
  for (Eigen::Index i = 0; i < e.response.size(); ++i) {
    out += format_double(e.response(i));
    for (Eigen::Index j = 0; j < e.design.cols(); ++j) out += "," + format_double(e.design(i, j));
    out += "\n";
  }
  return out;
}

inline void write_experiment_csv(const std::string& path, const MultiExperimentDataset& data, std::size_t k,
                                 const std::string& response_column) {
  std::ofstream out(path, std::ios::binary);
  detail::require(static_cast<bool>(out), ErrorCode::FileNotFound, "cannot write '" + path + "'");
  out << experiment_to_csv(data, k, response_column);
  detail::require(static_cast<bool>(out), ErrorCode::FileNotFound, "write to '" + path + "' failed");
}

/// Keeps, per experiment, the `top` predictors with the largest absolute
/// correlation with the response, and returns the union in original order.
/// Constant columns have correlation 0; ties go to the lower index.
inline std::vector<std::size_t> screen_by_correlation(const MultiExperimentDataset& data, std::size_t top) {
  const std::size_t p = data.num_predictors();
  std::set<std::size_t> keep;
  for (const auto& e : data.experiments()) {
    const Eigen::VectorXd yc = e.response.array() - e.response.mean();
    std::vector<std::pair<double, std::size_t>> score;
    for (std::size_t j = 0; j < p; ++j) {
      const auto col = e.design.col(static_cast<Eigen::Index>(j));
      const Eigen::VectorXd xc = col.array() - col.mean();
      const double denom = xc.norm() * yc.norm();
      score.emplace_back(denom > 0.0 ? std::abs(xc.dot(yc)) / denom : 0.0, j);
    }
    std::stable_sort(score.begin(), score.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; r < std::min(top, p); ++r) keep.insert(score[r].second);
  }
  return {keep.begin(), keep.end()};
}

/// Same experiments restricted to the listed predictor columns.
inline MultiExperimentDataset select_predictors(const MultiExperimentDataset& data,
                                                const std::vector<std::size_t>& columns) {
  std::vector<Experiment> out;
  std::vector<std::string> names;
  for (auto j : columns) {
    detail::require(j < data.num_predictors(), ErrorCode::IndexOutOfRange, "predictor index out of range");
    names.push_back(data.predictor_names()[j]);
  }
  for (const auto& e : data.experiments()) {
    Experiment s{e.response, Eigen::MatrixXd(e.design.rows(), static_cast<Eigen::Index>(columns.size()))};
    for (std::size_t c = 0; c < columns.size(); ++c) {
      s.design.col(static_cast<Eigen::Index>(c)) = e.design.col(static_cast<Eigen::Index>(columns[c]));
    }
    out.push_back(std::move(s));
  }
  return MultiExperimentDataset::validate(std::move(out), std::move(names));
}

/// Rows `rows` of experiment k, as (response, design).
inline Experiment select_rows(const Experiment& e, const std::vector<std::size_t>& rows) {
  Experiment out{Eigen::VectorXd(static_cast<Eigen::Index>(rows.size())),
                 Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()), e.design.cols())};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto i = static_cast<Eigen::Index>(rows[r]);
    detail::require(i < e.response.size(), ErrorCode::IndexOutOfRange, "row index out of range");
    out.response(static_cast<Eigen::Index>(r)) = e.response(i);
    out.design.row(static_cast<Eigen::Index>(r)) = e.design.row(i);
  }
  return out;
}

}  // namespace mqsel
