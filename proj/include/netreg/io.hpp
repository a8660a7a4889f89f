#ifndef NETREG_IO_HPP
#define NETREG_IO_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "netreg/graph.hpp"
#include "netreg/rank_selection.hpp"
#include "netreg/simulation.hpp"
#include "netreg/tuner.hpp"

namespace netreg {

// ---------------------------------------------------------------------------
// Delimited text

/// A parsed CSV file: header plus rows of raw string fields.
struct CsvTable {
  std::string source;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row

  /// Column position by name, or -1.
  std::ptrdiff_t find(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return static_cast<std::ptrdiff_t>(c);
    return -1;
  }

  std::size_t require(const std::string& name) const {
    const auto c = find(name);
    if (c < 0) {
      std::string have;
      for (const auto& h : header) have += (have.empty() ? "" : ", ") + h;
      throw Error(source + ": missing column '" + name + "' (have: " + have + ")");
    }
    return static_cast<std::size_t>(c);
  }
};

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

/// Splits one record on commas; double quotes group fields and "" escapes a quote.
inline std::vector<std::string> split_csv_line(const std::string& line, const std::string& where) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = was_quoted = true;
    } else if (c == ',') {
      fields.push_back(was_quoted ? field : trim(field));
      field.clear();
      was_quoted = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw Error(where + ": unterminated quoted field");
  fields.push_back(was_quoted ? field : trim(field));
  return fields;
}

/// Reads a headed CSV; blank lines and lines starting with '#' are skipped.
inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  CsvTable table;
  table.source = path.string();
  std::string line;
  std::size_t number = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (number == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    const auto content = trim(line);
    if (content.empty() || content[0] == '#') continue;
    const std::string where = table.source + ":" + std::to_string(number);
    auto fields = split_csv_line(line, where);
    if (!have_header) {
      table.header = std::move(fields);
      std::set<std::string> seen;
      for (const auto& h : table.header) {
        if (h.empty()) throw Error(where + ": empty column name in header");
        if (!seen.insert(h).second) throw Error(where + ": duplicate column '" + h + "'");
      }
      have_header = true;
      continue;
    }
    if (fields.size() != table.header.size())
      throw Error(where + ": expected " + std::to_string(table.header.size()) + " fields, found " +
                  std::to_string(fields.size()));
    table.rows.push_back(std::move(fields));
    table.line_numbers.push_back(number);
  }
  if (!have_header) throw Error(table.source + ": file is empty (a header row is required)");
  return table;
}

/// Strict decimal parse of the whole field.
inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

/// Shortest text that reads back to the same double; "inf", "-inf", "nan" otherwise.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  if (ec != std::errc()) throw Error("format_double: conversion failed");
  return std::string(buf, ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos && trim(s) == s) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

/// Writes rows to `path` atomically enough for tests: write then close, error on failure.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
      : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw Error("cannot write " + path.string());
    row(header);
  }
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << csv_field(fields[i]);
    out_ << '\n';
  }
  void close() {
    out_.close();
    if (!out_) throw Error("failed writing " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Graph input

/// Edge list with string vertex ids, densified in order of first appearance.
inline WeightedGraph read_edge_list(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  const auto src = table.require("src"), dst = table.require("dst"),
             dist = table.require("distance");
  std::unordered_map<std::string, Index> ids;
  std::vector<std::string> labels;
  auto id_of = [&](const std::string& label, std::size_t line) {
    if (label.empty())
      throw Error(table.source + ":" + std::to_string(line) + ": empty vertex id");
    auto [it, inserted] = ids.emplace(label, static_cast<Index>(labels.size()));
    if (inserted) labels.push_back(label);
    return it->second;
  };
  std::vector<Edge> edges;
  edges.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const auto line = table.line_numbers[r];
    double d = 0.0;
    if (!parse_double(row[dist], d) || !std::isfinite(d) || d < 0)
      throw Error(table.source + ":" + std::to_string(line) + ": distance '" + row[dist] +
                  "' is not a finite nonnegative number");
    const Index a = id_of(row[src], line), b = id_of(row[dst], line);
    if (a == b)
      throw Error(table.source + ":" + std::to_string(line) + ": self-loop at vertex '" + row[src] +
                  "'");
    edges.push_back({a, b, d});
  }
  if (labels.empty()) throw Error(table.source + ": no edges");
  const auto n = static_cast<Index>(labels.size());
  return WeightedGraph(n, std::move(edges), std::move(labels));
}

/// vertex,index: the dense id assigned to each input vertex id.
inline void write_vertex_map(const std::filesystem::path& path, const WeightedGraph& g) {
  CsvWriter out(path, {"vertex", "index"});
  for (Index v = 0; v < g.num_vertices(); ++v) out.row({g.label(v), std::to_string(v)});
  out.close();
}

inline std::vector<std::string> read_vertex_map(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  const auto vc = table.require("vertex"), ic = table.require("index");
  std::vector<std::string> labels(table.rows.size());
  std::vector<char> seen(table.rows.size(), 0);
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    double idx = -1;
    if (!parse_double(table.rows[r][ic], idx) || idx < 0 || idx >= static_cast<double>(labels.size()) ||
        idx != std::floor(idx) || seen[static_cast<std::size_t>(idx)])
      throw Error(table.source + ":" + std::to_string(table.line_numbers[r]) +
                  ": index must be a unique integer in [0, rows)");
    seen[static_cast<std::size_t>(idx)] = 1;
    labels[static_cast<std::size_t>(idx)] = table.rows[r][vc];
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Vertex covariates

/// How a raw covariate column becomes design columns.
struct ColumnSchema {
  std::string name;
  bool categorical = false;
  std::vector<std::string> levels;  // sorted; levels[0] is the dropped reference
};

struct CovariateSchema {
  std::vector<ColumnSchema> columns;

  /// Expanded design column names: numeric columns as-is, categorical as name=level.
  std::vector<std::string> expanded_names() const {
    std::vector<std::string> out;
    for (const auto& c : columns) {
      if (!c.categorical) {
        out.push_back(c.name);
        continue;
      }
      for (std::size_t l = 1; l < c.levels.size(); ++l) out.push_back(c.name + "=" + c.levels[l]);
    }
    return out;
  }
};

struct VertexData {
  MatrixXd covariates;  // n x p expanded, without the intercept
  std::vector<std::string> names;
  VectorXd response;  // empty when the response column is absent
  CovariateSchema schema;
};

struct CovariateRequest {
  std::string id_column = "vertex";
  std::string response = "count";
  bool response_required = true;
  std::vector<std::string> columns;      // empty: every column except the id and response
  std::vector<std::string> categorical;  // forced categorical; others detected from values
};

/*
 * Reads the vertex table for a graph.  Every graph vertex needs a row.  A
 * column is categorical when listed or when any value is not a number; it is
 * one-hot expanded with the alphabetically first level dropped.  With a
 * schema from an earlier fit, the same columns and levels are reproduced.
 */
inline VertexData read_vertex_data(const std::filesystem::path& path, const WeightedGraph& graph,
                                   const CovariateRequest& req,
                                   const CovariateSchema* fitted = nullptr) {
  const auto table = read_csv(path);
  const auto id_col = table.require(req.id_column);
  const Index n = graph.num_vertices();
  std::unordered_map<std::string, Index> index;
  for (Index v = 0; v < n; ++v) index.emplace(graph.label(v), v);

  std::vector<std::ptrdiff_t> row_of(static_cast<std::size_t>(n), -1);
  Index extra = 0;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& id = table.rows[r][id_col];
    auto it = index.find(id);
    if (it == index.end()) {
      ++extra;
      continue;
    }
    auto& slot = row_of[static_cast<std::size_t>(it->second)];
    if (slot >= 0)
      throw Error(table.source + ":" + std::to_string(table.line_numbers[r]) +
                  ": duplicate row for vertex '" + id + "'");
    slot = static_cast<std::ptrdiff_t>(r);
  }
  std::vector<std::string> missing;
  for (Index v = 0; v < n; ++v)
    if (row_of[static_cast<std::size_t>(v)] < 0) missing.push_back(graph.label(v));
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 5); ++i)
      list += (i ? ", " : "") + missing[i];
    throw Error(table.source + ": no row for " + std::to_string(missing.size()) +
                " graph vertex id(s), e.g. " + list);
  }
  if (extra > 0)
    warn(table.source + ": ignored " + std::to_string(extra) + " row(s) whose vertex is not in the graph");

  auto cell = [&](Index v, std::size_t c) -> const std::string& {
    return table.rows[static_cast<std::size_t>(row_of[static_cast<std::size_t>(v)])][c];
  };
  auto line_of = [&](Index v) {
    return table.line_numbers[static_cast<std::size_t>(row_of[static_cast<std::size_t>(v)])];
  };

  VertexData out;
  const auto resp_col = table.find(req.response);
  if (resp_col >= 0) {
    out.response.resize(n);
    for (Index v = 0; v < n; ++v) {
      double y = 0;
      if (!parse_double(cell(v, static_cast<std::size_t>(resp_col)), y) || !(y >= 0) ||
          y != std::floor(y) || !std::isfinite(y))
        throw Error(table.source + ":" + std::to_string(line_of(v)) + ": response '" + req.response +
                    "' must be a nonnegative integer, found '" +
                    cell(v, static_cast<std::size_t>(resp_col)) + "'");
      out.response[v] = y;
    }
  } else if (req.response_required) {
    table.require(req.response);
  }

  if (fitted) {
    out.schema = *fitted;
  } else {
    std::vector<std::string> names = req.columns;
    if (names.empty())
      for (const auto& h : table.header)
        if (h != req.id_column && h != req.response) names.push_back(h);
    for (const auto& name : req.categorical)
      if (std::find(names.begin(), names.end(), name) == names.end())
        throw Error("categorical column '" + name + "' is not among the covariate columns");
    for (const auto& name : names) {
      const auto c = table.require(name);
      if (name == req.id_column || name == req.response)
        throw Error("column '" + name + "' cannot be both a covariate and the id or response");
      ColumnSchema col{name, false, {}};
      col.categorical =
          std::find(req.categorical.begin(), req.categorical.end(), name) != req.categorical.end();
      for (Index v = 0; v < n && !col.categorical; ++v) {
        double x = 0;
        if (!parse_double(cell(v, c), x)) col.categorical = true;
      }
      if (col.categorical) {
        std::set<std::string> levels;
        for (Index v = 0; v < n; ++v) levels.insert(cell(v, c));
        col.levels.assign(levels.begin(), levels.end());
        if (col.levels.size() < 2)
          warn("categorical column '" + name + "' has a single level and contributes no columns");
      }
      out.schema.columns.push_back(std::move(col));
    }
  }

  out.names = out.schema.expanded_names();
  out.covariates = MatrixXd::Zero(n, static_cast<Index>(out.names.size()));
  Index at = 0;
  for (const auto& col : out.schema.columns) {
    const auto c = table.require(col.name);
    if (!col.categorical) {
      for (Index v = 0; v < n; ++v) {
        double x = 0;
        if (!parse_double(cell(v, c), x) || !std::isfinite(x))
          throw Error(table.source + ":" + std::to_string(line_of(v)) + ": column '" + col.name +
                      "' value '" + cell(v, c) + "' is not a finite number");
        out.covariates(v, at) = x;
      }
      ++at;
      continue;
    }
    for (Index v = 0; v < n; ++v) {
      const auto& value = cell(v, c);
      const auto pos = std::lower_bound(col.levels.begin(), col.levels.end(), value);
      if (pos == col.levels.end() || *pos != value)
        throw Error(table.source + ":" + std::to_string(line_of(v)) + ": column '" + col.name +
                    "' has level '" + value + "' unseen when the model was fitted");
      const auto level = static_cast<Index>(pos - col.levels.begin());
      if (level > 0) out.covariates(v, at + level - 1) = 1.0;
    }
    at += static_cast<Index>(col.levels.size()) - (col.levels.empty() ? 0 : 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string join_ranks(const std::vector<Index>& ranks) {
  std::string s;
  for (std::size_t i = 0; i < ranks.size(); ++i) s += (i ? ";" : "") + std::to_string(ranks[i]);
  return s;
}

inline std::vector<Index> split_ranks(const std::string& s) {
  std::vector<Index> out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, ';')) {
    double x = 0;
    if (!parse_double(trim(part), x) || x < 0 || x != std::floor(x))
      throw Error("rank list '" + s + "' must hold nonnegative integers separated by ';'");
    out.push_back(static_cast<Index>(x));
  }
  return out;
}

/// Predictor names with the intercept first.
inline std::vector<std::string> predictor_names(const std::vector<std::string>& covariates) {
  std::vector<std::string> out{"intercept"};
  out.insert(out.end(), covariates.begin(), covariates.end());
  return out;
}

/// Long format: predictor, tau, posterior, cumulative, selected.
inline void write_rank_report(const std::filesystem::path& path, const RankSelection& sel,
                              const std::vector<std::string>& predictors) {
  CsvWriter out(path, {"predictor", "tau", "posterior", "cumulative", "selected"});
  for (std::size_t j = 0; j < sel.posteriors.size(); ++j) {
    double cum = 0.0;
    const auto& post = sel.posteriors[j];
    for (Index l = 0; l < post.size(); ++l) {
      cum += post[l];
      out.row({predictors.at(j), std::to_string(l), format_double(post[l]), format_double(cum),
               l == sel.ranks[j] ? "1" : "0"});
    }
  }
  out.close();
}

/// One row per LOOP evaluation: v0, lambda, loop, tau (';'-joined).
inline void write_tuning_report(const std::filesystem::path& path,
                                const std::vector<TuneRecord>& records) {
  CsvWriter out(path, {"v0", "lambda", "loop", "tau"});
  for (const auto& r : records)
    out.row({format_double(r.v0), format_double(r.lambda),
             format_double(r.loop_infinite ? std::numeric_limits<double>::infinity() : r.loop),
             join_ranks(r.ranks)});
  out.close();
}

struct ComparisonRow {
  Index replicate = 0;
  std::string model;
  std::string stratum;
  double relative_error = 0.0;
};

inline std::vector<ComparisonRow> comparison_rows(const ComparisonReport& report) {
  std::vector<ComparisonRow> rows;
  for (const auto& m : report.models) {
    if (m.ok) {
      for (const auto& st : m.strata)
        rows.push_back({report.replicate, m.model, st.stratum, st.relative_error});
      continue;
    }
    // A failed model keeps its rows so the table stays rectangular.
    const auto strata = report.models.front().strata;
    for (const auto& st : strata)
      rows.push_back({report.replicate, m.model, st.stratum, std::numeric_limits<double>::quiet_NaN()});
  }
  return rows;
}

inline void write_comparison(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows) {
  CsvWriter out(path, {"replicate", "model", "stratum", "relative_error"});
  for (const auto& r : rows)
    out.row({std::to_string(r.replicate), r.model, r.stratum, format_double(r.relative_error)});
  out.close();
}

inline std::vector<ComparisonRow> read_comparison(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  const auto rc = table.require("replicate"), mc = table.require("model"),
             sc = table.require("stratum"), ec = table.require("relative_error");
  std::vector<ComparisonRow> rows;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    double rep = 0, err = 0;
    if (!parse_double(row[rc], rep) || rep != std::floor(rep))
      throw Error(table.source + ":" + std::to_string(table.line_numbers[r]) + ": bad replicate");
    if (row[ec] == "nan")
      err = std::numeric_limits<double>::quiet_NaN();
    else if (!parse_double(row[ec], err))
      throw Error(table.source + ":" + std::to_string(table.line_numbers[r]) + ": bad relative_error");
    rows.push_back({static_cast<Index>(rep), row[mc], row[sc], err});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// JSON helpers shared by the config, artifact and manifest

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + " is not valid JSON: " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  out.close();
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace netreg

#endif  // NETREG_IO_HPP
