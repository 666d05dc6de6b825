#include "htmle/csv.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "htmle/errors.hpp"

namespace htmle {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

double parse_number(const std::string& field, const std::string& column,
                    std::size_t row) {
  const std::string ctx =
      "column '" + column + "', data row " + std::to_string(row);
  if (field.empty())
    throw DataError("missing value in " + ctx);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size())
    throw DataError("non-numeric value '" + field + "' in " + ctx);
  if (!std::isfinite(v))
    throw DataError("non-finite value in " + ctx);
  return v;
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  // %.17g round-trips every finite double.
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

ColumnSchema load_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open schema file '" + path + "'");
  ColumnSchema schema;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string s = trim(line);
    if (s.empty()) continue;
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("schema line " + std::to_string(lineno) +
                        " is not of the form column=E|W");
    std::string col = trim(s.substr(0, eq));
    std::string role = trim(s.substr(eq + 1));
    if (col.empty())
      throw ConfigError("schema line " + std::to_string(lineno) +
                        " has an empty column name");
    for (const auto& existing : schema.e_columns)
      if (existing == col)
        throw ConfigError("schema assigns column '" + col + "' twice");
    for (const auto& existing : schema.w_columns)
      if (existing == col)
        throw ConfigError("schema assigns column '" + col + "' twice");
    if (role == "E")
      schema.e_columns.push_back(col);
    else if (role == "W")
      schema.w_columns.push_back(col);
    else
      throw ConfigError("schema line " + std::to_string(lineno) +
                        ": role must be E or W, got '" + role + "'");
  }
  return schema;
}

HierarchicalDataset parse_csv(std::istream& in, const ColumnSchema& schema,
                              WeightScheme scheme) {
  std::string line;
  if (!std::getline(in, line))
    throw DataError("CSV file is empty");
  const std::vector<std::string> header = split_commas(line);

  auto col_of = [&](const std::string& name) {
    for (std::size_t k = 0; k < header.size(); ++k)
      if (header[k] == name) return static_cast<int>(k);
    return -1;
  };

  const int id_col = col_of("cluster_id");
  const int a_col = col_of("A");
  const int y_col = col_of("Y");
  if (id_col < 0) throw DataError("CSV is missing required column 'cluster_id'");
  if (a_col < 0) throw DataError("CSV is missing required column 'A'");
  if (y_col < 0) throw DataError("CSV is missing required column 'Y'");

  std::vector<int> e_cols, w_cols;
  for (const auto& name : schema.e_columns) {
    int k = col_of(name);
    if (k < 0) throw DataError("schema names column '" + name +
                               "' which is absent from the CSV");
    e_cols.push_back(k);
  }
  for (const auto& name : schema.w_columns) {
    int k = col_of(name);
    if (k < 0) throw DataError("schema names column '" + name +
                               "' which is absent from the CSV");
    w_cols.push_back(k);
  }
  // Every non-required CSV column must have a role.
  for (std::size_t k = 0; k < header.size(); ++k) {
    const int ki = static_cast<int>(k);
    if (ki == id_col || ki == a_col || ki == y_col) continue;
    bool classified = false;
    for (int c : e_cols) classified = classified || c == ki;
    for (int c : w_cols) classified = classified || c == ki;
    if (!classified)
      throw DataError("CSV column '" + header[k] +
                      "' is not classified by the schema");
  }

  HierarchicalDataset d;
  d.e_names = schema.e_columns;
  d.w_names = schema.w_columns;
  std::map<std::string, std::size_t> cluster_index;

  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const std::vector<std::string> fields = split_commas(line);
    if (fields.size() != header.size())
      throw DataError("data row " + std::to_string(row) + " has " +
                      std::to_string(fields.size()) + " fields, expected " +
                      std::to_string(header.size()));

    const std::string id = fields[static_cast<std::size_t>(id_col)];
    if (id.empty())
      throw DataError("data row " + std::to_string(row) +
                      " has an empty cluster_id");

    const double a = parse_number(fields[static_cast<std::size_t>(a_col)], "A", row);
    if (a != 0.0 && a != 1.0)
      throw DataError("column 'A' must be 0 or 1, data row " +
                      std::to_string(row));
    const double y = parse_number(fields[static_cast<std::size_t>(y_col)], "Y", row);
    if (!(y >= 0.0 && y <= 1.0))
      throw DataError("column 'Y' outside [0,1], data row " +
                      std::to_string(row));

    std::vector<double> env(e_cols.size());
    for (std::size_t k = 0; k < e_cols.size(); ++k)
      env[k] = parse_number(fields[static_cast<std::size_t>(e_cols[k])],
                            schema.e_columns[k], row);
    IndividualRecord rec;
    rec.cluster_id = id;
    rec.outcome = y;
    rec.w.resize(w_cols.size());
    for (std::size_t k = 0; k < w_cols.size(); ++k)
      rec.w[k] = parse_number(fields[static_cast<std::size_t>(w_cols[k])],
                              schema.w_columns[k], row);

    auto it = cluster_index.find(id);
    if (it == cluster_index.end()) {
      Cluster c;
      c.id = id;
      c.env = std::move(env);
      c.exposure = static_cast<int>(a);
      cluster_index.emplace(id, d.clusters.size());
      d.clusters.push_back(std::move(c));
      d.clusters.back().members.push_back(std::move(rec));
    } else {
      Cluster& c = d.clusters[it->second];
      if (static_cast<int>(a) != c.exposure)
        throw DataError("column 'A' varies within cluster '" + id + "'");
      for (std::size_t k = 0; k < env.size(); ++k)
        if (env[k] != c.env[k])
          throw DataError("column '" + schema.e_columns[k] +
                          "' varies within cluster '" + id + "'");
      c.members.push_back(std::move(rec));
    }
  }

  if (d.clusters.empty()) throw DataError("CSV contains no data rows");
  assign_weights(d, scheme);
  d.validate();
  return d;
}

HierarchicalDataset load_csv(const std::string& path, const ColumnSchema& schema,
                             WeightScheme scheme) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file '" + path + "'");
  return parse_csv(in, schema, scheme);
}

std::string dataset_to_csv(const HierarchicalDataset& d) {
  std::ostringstream out;
  out << "cluster_id,A,Y";
  for (const auto& n : d.e_names) out << ',' << n;
  for (const auto& n : d.w_names) out << ',' << n;
  out << '\n';
  for (const auto& c : d.clusters) {
    for (const auto& m : c.members) {
      out << c.id << ',' << c.exposure << ',' << format_double(m.outcome);
      for (double v : c.env) out << ',' << format_double(v);
      for (double v : m.w) out << ',' << format_double(v);
      out << '\n';
    }
  }
  return out.str();
}

void write_csv(const HierarchicalDataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << dataset_to_csv(d);
}

}  // namespace htmle
