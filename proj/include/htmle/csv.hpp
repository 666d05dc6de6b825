#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "htmle/data.hpp"

namespace htmle {

// Role assignment for the dataset columns beyond the required
// cluster_id, A, Y. Loaded from a plain key=value file: one `column=E` or
// `column=W` entry per line; '#' starts a comment.
struct ColumnSchema {
  std::vector<std::string> e_columns;
  std::vector<std::string> w_columns;
};

ColumnSchema load_schema(const std::string& path);

// Reads a long-format CSV (one row per individual; header row required with
// columns cluster_id, A, Y plus the schema-classified covariates).
// Enforces at ingestion: A in {0,1} and constant within cluster, E constant
// within cluster, Y in [0,1], no missing/non-numeric fields. Cluster order
// follows first appearance in the file; member order follows row order.
HierarchicalDataset load_csv(const std::string& path, const ColumnSchema& schema,
                             WeightScheme scheme = WeightScheme::PerCluster);
HierarchicalDataset parse_csv(std::istream& in, const ColumnSchema& schema,
                              WeightScheme scheme = WeightScheme::PerCluster);

// Writes the dataset back to CSV with round-trip-exact numeric formatting.
void write_csv(const HierarchicalDataset& d, const std::string& path);
std::string dataset_to_csv(const HierarchicalDataset& d);

// Round-trip-exact formatting for a double (shortest %.17g form).
std::string format_double(double v);

}  // namespace htmle
