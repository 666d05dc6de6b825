#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace htmle {

// Individual weights alpha_ij. PerCluster gives every cluster total weight 1
// (alpha_ij = 1/N_j); Pooled weights individuals equally across the study
// (alpha_ij = J / sum_j N_j, grand total J).
enum class WeightScheme { PerCluster, Pooled };

struct IndividualRecord {
  std::string cluster_id;
  std::vector<double> w;  // individual-level covariates, dataset w_names order
  double outcome = 0.0;   // in [0,1]
  double weight = 0.0;    // alpha_ij > 0
};

struct Cluster {
  std::string id;
  std::vector<double> env;  // cluster-level covariates, dataset e_names order
  int exposure = 0;         // binary
  std::vector<IndividualRecord> members;

  std::size_t size() const { return members.size(); }
};

// A cross-sectional hierarchical study: J independent clusters, each carrying
// cluster-level covariates E, one binary exposure A, and member-level
// covariates W with outcomes in [0,1]. Treated as immutable once built.
struct HierarchicalDataset {
  std::vector<Cluster> clusters;
  std::vector<std::string> e_names;
  std::vector<std::string> w_names;
  WeightScheme weight_scheme = WeightScheme::PerCluster;

  std::size_t n_clusters() const { return clusters.size(); }
  std::size_t n_individuals() const;

  // Index of a named column, or -1.
  int e_index(const std::string& name) const;
  int w_index(const std::string& name) const;

  // Checks every structural invariant (J >= 2, nonempty clusters, covariate
  // lengths, weight sums under PerCluster, outcome/exposure domains).
  // Throws DataError on the first violation, naming cluster and field.
  void validate() const;
};

// Fills member weights according to the scheme.
void assign_weights(HierarchicalDataset& d, WeightScheme scheme);

// Weighted cluster-level outcome Y^c_j = sum_i alpha_ij * Y_ij.
double cluster_outcome(const Cluster& c);

// Per-cluster plain means (1/N_j) sum_i W_ij of the requested W columns.
// Unknown names raise DataError.
std::map<std::string, std::vector<double>> aggregate_covariates(
    const HierarchicalDataset& d, const std::vector<std::string>& which);

}  // namespace htmle
