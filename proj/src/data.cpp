#include "htmle/data.hpp"

#include <cmath>

#include "htmle/errors.hpp"

namespace htmle {

std::size_t HierarchicalDataset::n_individuals() const {
  std::size_t n = 0;
  for (const auto& c : clusters) n += c.size();
  return n;
}

int HierarchicalDataset::e_index(const std::string& name) const {
  for (std::size_t k = 0; k < e_names.size(); ++k)
    if (e_names[k] == name) return static_cast<int>(k);
  return -1;
}

int HierarchicalDataset::w_index(const std::string& name) const {
  for (std::size_t k = 0; k < w_names.size(); ++k)
    if (w_names[k] == name) return static_cast<int>(k);
  return -1;
}

void HierarchicalDataset::validate() const {
  if (clusters.size() < 2)
    throw DataError("dataset must contain at least two clusters, found " +
                    std::to_string(clusters.size()));
  for (const auto& c : clusters) {
    if (c.members.empty())
      throw DataError("cluster '" + c.id + "' is empty");
    if (c.exposure != 0 && c.exposure != 1)
      throw DataError("cluster '" + c.id + "' has non-binary exposure");
    if (c.env.size() != e_names.size())
      throw DataError("cluster '" + c.id + "' has wrong E length");
    double wsum = 0.0;
    for (const auto& m : c.members) {
      if (m.cluster_id != c.id)
        throw DataError("member of cluster '" + c.id +
                        "' carries mismatched cluster_id '" + m.cluster_id + "'");
      if (m.w.size() != w_names.size())
        throw DataError("cluster '" + c.id + "' has member with wrong W length");
      if (!(m.outcome >= 0.0 && m.outcome <= 1.0))
        throw DataError("cluster '" + c.id + "' has outcome outside [0,1]");
      if (!(m.weight > 0.0))
        throw DataError("cluster '" + c.id + "' has non-positive member weight");
      for (double v : m.w)
        if (!std::isfinite(v))
          throw DataError("cluster '" + c.id + "' has non-finite W value");
      wsum += m.weight;
    }
    for (double v : c.env)
      if (!std::isfinite(v))
        throw DataError("cluster '" + c.id + "' has non-finite E value");
    if (weight_scheme == WeightScheme::PerCluster &&
        std::fabs(wsum - 1.0) > 1e-10)
      throw DataError("cluster '" + c.id + "' member weights sum to " +
                      std::to_string(wsum) + ", expected 1");
  }
}

void assign_weights(HierarchicalDataset& d, WeightScheme scheme) {
  d.weight_scheme = scheme;
  std::size_t total = d.n_individuals();
  const double j = static_cast<double>(d.n_clusters());
  for (auto& c : d.clusters) {
    if (c.members.empty()) throw DataError("cluster '" + c.id + "' is empty");
    const double w = scheme == WeightScheme::PerCluster
                         ? 1.0 / static_cast<double>(c.size())
                         : j / static_cast<double>(total);
    for (auto& m : c.members) m.weight = w;
  }
}

double cluster_outcome(const Cluster& c) {
  double y = 0.0;
  for (const auto& m : c.members) y += m.weight * m.outcome;
  // Summing N terms of size 1/N accumulates rounding that can land a hair
  // outside [0,1]; the weighted mean is in [0,1] by construction, so clamp.
  return std::min(std::max(y, 0.0), 1.0);
}

std::map<std::string, std::vector<double>> aggregate_covariates(
    const HierarchicalDataset& d, const std::vector<std::string>& which) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& name : which) {
    const int k = d.w_index(name);
    if (k < 0)
      throw DataError("unknown individual-level covariate '" + name + "'");
    std::vector<double> means;
    means.reserve(d.n_clusters());
    for (const auto& c : d.clusters) {
      double s = 0.0;
      for (const auto& m : c.members) s += m.w[static_cast<std::size_t>(k)];
      means.push_back(s / static_cast<double>(c.size()));
    }
    out.emplace(name, std::move(means));
  }
  return out;
}

}  // namespace htmle
