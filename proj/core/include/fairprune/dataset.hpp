#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairprune/errors.hpp"

namespace fairprune {

class Model;

enum class Partition : std::uint8_t { train = 0, val = 1, test = 2, all = 3 };

// Feature vectors with target labels and sensitive-group labels. Immutable
// after construction by convention; safe to share across threads.
class GroupedDataset {
 public:
  std::size_t row_count() const { return labels_.size(); }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t group_count() const { return group_names_.size(); }
  std::size_t class_count() const { return class_names_.size(); }

  std::span<const double> row(std::size_t i) const {
    return {features_.data() + i * feature_dim_, feature_dim_};
  }
  const std::vector<double>& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<int>& groups() const { return groups_; }
  const std::vector<std::string>& group_names() const { return group_names_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  bool has_split_tags() const { return !split_tags_.empty(); }
  const std::vector<Partition>& split_tags() const { return split_tags_; }

  // Row indices in a partition. With no split tags every partition resolves
  // to all rows.
  std::vector<std::size_t> rows_in(Partition p) const;
  std::vector<std::size_t> rows_of_group(int group, Partition p) const;

  // Checks invariants: ranges, finiteness, no empty sensitive group.
  void validate() const;

  static GroupedDataset build(std::size_t feature_dim, std::vector<double> features,
                              std::vector<int> labels, std::vector<int> groups,
                              std::vector<std::string> group_names,
                              std::vector<std::string> class_names,
                              std::vector<Partition> split_tags = {},
                              std::vector<std::string> feature_names = {});

  const std::vector<std::string>& feature_names() const { return feature_names_; }

  GroupedDataset with_groups(std::vector<int> groups,
                             std::vector<std::string> group_names) const;

 private:
  std::size_t feature_dim_ = 0;
  std::vector<double> features_;  // row-major
  std::vector<int> labels_;
  std::vector<int> groups_;
  std::vector<std::string> group_names_;
  std::vector<std::string> class_names_;
  std::vector<Partition> split_tags_;
  std::vector<std::string> feature_names_;
};

// CSV format: header row names columns; "label" and "group" are required,
// an optional "split" column carries train/val/test tags, every other column
// is a numeric feature. Group and class name tables are built from distinct
// values in file order. Floats are written with 17 significant digits so a
// save/load round-trip is exact.
GroupedDataset load_csv(const std::string& path);
void save_csv(const GroupedDataset& data, const std::string& path);

// Recipe for a synthetic group-labeled dataset where the class signal of each
// group lives only in that group's exclusive feature indices. Shared features
// carry noise plus a weak common signal, so a group-agnostic pruner can
// discard weights that only one group depends on.
struct SyntheticSpec {
  // cell_counts[group][class] = rows drawn for that (group, class) cell.
  std::vector<std::vector<std::size_t>> cell_counts;
  std::size_t feature_dim = 8;
  // Disjoint index sets into [0, feature_dim).
  std::vector<std::vector<std::size_t>> exclusive_features;
  double noise_scale = 1.0;
  double class_separation = 2.0;
  // Strength of the class signal on shared features, as a fraction of
  // class_separation. 0 makes shared features pure noise.
  double shared_signal_fraction = 0.1;
  // Append the group index as one-hot features (mirrors group-correlated
  // appearance cues in face data).
  bool append_group_onehot = true;
  std::uint64_t seed = 0;

  std::size_t group_count() const { return cell_counts.size(); }
  std::size_t class_count() const {
    return cell_counts.empty() ? 0 : cell_counts[0].size();
  }

  static SyntheticSpec uniform(std::size_t groups, std::size_t classes,
                               std::size_t rows_per_cell);
};

GroupedDataset synthesize_biased(const SyntheticSpec& spec);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

// Stratified by (group, class) cell; every nonempty cell contributes to
// train. Fractions must sum to 1 within 1e-9.
GroupedDataset split(const GroupedDataset& data, const SplitFractions& fractions,
                     std::uint64_t seed);

struct EmbeddingMatrix {
  std::vector<double> values;  // rows x cols, row-major
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// Penultimate-layer activations for every row of the dataset.
EmbeddingMatrix extract_embeddings(const Model& model, const GroupedDataset& data);

struct KMeansResult {
  std::vector<int> labels;
  std::vector<double> centroids;  // k x dim, row-major
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> inertia_trace;  // one entry per Lloyd iteration
};

// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded at
// the point farthest from its current centroid. Final labels are relabeled by
// descending cluster size so equal seeds give identical outputs.
KMeansResult kmeans(std::span<const double> points, std::size_t n, std::size_t dim,
                    std::size_t k, std::uint64_t seed, std::size_t max_iters = 100);

// Replaces the sensitive groups with k-means clusters of the model's
// embeddings. The caller keeps the original dataset for evaluation against
// true groups.
GroupedDataset pseudo_groups(const GroupedDataset& data, const Model& model,
                             std::size_t k, std::uint64_t seed);

// Adjusted Rand index between two labelings of the same rows.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

}  // namespace fairprune
