#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "c2fl/core_model.hpp"

namespace c2fl {

/// Samples are stored column-per-sample. `ids` carries each sample's row in
/// the source it was generated or imported from; it survives subsampling
/// and partitioning and keys per-sample teacher outputs.
struct LabeledDataset {
  Matrix inputs;  // input_dim x n
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  int input_dim() const { return static_cast<int>(inputs.rows()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }

  void validate() const;
  /// Samples at the given positions, in the given order.
  LabeledDataset subset(std::span<const std::size_t> positions) const;
  std::vector<std::size_t> positions_of_class(int c) const;
  std::vector<std::size_t> class_histogram() const;
  Matrix gather(std::span<const std::size_t> positions) const;
};

/// Per-class sample counts, head class first: counts[0] >= counts[1] >= ...
struct ClassCounts {
  std::vector<std::int64_t> counts;

  std::size_t num_classes() const { return counts.size(); }
  std::int64_t total() const;
};

struct PartitionSpec {
  int num_clients = 1;
  double alpha = 0.5;
  std::uint64_t seed = 0;
};

/// n_c = round(n_max * IF^(-c / (C - 1))).
ClassCounts make_longtail_counts(std::int64_t n_max, int num_classes, double imbalance_factor);

/// Keeps exactly counts[c] samples of class c, chosen by seeded shuffle.
/// Output keeps the input's relative order.
LabeledDataset subsample_longtail(const LabeledDataset& dataset, const ClassCounts& counts,
                                  std::uint64_t seed);

/// Per-class Dirichlet(alpha) split with largest-remainder rounding. Every
/// client ends up with at least one sample.
std::vector<LabeledDataset> dirichlet_partition(const LabeledDataset& dataset,
                                                const PartitionSpec& spec);

/// Same split as dirichlet_partition, as a num_clients x C count table.
std::vector<std::vector<std::int64_t>> partition_counts(const std::vector<LabeledDataset>& shards,
                                                        int num_classes);

/// Isotropic Gaussian blobs around seeded random centers of norm
/// `separation`. Samples are class-major; ids are 0..n-1.
LabeledDataset synth_blobs(int num_classes, int input_dim, int n_per_class, double spread,
                           std::uint64_t seed, double separation = 4.0);

/// Splits a class-major pool into (first `head` per class, the rest).
std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& dataset,
                                                          int head_per_class);

enum class ClassGroup { many, medium, few };
const char* group_name(ClassGroup g);
inline constexpr ClassGroup kAllGroups[] = {ClassGroup::many, ClassGroup::medium, ClassGroup::few};

/// Many if n_c > hi, Few if n_c < lo, else Medium.
std::vector<ClassGroup> split_many_medium_few(const ClassCounts& counts,
                                              std::pair<std::int64_t, std::int64_t> hi_lo);

/// Directory container: manifest.json + data.f32 + labels.u32 (little-endian).
LabeledDataset load_dataset_dir(const std::filesystem::path& dir);
void save_dataset_dir(const LabeledDataset& dataset, const std::filesystem::path& dir);

}  // namespace c2fl
