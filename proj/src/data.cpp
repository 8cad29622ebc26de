#include "c2fl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "c2fl/binary_io.hpp"
#include "c2fl/errors.hpp"
#include "c2fl/rng.hpp"

namespace c2fl {

namespace binary_io {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace binary_io

void LabeledDataset::validate() const {
  if (static_cast<std::size_t>(inputs.cols()) != labels.size() || ids.size() != labels.size())
    throw ShapeError("dataset: samples, labels and ids differ in length");
  std::set<std::string> names(class_names.begin(), class_names.end());
  if (names.size() != class_names.size()) throw ConfigError("dataset: duplicate class names");
  for (int y : labels)
    if (y < 0 || y >= num_classes())
      throw ConfigError("dataset: label " + std::to_string(y) + " out of range");
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> positions) const {
  LabeledDataset out;
  out.class_names = class_names;
  out.inputs = gather(positions);
  out.labels.reserve(positions.size());
  out.ids.reserve(positions.size());
  for (std::size_t p : positions) {
    out.labels.push_back(labels.at(p));
    out.ids.push_back(ids.at(p));
  }
  return out;
}

std::vector<std::size_t> LabeledDataset::positions_of_class(int c) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == c) out.push_back(i);
  return out;
}

std::vector<std::size_t> LabeledDataset::class_histogram() const {
  std::vector<std::size_t> hist(class_names.size(), 0);
  for (int y : labels) ++hist.at(static_cast<std::size_t>(y));
  return hist;
}

Matrix LabeledDataset::gather(std::span<const std::size_t> positions) const {
  Matrix out(inputs.rows(), static_cast<Eigen::Index>(positions.size()));
  for (std::size_t j = 0; j < positions.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = inputs.col(static_cast<Eigen::Index>(positions[j]));
  return out;
}

std::int64_t ClassCounts::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

ClassCounts make_longtail_counts(std::int64_t n_max, int num_classes, double imbalance_factor) {
  if (num_classes < 2) throw ConfigError("long-tail profile needs at least 2 classes");
  if (!(imbalance_factor >= 1.0)) throw ConfigError("imbalance factor must be >= 1");
  if (static_cast<double>(n_max) / imbalance_factor < 1.0)
    throw ConfigError("n_max / imbalance factor must be >= 1");
  ClassCounts out;
  out.counts.resize(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    const double exponent = -static_cast<double>(c) / static_cast<double>(num_classes - 1);
    const double n = static_cast<double>(n_max) * std::pow(imbalance_factor, exponent);
    out.counts[static_cast<std::size_t>(c)] = std::max<std::int64_t>(1, std::llround(n));
  }
  return out;
}

LabeledDataset subsample_longtail(const LabeledDataset& dataset, const ClassCounts& counts,
                                  std::uint64_t seed) {
  if (counts.num_classes() != static_cast<std::size_t>(dataset.num_classes()))
    throw ShapeError("class counts do not match dataset classes");
  Rng rng(seed);
  std::vector<std::size_t> keep;
  for (int c = 0; c < dataset.num_classes(); ++c) {
    auto positions = dataset.positions_of_class(c);
    const auto want = counts.counts[static_cast<std::size_t>(c)];
    if (static_cast<std::int64_t>(positions.size()) < want)
      throw ConfigError("class " + dataset.class_names[static_cast<std::size_t>(c)] + " has " +
                        std::to_string(positions.size()) + " samples, " + std::to_string(want) +
                        " requested");
    rng.shuffle(positions);
    keep.insert(keep.end(), positions.begin(), positions.begin() + want);
  }
  std::sort(keep.begin(), keep.end());
  return dataset.subset(keep);
}

namespace {

// Integer quotas proportional to `proportions` summing exactly to `total`.
std::vector<std::int64_t> largest_remainder(const std::vector<double>& proportions,
                                            std::int64_t total) {
  const std::size_t k = proportions.size();
  std::vector<std::int64_t> quota(k);
  std::vector<double> remainder(k);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = proportions[i] * static_cast<double>(total);
    quota[i] = static_cast<std::int64_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(quota[i]);
    assigned += quota[i];
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  // Rounding can in principle overshoot by floating error; trim from the end.
  for (std::size_t i = 0; assigned < total; i = (i + 1) % k) {
    ++quota[order[i]];
    ++assigned;
  }
  for (std::size_t i = k; assigned > total;) {
    i = (i == 0 ? k : i) - 1;
    if (quota[order[i]] > 0) {
      --quota[order[i]];
      --assigned;
    }
  }
  return quota;
}

}  // namespace

std::vector<LabeledDataset> dirichlet_partition(const LabeledDataset& dataset,
                                                const PartitionSpec& spec) {
  if (spec.num_clients < 1) throw ConfigError("partition.num_clients must be >= 1");
  if (!(spec.alpha > 0.0)) throw ConfigError("partition.alpha must be > 0");
  if (dataset.empty()) throw ConfigError("cannot partition an empty dataset");
  const auto k = static_cast<std::size_t>(spec.num_clients);
  if (dataset.size() < k)
    throw ConfigError("dataset has fewer samples than clients; some client would stay empty");

  Rng rng(spec.seed);
  std::vector<std::vector<std::size_t>> shards(k);
  for (int c = 0; c < dataset.num_classes(); ++c) {
    auto positions = dataset.positions_of_class(c);
    if (positions.empty()) continue;
    const auto proportions = rng.dirichlet(spec.alpha, k);
    const auto quota = largest_remainder(proportions, static_cast<std::int64_t>(positions.size()));
    rng.shuffle(positions);
    std::size_t next = 0;
    for (std::size_t client = 0; client < k; ++client)
      for (std::int64_t i = 0; i < quota[client]; ++i) shards[client].push_back(positions[next++]);
  }

  for (std::size_t client = 0; client < k; ++client) {
    if (!shards[client].empty()) continue;
    std::size_t largest = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (shards[j].size() > shards[largest].size()) largest = j;
    shards[client].push_back(shards[largest].back());
    shards[largest].pop_back();
  }

  std::vector<LabeledDataset> out;
  out.reserve(k);
  for (auto& shard : shards) {
    std::sort(shard.begin(), shard.end());
    out.push_back(dataset.subset(shard));
  }
  return out;
}

std::vector<std::vector<std::int64_t>> partition_counts(const std::vector<LabeledDataset>& shards,
                                                        int num_classes) {
  std::vector<std::vector<std::int64_t>> table;
  for (const auto& shard : shards) {
    std::vector<std::int64_t> row(static_cast<std::size_t>(num_classes), 0);
    for (int y : shard.labels) ++row.at(static_cast<std::size_t>(y));
    table.push_back(std::move(row));
  }
  return table;
}

LabeledDataset synth_blobs(int num_classes, int input_dim, int n_per_class, double spread,
                           std::uint64_t seed, double separation) {
  if (num_classes < 1 || input_dim < 1 || n_per_class < 1)
    throw ConfigError("synth_blobs: sizes must be positive");
  if (spread < 0.0) throw ConfigError("synth_blobs: spread must be non-negative");
  Rng rng(seed);
  Matrix centers(input_dim, num_classes);
  for (int c = 0; c < num_classes; ++c) {
    for (int i = 0; i < input_dim; ++i) centers(i, c) = rng.normal();
    centers.col(c) *= separation / centers.col(c).norm();
  }
  LabeledDataset out;
  const Eigen::Index n = static_cast<Eigen::Index>(num_classes) * n_per_class;
  out.inputs.resize(input_dim, n);
  Eigen::Index col = 0;
  for (int c = 0; c < num_classes; ++c) {
    out.class_names.push_back("class_" + std::to_string(c));
    for (int s = 0; s < n_per_class; ++s, ++col) {
      for (int i = 0; i < input_dim; ++i) out.inputs(i, col) = centers(i, c) + spread * rng.normal();
      out.labels.push_back(c);
      out.ids.push_back(static_cast<std::uint64_t>(col));
    }
  }
  return out;
}

std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& dataset,
                                                          int head_per_class) {
  std::vector<std::size_t> head, tail;
  for (int c = 0; c < dataset.num_classes(); ++c) {
    const auto positions = dataset.positions_of_class(c);
    for (std::size_t i = 0; i < positions.size(); ++i)
      (static_cast<int>(i) < head_per_class ? head : tail).push_back(positions[i]);
  }
  std::sort(head.begin(), head.end());
  std::sort(tail.begin(), tail.end());
  return {dataset.subset(head), dataset.subset(tail)};
}

const char* group_name(ClassGroup g) {
  switch (g) {
    case ClassGroup::many:
      return "many";
    case ClassGroup::medium:
      return "medium";
    case ClassGroup::few:
      return "few";
  }
  return "?";
}

std::vector<ClassGroup> split_many_medium_few(const ClassCounts& counts,
                                              std::pair<std::int64_t, std::int64_t> hi_lo) {
  const auto [hi, lo] = hi_lo;
  if (!(hi > lo && lo > 0)) throw ConfigError("group thresholds need hi > lo > 0");
  std::vector<ClassGroup> groups;
  groups.reserve(counts.num_classes());
  for (auto n : counts.counts)
    groups.push_back(n > hi ? ClassGroup::many : (n < lo ? ClassGroup::few : ClassGroup::medium));
  return groups;
}

LabeledDataset load_dataset_dir(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(binary_io::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  LabeledDataset out;
  int input_dim = 0, num_classes = 0;
  try {
    input_dim = manifest.at("input_dim").get<int>();
    num_classes = manifest.at("num_classes").get<int>();
    out.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (input_dim < 1 || num_classes < 1)
    throw FormatError("dataset manifest: input_dim and num_classes must be positive");
  if (static_cast<int>(out.class_names.size()) != num_classes)
    throw FormatError("dataset manifest: class_names length != num_classes");

  const auto data = binary_io::read_words<float>(dir / "data.f32");
  const auto labels = binary_io::read_words<std::uint32_t>(dir / "labels.u32");
  if (data.size() != labels.size() * static_cast<std::size_t>(input_dim))
    throw FormatError("dataset: data.f32 holds " + std::to_string(data.size()) +
                      " floats, expected " + std::to_string(labels.size()) + " x " +
                      std::to_string(input_dim));
  const auto n = static_cast<Eigen::Index>(labels.size());
  out.inputs.resize(input_dim, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (int i = 0; i < input_dim; ++i)
      out.inputs(i, j) = static_cast<double>(data[static_cast<std::size_t>(j) * input_dim + i]);
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] >= static_cast<std::uint32_t>(num_classes))
      throw FormatError("dataset: label " + std::to_string(labels[j]) + " at row " +
                        std::to_string(j) + " out of range");
    out.labels.push_back(static_cast<int>(labels[j]));
    out.ids.push_back(j);
  }
  try {
    out.validate();
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  return out;
}

void save_dataset_dir(const LabeledDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"input_dim", dataset.input_dim()},
                             {"num_classes", dataset.num_classes()},
                             {"class_names", dataset.class_names}};
  binary_io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(dataset.inputs.size()));
  for (Eigen::Index j = 0; j < dataset.inputs.cols(); ++j)
    for (Eigen::Index i = 0; i < dataset.inputs.rows(); ++i)
      data.push_back(static_cast<float>(dataset.inputs(i, j)));
  std::vector<std::uint32_t> labels(dataset.labels.begin(), dataset.labels.end());
  binary_io::write_words<float>(dir / "data.f32", data);
  binary_io::write_words<std::uint32_t>(dir / "labels.u32", labels);
}

}  // namespace c2fl
