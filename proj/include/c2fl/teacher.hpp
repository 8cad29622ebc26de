#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "c2fl/core_model.hpp"
#include "c2fl/data.hpp"

namespace c2fl {

inline constexpr const char* kDefaultPromptTemplate = "This is a {name}";
inline constexpr double kDefaultLogitScale = 100.0;

/// Replaces the single "{name}" placeholder.
std::string render_prompt(const std::string& prompt_template, const std::string& class_name);

/// One unit-norm text prototype per class (row c = class c).
struct PrototypeTable {
  std::string prompt_template = kDefaultPromptTemplate;
  std::vector<std::string> class_names;
  Matrix vectors;  // C x dim

  int dim() const { return static_cast<int>(vectors.cols()); }
  int num_classes() const { return static_cast<int>(vectors.rows()); }
  Vector prototype(int class_index) const;
};

struct TeacherOutput {
  Vector image_embedding;
  Vector probs;
};

/// softmax(scale * cos(embedding, prototype_c)).
Vector teacher_probs(const Vector& image_embedding, const PrototypeTable& table, double scale);

/// Seeded Gaussian-then-normalize prototype, keyed by (seed, prompted name).
PrototypeTable stub_prototypes(const std::vector<std::string>& class_names, int dim,
                               std::uint64_t seed,
                               const std::string& prompt_template = kDefaultPromptTemplate);

/// Frozen teacher: prototypes plus cached per-sample outputs keyed by
/// sample id. Read-only after construction.
class TeacherProvider {
 public:
  TeacherProvider(PrototypeTable table, std::unordered_map<std::uint64_t, Vector> embeddings,
                  double scale);

  const PrototypeTable& prototypes() const { return table_; }
  double scale() const { return scale_; }
  bool has_sample(std::uint64_t id) const { return cache_.contains(id); }
  const TeacherOutput& output(std::uint64_t id) const;
  const Vector& probs(std::uint64_t id) const { return output(id).probs; }
  /// C x n matrix of teacher probabilities for the given sample ids.
  Matrix probs_for(const std::vector<std::uint64_t>& ids) const;

 private:
  PrototypeTable table_;
  double scale_;
  std::unordered_map<std::uint64_t, TeacherOutput> cache_;
};

/// embedding(id) = normalize(prototype(label) + sigma * N(0, I)), seeded by
/// (seed, id).
Vector stub_sample_embedding(const PrototypeTable& table, int label, std::uint64_t sample_id,
                             double noise_sigma, std::uint64_t seed);

TeacherProvider stub_teacher(const LabeledDataset& dataset, int dim, double noise_sigma,
                             double scale, std::uint64_t seed);

/// Contents of a C2FL-EMB directory (manifest.json + vectors.f32).
struct EmbeddingFile {
  int dim = 0;
  std::string prompt_template = kDefaultPromptTemplate;
  std::string model;  // provenance, may be empty
  std::unordered_map<std::string, Vector> classes;
  std::unordered_map<std::uint64_t, Vector> samples;
  /// Keys in row order, for deterministic re-serialization.
  std::vector<std::string> keys;
  std::vector<std::string> warnings;

  PrototypeTable prototype_table(const std::vector<std::string>& class_names) const;
};

EmbeddingFile load_embeddings(const std::filesystem::path& dir);

/// Rows: classes in table order, then samples in ascending id order.
void save_embeddings(const std::filesystem::path& dir, const PrototypeTable& table,
                     const std::unordered_map<std::uint64_t, Vector>& samples = {},
                     const std::string& model = "");

/// Prototypes from the file. Per-sample embeddings come from the file where
/// present; samples missing from it fall back to the stub rule around the
/// loaded prototypes.
TeacherProvider file_teacher(const EmbeddingFile& file, const LabeledDataset& dataset,
                             double noise_sigma, double scale, std::uint64_t seed);

}  // namespace c2fl
