#include "c2fl/teacher.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>

#include "json.hpp"

#include "c2fl/binary_io.hpp"
#include "c2fl/errors.hpp"
#include "c2fl/rng.hpp"

namespace c2fl {
namespace {

constexpr const char* kFormatMagic = "C2FL-EMB";
constexpr int kFormatVersion = 1;
constexpr double kNormTolerance = 1e-3;

Vector seeded_unit_gaussian(int dim, std::uint64_t seed) {
  Rng rng(seed);
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v(i) = rng.normal();
  return v / v.norm();
}

}  // namespace

std::string render_prompt(const std::string& prompt_template, const std::string& class_name) {
  const auto pos = prompt_template.find("{name}");
  if (pos == std::string::npos || prompt_template.find("{name}", pos + 1) != std::string::npos)
    throw ConfigError("prompt template must contain exactly one {name} placeholder");
  std::string out = prompt_template;
  out.replace(pos, 6, class_name);
  return out;
}

Vector PrototypeTable::prototype(int class_index) const {
  if (class_index < 0 || class_index >= num_classes())
    throw ConfigError("unknown class index " + std::to_string(class_index));
  return vectors.row(class_index).transpose();
}

Vector teacher_probs(const Vector& image_embedding, const PrototypeTable& table, double scale) {
  if (image_embedding.size() != table.dim())
    throw ShapeError("teacher embedding has dim " + std::to_string(image_embedding.size()) +
                     ", prototypes have dim " + std::to_string(table.dim()));
  if (scale < 0.0) throw ConfigError("teacher logit scale must be non-negative");
  const double norm = image_embedding.norm();
  Vector logits(table.num_classes());
  for (int c = 0; c < table.num_classes(); ++c) {
    const double pn = table.vectors.row(c).norm();
    const double cosine =
        (norm > 0.0 && pn > 0.0) ? table.vectors.row(c).dot(image_embedding) / (norm * pn) : 0.0;
    logits(c) = scale * cosine;
  }
  return softmax(logits);
}

PrototypeTable stub_prototypes(const std::vector<std::string>& class_names, int dim,
                               std::uint64_t seed, const std::string& prompt_template) {
  if (dim < 1) throw ConfigError("teacher dim must be positive");
  PrototypeTable table;
  table.prompt_template = prompt_template;
  table.class_names = class_names;
  table.vectors.resize(static_cast<Eigen::Index>(class_names.size()), dim);
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    const auto key = fnv1a(render_prompt(prompt_template, class_names[c]));
    table.vectors.row(static_cast<Eigen::Index>(c)) =
        seeded_unit_gaussian(dim, derive_seed(seed, {0x70726f746fULL, key})).transpose();
  }
  return table;
}

TeacherProvider::TeacherProvider(PrototypeTable table,
                                 std::unordered_map<std::uint64_t, Vector> embeddings,
                                 double scale)
    : table_(std::move(table)), scale_(scale) {
  if (!(scale > 0.0)) throw ConfigError("teacher.logit_scale must be > 0");
  for (auto& [id, emb] : embeddings) {
    Vector probs = teacher_probs(emb, table_, scale_);
    cache_.emplace(id, TeacherOutput{std::move(emb), std::move(probs)});
  }
}

const TeacherOutput& TeacherProvider::output(std::uint64_t id) const {
  auto it = cache_.find(id);
  if (it == cache_.end()) throw ConfigError("no teacher output for sample " + std::to_string(id));
  return it->second;
}

Matrix TeacherProvider::probs_for(const std::vector<std::uint64_t>& ids) const {
  Matrix out(table_.num_classes(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = probs(ids[j]);
  return out;
}

Vector stub_sample_embedding(const PrototypeTable& table, int label, std::uint64_t sample_id,
                             double noise_sigma, std::uint64_t seed) {
  if (noise_sigma < 0.0) throw ConfigError("teacher noise sigma must be non-negative");
  Rng rng(derive_seed(seed, {0x73616d706c65ULL, sample_id}));
  Vector e = table.prototype(label);
  for (Eigen::Index i = 0; i < e.size(); ++i) e(i) += noise_sigma * rng.normal();
  const double n = e.norm();
  return n > 0.0 ? Vector(e / n) : table.prototype(label);
}

TeacherProvider stub_teacher(const LabeledDataset& dataset, int dim, double noise_sigma,
                             double scale, std::uint64_t seed) {
  PrototypeTable table = stub_prototypes(dataset.class_names, dim, seed);
  std::unordered_map<std::uint64_t, Vector> embeddings;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    embeddings.emplace(dataset.ids[i], stub_sample_embedding(table, dataset.labels[i],
                                                             dataset.ids[i], noise_sigma, seed));
  return TeacherProvider(std::move(table), std::move(embeddings), scale);
}

PrototypeTable EmbeddingFile::prototype_table(const std::vector<std::string>& class_names) const {
  PrototypeTable table;
  table.prompt_template = prompt_template;
  table.class_names = class_names;
  table.vectors.resize(static_cast<Eigen::Index>(class_names.size()), dim);
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    auto it = classes.find(class_names[c]);
    if (it == classes.end())
      throw FormatError("embedding file has no prototype for class '" + class_names[c] + "'");
    table.vectors.row(static_cast<Eigen::Index>(c)) = it->second.transpose();
  }
  return table;
}

EmbeddingFile load_embeddings(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(binary_io::read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }

  EmbeddingFile file;
  std::size_t count = 0;
  std::vector<std::pair<std::string, std::size_t>> entries;
  try {
    if (manifest.at("format").get<std::string>() != kFormatMagic)
      throw FormatError(manifest_path.string() + ": bad magic, expected format \"C2FL-EMB\"");
    if (manifest.at("version").get<int>() != kFormatVersion)
      throw FormatError(manifest_path.string() + ": unsupported version");
    if (manifest.at("dtype").get<std::string>() != "f32le")
      throw FormatError(manifest_path.string() + ": dtype must be f32le");
    file.dim = manifest.at("dim").get<int>();
    count = manifest.at("count").get<std::size_t>();
    file.prompt_template = manifest.value("prompt_template", std::string(kDefaultPromptTemplate));
    file.model = manifest.value("model", std::string());
    for (const auto& e : manifest.at("entries"))
      entries.emplace_back(e.at("key").get<std::string>(), e.at("row").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  if (file.dim < 1) throw FormatError("embedding manifest: dim must be positive");
  if (entries.size() != count)
    throw FormatError("embedding manifest: count " + std::to_string(count) + " but " +
                      std::to_string(entries.size()) + " entries");

  const auto payload = binary_io::read_words<float>(dir / "vectors.f32");
  if (payload.size() != count * static_cast<std::size_t>(file.dim))
    throw FormatError("embedding payload holds " + std::to_string(payload.size()) +
                      " floats, manifest declares " + std::to_string(count) + " x " +
                      std::to_string(file.dim));

  std::set<std::string> seen_keys;
  std::set<std::size_t> seen_rows;
  std::vector<std::string> keys_by_row(count);
  for (const auto& [key, row] : entries) {
    if (!seen_keys.insert(key).second) throw FormatError("embedding manifest: duplicate key " + key);
    if (row >= count || !seen_rows.insert(row).second)
      throw FormatError("embedding manifest: bad or repeated row for key " + key);
    keys_by_row[row] = key;

    const auto colon = key.find(':');
    if (colon == std::string::npos) throw FormatError("embedding key without kind: " + key);
    const std::string kind = key.substr(0, colon);
    const std::string id = key.substr(colon + 1);

    Vector v(file.dim);
    for (int i = 0; i < file.dim; ++i) v(i) = static_cast<double>(payload[row * file.dim + i]);
    if (!v.allFinite()) throw FormatError("embedding row " + std::to_string(row) + " not finite");
    const double norm = v.norm();
    if (norm == 0.0) throw FormatError("embedding row " + std::to_string(row) + " has zero norm");
    if (std::abs(norm - 1.0) > kNormTolerance) {
      file.warnings.push_back(key + ": norm " + std::to_string(norm) + " renormalized");
      v /= norm;
    }

    if (kind == "class") {
      file.classes.emplace(id, std::move(v));
    } else if (kind == "sample") {
      std::uint64_t index = 0;
      const auto* end = id.data() + id.size();
      auto [ptr, ec] = std::from_chars(id.data(), end, index);
      if (id.empty() || ec != std::errc() || ptr != end)
        throw FormatError("embedding sample key is not a decimal index: " + key);
      file.samples.emplace(index, std::move(v));
    } else {
      throw FormatError("embedding key has unknown kind: " + key);
    }
  }
  file.keys = std::move(keys_by_row);
  return file;
}

void save_embeddings(const std::filesystem::path& dir, const PrototypeTable& table,
                     const std::unordered_map<std::uint64_t, Vector>& samples,
                     const std::string& model) {
  std::filesystem::create_directories(dir);
  const int dim = table.dim();
  std::vector<float> payload;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t row = 0;
  auto append = [&](const std::string& key, const Vector& v) {
    if (v.size() != dim) throw ShapeError("embedding " + key + " has wrong dimension");
    for (int i = 0; i < dim; ++i) payload.push_back(static_cast<float>(v(i)));
    entries.push_back({{"key", key}, {"row", row++}});
  };
  for (int c = 0; c < table.num_classes(); ++c)
    append("class:" + table.class_names.at(static_cast<std::size_t>(c)), table.prototype(c));
  std::vector<std::uint64_t> ids;
  for (const auto& [id, v] : samples) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  for (auto id : ids) append("sample:" + std::to_string(id), samples.at(id));

  nlohmann::json manifest = {{"format", kFormatMagic},   {"version", kFormatVersion},
                             {"dim", dim},               {"count", row},
                             {"dtype", "f32le"},         {"prompt_template", table.prompt_template},
                             {"entries", entries}};
  if (!model.empty()) manifest["model"] = model;
  binary_io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  binary_io::write_words<float>(dir / "vectors.f32", payload);
}

TeacherProvider file_teacher(const EmbeddingFile& file, const LabeledDataset& dataset,
                             double noise_sigma, double scale, std::uint64_t seed) {
  PrototypeTable table = file.prototype_table(dataset.class_names);
  std::unordered_map<std::uint64_t, Vector> embeddings;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto id = dataset.ids[i];
    auto it = file.samples.find(id);
    embeddings.emplace(id, it != file.samples.end()
                               ? it->second
                               : stub_sample_embedding(table, dataset.labels[i], id, noise_sigma,
                                                       seed));
  }
  return TeacherProvider(std::move(table), std::move(embeddings), scale);
}

}  // namespace c2fl
