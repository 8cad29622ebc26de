#include "c2fl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "c2fl/errors.hpp"

namespace c2fl {
namespace {

GroupValues group_average(const std::map<int, double>& per_class,
                          std::span<const ClassGroup> groups) {
  std::map<ClassGroup, std::pair<double, int>> acc;
  for (const auto& [c, v] : per_class) {
    if (c < 0 || static_cast<std::size_t>(c) >= groups.size())
      throw ConfigError("class " + std::to_string(c) + " has no group");
    auto& slot = acc[groups[static_cast<std::size_t>(c)]];
    slot.first += v;
    ++slot.second;
  }
  GroupValues out;
  for (const auto& [g, s] : acc) out[g] = s.first / s.second;
  return out;
}

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

nlohmann::ordered_json groups_json(const GroupValues& values) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (ClassGroup g : kAllGroups)
    if (auto it = values.find(g); it != values.end()) out[group_name(g)] = it->second;
  return out;
}

std::optional<double> read_optional(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

GroupValues read_groups(const nlohmann::json& j, const char* key) {
  GroupValues out;
  if (!j.contains(key)) return out;
  for (ClassGroup g : kAllGroups)
    if (j.at(key).contains(group_name(g))) out[g] = j.at(key).at(group_name(g)).get<double>();
  return out;
}

}  // namespace

std::optional<double> GroupAccuracy::get(ClassGroup g) const {
  switch (g) {
    case ClassGroup::many:
      return many;
    case ClassGroup::medium:
      return medium;
    case ClassGroup::few:
      return few;
  }
  return std::nullopt;
}

std::vector<int> predict(const ModelParams& params, const LabeledDataset& dataset) {
  const Matrix logits = params.phi * forward_features_batch(params.theta, dataset.inputs);
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.rows(); ++c)
      if (logits(c, j) > logits(best, j)) best = c;
    out[static_cast<std::size_t>(j)] = static_cast<int>(best);
  }
  return out;
}

double top1_accuracy(const ModelParams& params, const LabeledDataset& dataset) {
  if (dataset.empty()) throw ConfigError("accuracy on an empty dataset");
  const auto pred = predict(params, dataset);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == dataset.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

GroupAccuracy groupwise_accuracy(const ModelParams& params, const LabeledDataset& dataset,
                                 std::span<const ClassGroup> groups) {
  if (dataset.empty()) throw ConfigError("accuracy on an empty dataset");
  const auto pred = predict(params, dataset);
  std::map<ClassGroup, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int y = dataset.labels[i];
    if (static_cast<std::size_t>(y) >= groups.size())
      throw ConfigError("class " + std::to_string(y) + " is not covered by the group map");
    const bool hit = pred[i] == y;
    correct += hit;
    auto& t = tally[groups[static_cast<std::size_t>(y)]];
    t.first += hit;
    ++t.second;
  }
  GroupAccuracy out;
  out.all = static_cast<double>(correct) / static_cast<double>(pred.size());
  auto ratio = [&](ClassGroup g) -> std::optional<double> {
    auto it = tally.find(g);
    if (it == tally.end()) return std::nullopt;
    return static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
  };
  out.many = ratio(ClassGroup::many);
  out.medium = ratio(ClassGroup::medium);
  out.few = ratio(ClassGroup::few);
  return out;
}

double linear_cka(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw ShapeError("linear_cka: row counts differ");
  if (x.rows() < 2) throw ConfigError("linear_cka: need at least two samples");
  const Matrix xc = x.rowwise() - x.colwise().mean();
  const Matrix yc = y.rowwise() - y.colwise().mean();
  const double xx = (xc.transpose() * xc).norm();
  const double yy = (yc.transpose() * yc).norm();
  if (xx < kZeroNorm || yy < kZeroNorm) throw NumericError("linear_cka: zero-variance input");
  const double xy = (xc.transpose() * yc).squaredNorm();
  return std::clamp(xy / (xx * yy), 0.0, 1.0);
}

double mean_pairwise_cka(std::span<const Matrix> features) {
  if (features.size() < 2) throw ConfigError("pairwise CKA needs at least two models");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < features.size(); ++i)
    for (std::size_t j = i + 1; j < features.size(); ++j, ++pairs)
      total += linear_cka(features[i], features[j]);
  return total / static_cast<double>(pairs);
}

GroupValues feature_dissimilarity(const FeatureBank& bank, const Matrix& class_means,
                                  std::span<const ClassGroup> groups) {
  if (class_means.rows() != bank.num_classes || class_means.cols() != bank.dim())
    throw ShapeError("class means do not match feature bank");
  std::map<int, double> per_class;
  for (int c = 0; c < bank.num_classes; ++c) {
    const Vector mean = class_means.row(c).transpose();
    const auto block = bank.class_block(c);
    double total = 0.0;
    for (Eigen::Index i = 0; i < block.rows(); ++i)
      total += cosine_dissimilarity(block.row(i).transpose(), mean);
    per_class[c] = total / static_cast<double>(block.rows());
  }
  return group_average(per_class, groups);
}

GroupValues gradient_dissimilarity(const ClassGradients& g_v, const ClassGradients& g_agg,
                                   std::span<const ClassGroup> groups) {
  if (g_v.size() != g_agg.size()) throw ConfigError("gradient maps have different classes");
  std::map<int, double> per_class;
  for (const auto& [c, gv] : g_v) {
    auto it = g_agg.find(c);
    if (it == g_agg.end())
      throw ConfigError("class " + std::to_string(c) + " missing from aggregated gradients");
    per_class[c] = grad_match_loss(gv, it->second);
  }
  return group_average(per_class, groups);
}

Matrix class_mean_features(const ExtractorParams& theta, const LabeledDataset& dataset) {
  const Matrix features = forward_features_batch(theta, dataset.inputs);
  Matrix sums = Matrix::Zero(dataset.num_classes(), features.rows());
  std::vector<std::size_t> counts(static_cast<std::size_t>(dataset.num_classes()), 0);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    sums.row(dataset.labels[i]) += features.col(static_cast<Eigen::Index>(i)).transpose();
    ++counts[static_cast<std::size_t>(dataset.labels[i])];
  }
  for (int c = 0; c < dataset.num_classes(); ++c)
    if (counts[static_cast<std::size_t>(c)] > 0)
      sums.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  return sums;
}

bool RoundMetrics::all_finite() const {
  auto ok = [](const std::optional<double>& v) { return !v || std::isfinite(*v); };
  if (!std::isfinite(accuracy.all) || !ok(accuracy.many) || !ok(accuracy.medium) ||
      !ok(accuracy.few) || !ok(loss_grad) || !ok(loss_pcl) || !ok(cka))
    return false;
  for (const auto* m : {&grad_dissim, &feat_dissim})
    for (const auto& [g, v] : *m)
      if (!std::isfinite(v)) return false;
  return true;
}

nlohmann::ordered_json RoundMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["round"] = round;
  j["acc_all"] = accuracy.all;
  j["acc_many"] = optional_json(accuracy.many);
  j["acc_medium"] = optional_json(accuracy.medium);
  j["acc_few"] = optional_json(accuracy.few);
  j["grad_dissim"] = groups_json(grad_dissim);
  j["feat_dissim"] = groups_json(feat_dissim);
  j["loss_grad"] = optional_json(loss_grad);
  j["loss_pcl"] = optional_json(loss_pcl);
  j["cka"] = optional_json(cka);
  return j;
}

RoundMetrics RoundMetrics::from_json(const nlohmann::json& j) {
  RoundMetrics m;
  m.round = j.at("round").get<int>();
  m.accuracy.all = j.at("acc_all").get<double>();
  m.accuracy.many = read_optional(j, "acc_many");
  m.accuracy.medium = read_optional(j, "acc_medium");
  m.accuracy.few = read_optional(j, "acc_few");
  m.grad_dissim = read_groups(j, "grad_dissim");
  m.feat_dissim = read_groups(j, "feat_dissim");
  m.loss_grad = read_optional(j, "loss_grad");
  m.loss_pcl = read_optional(j, "loss_pcl");
  m.cka = read_optional(j, "cka");
  return m;
}

}  // namespace c2fl
