#pragma once

#include <map>
#include <optional>
#include <span>

#include "json.hpp"

#include "c2fl/client.hpp"
#include "c2fl/core_model.hpp"
#include "c2fl/data.hpp"
#include "c2fl/synthesis.hpp"

namespace c2fl {

/// Group -> value; groups with nothing to average are absent.
using GroupValues = std::map<ClassGroup, double>;

struct GroupAccuracy {
  double all = 0.0;
  std::optional<double> many, medium, few;

  std::optional<double> get(ClassGroup g) const;
};

/// Argmax of phi * f_theta(x); ties go to the lowest class index.
std::vector<int> predict(const ModelParams& params, const LabeledDataset& dataset);
double top1_accuracy(const ModelParams& params, const LabeledDataset& dataset);
GroupAccuracy groupwise_accuracy(const ModelParams& params, const LabeledDataset& dataset,
                                 std::span<const ClassGroup> groups);

/// Linear CKA with column centering. X is n x p, Y is n x q.
double linear_cka(const Matrix& x, const Matrix& y);

/// Mean over pairs (i < j) of linear_cka(features_i, features_j).
double mean_pairwise_cka(std::span<const Matrix> features);

/// Per class: mean over bank rows of 1 - cos(v, mean real feature); then
/// averaged within each group. class_means is C x d.
GroupValues feature_dissimilarity(const FeatureBank& bank, const Matrix& class_means,
                                  std::span<const ClassGroup> groups);

/// Per class grad_match_loss(g_v[c], g_agg[c]), averaged within groups.
GroupValues gradient_dissimilarity(const ClassGradients& g_v, const ClassGradients& g_agg,
                                   std::span<const ClassGroup> groups);

/// Per-class mean feature under `theta` (C x d). Classes without samples
/// get a zero row.
Matrix class_mean_features(const ExtractorParams& theta, const LabeledDataset& dataset);

struct RoundMetrics {
  int round = 0;
  GroupAccuracy accuracy;
  GroupValues grad_dissim;
  GroupValues feat_dissim;
  std::optional<double> loss_grad;
  std::optional<double> loss_pcl;
  std::optional<double> cka;  // mean pairwise CKA over this round's client models

  bool all_finite() const;
  /// One metrics.jsonl record.
  nlohmann::ordered_json to_json() const;
  static RoundMetrics from_json(const nlohmann::json& j);
};

}  // namespace c2fl
