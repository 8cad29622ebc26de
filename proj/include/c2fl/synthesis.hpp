#pragma once

#include <cstdint>

#include "c2fl/client.hpp"
#include "c2fl/core_model.hpp"
#include "c2fl/teacher.hpp"

namespace c2fl {

/// Server-side synthetic features, balanced: `per_class` rows per class.
/// Row c * per_class + i is feature i of class c.
struct FeatureBank {
  int num_classes = 0;
  int per_class = 0;
  Matrix features;  // (C * m) x d

  int dim() const { return static_cast<int>(features.cols()); }
  Eigen::Index size() const { return features.rows(); }
  int label_of(Eigen::Index row) const { return static_cast<int>(row / per_class); }
  auto class_block(int c) { return features.middleRows(Eigen::Index{c} * per_class, per_class); }
  auto class_block(int c) const {
    return features.middleRows(Eigen::Index{c} * per_class, per_class);
  }

  void validate() const;

  /// scale * N(0, 1) per coordinate.
  static FeatureBank gaussian(int num_classes, int per_class, int dim, double scale,
                              std::uint64_t seed);
};

/// Vectors with norm below this are treated as degenerate by every cosine.
inline constexpr double kZeroNorm = 1e-12;

/// 1 - cos(a, b); 1 when either vector is (numerically) zero.
double cosine_dissimilarity(const Vector& a, const Vector& b);

/// Mean classifier gradient of CE over the class-c features of the bank.
Matrix federated_gradient(const Matrix& phi_hat, const FeatureBank& bank, int c);

/// Mean over rows j of (1 - cos(g_v[j], g_agg[j])). Range [0, 2].
double grad_match_loss(const Matrix& g_v, const Matrix& g_agg);

/// Prototype contrastive loss summed over every bank feature. Positive:
/// cosine to the class prototype. Denominator: every other bank feature,
/// or only other-class features when `interclass_negatives` is set.
double pcl_loss(const FeatureBank& bank, const PrototypeTable& prototypes, double tau,
                bool interclass_negatives = false);

struct SynthesisConfig {
  int steps = 100;
  double lr = 0.1;
  double eta_pcl = 0.001;
  double tau = 0.1;
  bool interclass_negatives = false;
};

struct SynthesisObjective {
  double total = 0.0;
  double grad = 0.0;  // mean over classes in g_agg
  double pcl = 0.0;  // left at 0 when eta_pcl == 0
  Matrix gradient;    // d total / d bank.features
};

/// L_total = L_grad + eta * L_pcl and its analytic gradient w.r.t. the bank.
SynthesisObjective synthesis_objective(const FeatureBank& bank, const ClassGradients& g_agg,
                                       const Matrix& phi_hat, const PrototypeTable& prototypes,
                                       const SynthesisConfig& config);

/// `config.steps` of plain gradient descent on L_total.
FeatureBank optimize_features(FeatureBank bank, const ClassGradients& g_agg,
                              const Matrix& phi_hat, const PrototypeTable& prototypes,
                              const SynthesisConfig& config);

/// Mini-batch SGD on mean CE over the bank; only the head moves.
/// batch_size <= 0 (or >= bank size) means full-batch steps.
Matrix retrain_classifier(Matrix phi_init, const FeatureBank& bank, int steps, double lr,
                          int batch_size, std::uint64_t seed);

}  // namespace c2fl
