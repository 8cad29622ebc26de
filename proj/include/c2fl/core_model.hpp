#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace c2fl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Feed-forward feature extractor: ReLU after every layer except the last.
/// The last layer is linear and emits the d-dimensional feature.
struct ExtractorParams {
  std::vector<DenseLayer> layers;

  int input_dim() const;
  int feature_dim() const;
};

/// w = {theta, phi}. Also used to hold gradients of the same shape.
struct ModelParams {
  ExtractorParams theta;
  Matrix phi;  // C x d, no bias

  int num_classes() const { return static_cast<int>(phi.rows()); }
  int feature_dim() const { return static_cast<int>(phi.cols()); }
  std::size_t num_parameters() const;

  /// Throws ShapeError if layer shapes are inconsistent or phi does not
  /// match the extractor output. Throws NumericError on non-finite entries.
  void validate() const;
  bool all_finite() const;

  ModelParams zeros_like() const;
  /// this += scale * other
  void add_scaled(const ModelParams& other, double scale);

  /// Flat view in a fixed order (layers in order: weight col-major, bias;
  /// then phi col-major). Used by finite-difference checks.
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> values);

  /// He-uniform hidden layers, Glorot-uniform output layer and classifier.
  /// layer_sizes = {input, hidden..., d}.
  static ModelParams initialize(std::span<const int> layer_sizes, int num_classes,
                                std::uint64_t seed);
};

Vector forward_features(const ExtractorParams& theta, const Vector& input);
/// Column-per-sample batch version: inputs is in x n, result is d x n.
Matrix forward_features_batch(const ExtractorParams& theta, const Matrix& inputs);

Vector classify(const Matrix& phi, const Vector& features);

Vector softmax(const Vector& logits);
double cross_entropy(const Vector& logits, int label);
/// KL(q || p), 0 log 0 = 0, p clamped below at 1e-12.
double kl_divergence(const Vector& q, const Vector& p);
/// CE(y, p) + beta * KL(q || softmax(p)).
double local_loss(const Vector& logits, const Vector& teacher_probs, int label, double beta);

/// d CE / d phi for one feature: (softmax(phi z) - onehot(y)) z^T.
Matrix classifier_gradient(const Matrix& phi, const Vector& features, int label);

/// Mean local loss over a batch. teacher_probs is C x n and may be empty
/// when beta == 0.
double batch_local_loss(const ModelParams& params, const Matrix& inputs,
                        std::span<const int> labels, const Matrix& teacher_probs, double beta);

/// Gradient of batch_local_loss with respect to every parameter.
ModelParams backward_local(const ModelParams& params, const Matrix& inputs,
                           std::span<const int> labels, const Matrix& teacher_probs, double beta,
                           double* loss = nullptr);

ModelParams sgd_step(ModelParams params, const ModelParams& grads, double lr);

}  // namespace c2fl
