#include "c2fl/core_model.hpp"

#include <cmath>
#include <string>

#include "c2fl/errors.hpp"
#include "c2fl/rng.hpp"

namespace c2fl {
namespace {

constexpr double kProbFloor = 1e-12;

void check_label(int label, Eigen::Index num_classes) {
  if (label < 0 || label >= num_classes)
    throw ConfigError("label " + std::to_string(label) + " out of range for " +
                      std::to_string(num_classes) + " classes");
}

void check_same_shape(const ModelParams& a, const ModelParams& b) {
  bool ok = a.theta.layers.size() == b.theta.layers.size() && a.phi.rows() == b.phi.rows() &&
            a.phi.cols() == b.phi.cols();
  for (std::size_t i = 0; ok && i < a.theta.layers.size(); ++i) {
    const auto& la = a.theta.layers[i];
    const auto& lb = b.theta.layers[i];
    ok = la.weight.rows() == lb.weight.rows() && la.weight.cols() == lb.weight.cols() &&
         la.bias.size() == lb.bias.size();
  }
  if (!ok) throw ShapeError("parameter shapes do not match");
}

// Column-wise numerically stable softmax.
Matrix softmax_columns(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double mx = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - mx).exp().matrix();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

struct ForwardTrace {
  std::vector<Matrix> activations;  // a_0 = inputs, ..., a_L = features
  std::vector<Matrix> pre;          // pre-activation of each layer
};

ForwardTrace forward_trace(const ExtractorParams& theta, const Matrix& inputs) {
  ForwardTrace trace;
  trace.activations.push_back(inputs);
  const std::size_t n_layers = theta.layers.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& layer = theta.layers[l];
    Matrix pre = layer.weight * trace.activations.back();
    pre.colwise() += layer.bias;
    trace.pre.push_back(pre);
    if (l + 1 < n_layers)
      trace.activations.push_back(pre.cwiseMax(0.0));
    else
      trace.activations.push_back(std::move(pre));
  }
  return trace;
}

void check_batch(const ModelParams& params, const Matrix& inputs, std::span<const int> labels,
                 const Matrix& teacher_probs, double beta) {
  if (inputs.cols() == 0) throw ConfigError("empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != inputs.cols())
    throw ShapeError("batch labels/inputs length mismatch");
  if (inputs.rows() != params.theta.input_dim())
    throw ShapeError("input dimension " + std::to_string(inputs.rows()) +
                     " does not match extractor input " +
                     std::to_string(params.theta.input_dim()));
  for (int y : labels) check_label(y, params.phi.rows());
  if (beta != 0.0 &&
      (teacher_probs.rows() != params.phi.rows() || teacher_probs.cols() != inputs.cols()))
    throw ShapeError("teacher probabilities must be C x batch");
}

}  // namespace

int ExtractorParams::input_dim() const {
  return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols());
}

int ExtractorParams::feature_dim() const {
  return layers.empty() ? 0 : static_cast<int>(layers.back().weight.rows());
}

std::size_t ModelParams::num_parameters() const {
  std::size_t n = static_cast<std::size_t>(phi.size());
  for (const auto& l : theta.layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

void ModelParams::validate() const {
  if (theta.layers.empty()) throw ShapeError("feature extractor has no layers");
  for (std::size_t i = 0; i < theta.layers.size(); ++i) {
    const auto& l = theta.layers[i];
    if (l.bias.size() != l.weight.rows())
      throw ShapeError("layer " + std::to_string(i) + ": bias length != output size");
    if (i > 0 && l.weight.cols() != theta.layers[i - 1].weight.rows())
      throw ShapeError("layer " + std::to_string(i) + ": input size != previous output size");
  }
  if (phi.cols() != theta.feature_dim())
    throw ShapeError("classifier has " + std::to_string(phi.cols()) + " columns, features are " +
                     std::to_string(theta.feature_dim()) + "-dimensional");
  if (phi.rows() < 1) throw ShapeError("classifier has no classes");
  if (!all_finite()) throw NumericError("model parameters contain non-finite values");
}

bool ModelParams::all_finite() const {
  if (!phi.allFinite()) return false;
  for (const auto& l : theta.layers)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams out;
  for (const auto& l : theta.layers)
    out.theta.layers.push_back(
        {Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
  out.phi = Matrix::Zero(phi.rows(), phi.cols());
  return out;
}

void ModelParams::add_scaled(const ModelParams& other, double scale) {
  check_same_shape(*this, other);
  for (std::size_t i = 0; i < theta.layers.size(); ++i) {
    theta.layers[i].weight += scale * other.theta.layers[i].weight;
    theta.layers[i].bias += scale * other.theta.layers[i].bias;
  }
  phi += scale * other.phi;
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> out;
  out.reserve(num_parameters());
  auto append = [&out](const auto& m) { out.insert(out.end(), m.data(), m.data() + m.size()); };
  for (const auto& l : theta.layers) {
    append(l.weight);
    append(l.bias);
  }
  append(phi);
  return out;
}

void ModelParams::assign_flat(std::span<const double> values) {
  if (values.size() != num_parameters()) throw ShapeError("flat parameter length mismatch");
  std::size_t pos = 0;
  auto take = [&](auto& m) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), m.size(), m.data());
    pos += static_cast<std::size_t>(m.size());
  };
  for (auto& l : theta.layers) {
    take(l.weight);
    take(l.bias);
  }
  take(phi);
}

ModelParams ModelParams::initialize(std::span<const int> layer_sizes, int num_classes,
                                    std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw ConfigError("extractor needs at least input and feature sizes");
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  for (int s : layer_sizes)
    if (s < 1) throw ConfigError("layer sizes must be positive");
  Rng rng(seed);
  auto fill_uniform = [&rng](Matrix& m, double bound) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = bound * (2.0 * rng.uniform() - 1.0);
  };
  ModelParams params;
  const std::size_t n_layers = layer_sizes.size() - 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const int in = layer_sizes[l];
    const int out = layer_sizes[l + 1];
    DenseLayer layer{Matrix(out, in), Vector::Zero(out)};
    const bool hidden = l + 1 < n_layers;
    fill_uniform(layer.weight, hidden ? std::sqrt(6.0 / in) : std::sqrt(6.0 / (in + out)));
    params.theta.layers.push_back(std::move(layer));
  }
  const int d = layer_sizes.back();
  params.phi = Matrix(num_classes, d);
  fill_uniform(params.phi, std::sqrt(6.0 / (num_classes + d)));
  return params;
}

Vector forward_features(const ExtractorParams& theta, const Vector& input) {
  if (input.size() != theta.input_dim())
    throw ShapeError("input length " + std::to_string(input.size()) +
                     " does not match extractor input " + std::to_string(theta.input_dim()));
  Vector a = input;
  for (std::size_t l = 0; l < theta.layers.size(); ++l) {
    Vector pre = theta.layers[l].weight * a + theta.layers[l].bias;
    a = (l + 1 < theta.layers.size()) ? Vector(pre.cwiseMax(0.0)) : pre;
  }
  return a;
}

Matrix forward_features_batch(const ExtractorParams& theta, const Matrix& inputs) {
  if (inputs.rows() != theta.input_dim())
    throw ShapeError("input dimension " + std::to_string(inputs.rows()) +
                     " does not match extractor input " + std::to_string(theta.input_dim()));
  return forward_trace(theta, inputs).activations.back();
}

Vector classify(const Matrix& phi, const Vector& features) {
  if (phi.cols() != features.size())
    throw ShapeError("classifier expects " + std::to_string(phi.cols()) + "-dim features, got " +
                     std::to_string(features.size()));
  return phi * features;
}

Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

double cross_entropy(const Vector& logits, int label) {
  check_label(label, logits.size());
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits(label);
}

double kl_divergence(const Vector& q, const Vector& p) {
  if (q.size() != p.size()) throw ShapeError("kl_divergence: length mismatch");
  double total = 0.0;
  for (Eigen::Index c = 0; c < q.size(); ++c) {
    if (q(c) < 0.0 || p(c) < 0.0) throw ConfigError("kl_divergence: negative probability");
    if (q(c) == 0.0) continue;
    total += q(c) * std::log(q(c) / std::max(p(c), kProbFloor));
  }
  return total;
}

double local_loss(const Vector& logits, const Vector& teacher_probs, int label, double beta) {
  if (beta < 0.0) throw ConfigError("beta must be non-negative");
  const double ce = cross_entropy(logits, label);
  if (beta == 0.0) return ce;
  return ce + beta * kl_divergence(teacher_probs, softmax(logits));
}

Matrix classifier_gradient(const Matrix& phi, const Vector& features, int label) {
  check_label(label, phi.rows());
  Vector delta = softmax(classify(phi, features));
  delta(label) -= 1.0;
  return delta * features.transpose();
}

double batch_local_loss(const ModelParams& params, const Matrix& inputs,
                        std::span<const int> labels, const Matrix& teacher_probs, double beta) {
  check_batch(params, inputs, labels, teacher_probs, beta);
  const Matrix features = forward_features_batch(params.theta, inputs);
  const Matrix logits = params.phi * features;
  double total = 0.0;
  for (Eigen::Index j = 0; j < inputs.cols(); ++j) {
    total += beta == 0.0 ? cross_entropy(logits.col(j), labels[static_cast<std::size_t>(j)])
                         : local_loss(logits.col(j), teacher_probs.col(j),
                                      labels[static_cast<std::size_t>(j)], beta);
  }
  return total / static_cast<double>(inputs.cols());
}

ModelParams backward_local(const ModelParams& params, const Matrix& inputs,
                           std::span<const int> labels, const Matrix& teacher_probs, double beta,
                           double* loss) {
  check_batch(params, inputs, labels, teacher_probs, beta);
  if (beta < 0.0) throw ConfigError("beta must be non-negative");
  const Eigen::Index n = inputs.cols();
  const ForwardTrace trace = forward_trace(params.theta, inputs);
  const Matrix& features = trace.activations.back();
  const Matrix logits = params.phi * features;
  const Matrix probs = softmax_columns(logits);

  // dL/dlogits per column: (p - onehot) + beta (p * sum(q) - q), averaged.
  Matrix delta = probs;
  for (Eigen::Index j = 0; j < n; ++j) delta(labels[static_cast<std::size_t>(j)], j) -= 1.0;
  if (beta != 0.0) {
    for (Eigen::Index j = 0; j < n; ++j)
      delta.col(j) += beta * (probs.col(j) * teacher_probs.col(j).sum() - teacher_probs.col(j));
  }
  if (loss != nullptr) {
    double total = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const int y = labels[static_cast<std::size_t>(j)];
      total += beta == 0.0 ? cross_entropy(logits.col(j), y)
                           : local_loss(logits.col(j), teacher_probs.col(j), y, beta);
    }
    *loss = total / static_cast<double>(n);
  }
  delta /= static_cast<double>(n);

  ModelParams grads;
  grads.theta.layers.resize(params.theta.layers.size());
  grads.phi = delta * features.transpose();
  Matrix upstream = params.phi.transpose() * delta;
  for (std::size_t l = params.theta.layers.size(); l-- > 0;) {
    Matrix dpre = std::move(upstream);
    if (l + 1 < params.theta.layers.size())
      dpre = dpre.cwiseProduct((trace.pre[l].array() > 0.0).cast<double>().matrix());
    grads.theta.layers[l].weight = dpre * trace.activations[l].transpose();
    grads.theta.layers[l].bias = dpre.rowwise().sum();
    if (l > 0) upstream = params.theta.layers[l].weight.transpose() * dpre;
  }
  return grads;
}

ModelParams sgd_step(ModelParams params, const ModelParams& grads, double lr) {
  if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
  params.add_scaled(grads, -lr);
  return params;
}

}  // namespace c2fl
