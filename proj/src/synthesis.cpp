#include "c2fl/synthesis.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "c2fl/errors.hpp"
#include "c2fl/rng.hpp"

namespace c2fl {
namespace {

// Row-wise softmax of a (rows x C) logit matrix.
Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

// d grad_match_loss / d g_v.
Matrix grad_match_upstream(const Matrix& g_v, const Matrix& g_agg) {
  const double inv_rows = 1.0 / static_cast<double>(g_v.rows());
  Matrix out = Matrix::Zero(g_v.rows(), g_v.cols());
  for (Eigen::Index j = 0; j < g_v.rows(); ++j) {
    const double gn = g_v.row(j).norm();
    const double an = g_agg.row(j).norm();
    if (gn < kZeroNorm || an < kZeroNorm) continue;
    const double dot = g_v.row(j).dot(g_agg.row(j));
    out.row(j) = -inv_rows * (g_agg.row(j) / (gn * an) - (dot / (gn * gn * gn * an)) * g_v.row(j));
  }
  return out;
}

// Delta = softmax(V phi^T) - onehot(c), rows per feature.
Matrix class_deltas(const Matrix& phi_hat, const Eigen::Ref<const Matrix>& block, int c) {
  Matrix delta = softmax_rows(block * phi_hat.transpose());
  delta.col(c).array() -= 1.0;
  return delta;
}

struct PclTerms {
  double value = 0.0;
  Matrix gradient;  // empty unless requested
};

PclTerms pcl_terms(const FeatureBank& bank, const PrototypeTable& prototypes, double tau,
                   bool interclass_negatives, bool with_gradient) {
  if (!(tau > 0.0)) throw ConfigError("server.tau must be > 0");
  if (prototypes.num_classes() != bank.num_classes || prototypes.dim() != bank.dim())
    throw ShapeError("prototype table (" + std::to_string(prototypes.num_classes()) + " x " +
                     std::to_string(prototypes.dim()) + ") does not match feature bank (" +
                     std::to_string(bank.num_classes) + " x " + std::to_string(bank.dim()) + ")");
  const Eigen::Index n = bank.size();
  if (n < 2) throw ConfigError("contrastive loss needs at least two federated features");

  Vector norms = bank.features.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i)
    if (norms(i) < kZeroNorm || !std::isfinite(norms(i)))
      throw NumericError("degenerate federated feature " + std::to_string(i) + " (norm " +
                         std::to_string(norms(i)) + ")");
  const Matrix unit = norms.cwiseInverse().asDiagonal() * bank.features;

  Matrix proto(n, bank.dim());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector p = prototypes.prototype(bank.label_of(i));
    proto.row(i) = (p / p.norm()).transpose();
  }

  const double inv_tau = 1.0 / tau;
  // Reused across calls; the n x n buffer dominates synthesis memory traffic.
  thread_local Matrix weights;
  weights.noalias() = unit * unit.transpose();
  weights *= inv_tau;
  constexpr double kMasked = -std::numeric_limits<double>::infinity();
  weights.diagonal().setConstant(kMasked);
  if (interclass_negatives)
    for (int c = 0; c < bank.num_classes; ++c)
      weights.block(Eigen::Index{c} * bank.per_class, Eigen::Index{c} * bank.per_class,
                    bank.per_class, bank.per_class)
          .setConstant(kMasked);

  // Row-wise log-sum-exp over negatives (column-major, so work on columns of
  // the transpose: the matrix is symmetric apart from the mask, which is too).
  const Eigen::RowVectorXd col_max = weights.colwise().maxCoeff();
  for (Eigen::Index i = 0; i < n; ++i)
    if (std::isnan(col_max(i)) || col_max(i) == std::numeric_limits<double>::infinity())
      throw NumericError("contrastive loss: non-finite similarity");
    else if (col_max(i) == kMasked)
      throw ConfigError("contrastive loss: feature has no negatives");
  weights.array().rowwise() -= col_max.array();
  weights = weights.array().exp();
  const Eigen::RowVectorXd col_sum = weights.colwise().sum();
  weights.array().rowwise() /= col_sum.array();  // column i = softmax weights of feature i

  PclTerms out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lse = col_max(i) + std::log(col_sum(i));
    out.value += lse - unit.row(i).dot(proto.row(i)) * inv_tau;
  }
  if (with_gradient) {
    // With P(i, j) = weights(j, i):
    // d/d unit_i = (-proto_i + sum_j (P_ij + P_ji) unit_j) / tau
    Matrix d_unit = weights.transpose() * unit;
    d_unit.noalias() += weights * unit;
    d_unit -= proto;
    d_unit *= inv_tau;
    // Project onto the tangent space of the normalization.
    Vector radial = d_unit.cwiseProduct(unit).rowwise().sum();
    out.gradient = norms.cwiseInverse().asDiagonal() * (d_unit - radial.asDiagonal() * unit);
  }
  return out;
}

}  // namespace

void FeatureBank::validate() const {
  if (num_classes < 1 || per_class < 1) throw ShapeError("feature bank needs C >= 1 and m >= 1");
  if (features.rows() != Eigen::Index{num_classes} * per_class)
    throw ShapeError("feature bank rows != C * m");
  if (!features.allFinite()) throw NumericError("feature bank contains non-finite values");
}

FeatureBank FeatureBank::gaussian(int num_classes, int per_class, int dim, double scale,
                                  std::uint64_t seed) {
  if (num_classes < 1 || per_class < 1 || dim < 1)
    throw ConfigError("feature bank sizes must be positive");
  Rng rng(seed);
  FeatureBank bank{num_classes, per_class, Matrix(Eigen::Index{num_classes} * per_class, dim)};
  for (Eigen::Index i = 0; i < bank.features.rows(); ++i)
    for (Eigen::Index k = 0; k < dim; ++k) bank.features(i, k) = scale * rng.normal();
  return bank;
}

double cosine_dissimilarity(const Vector& a, const Vector& b) {
  const double an = a.norm();
  const double bn = b.norm();
  if (an < kZeroNorm || bn < kZeroNorm) return 1.0;
  return 1.0 - a.dot(b) / (an * bn);
}

Matrix federated_gradient(const Matrix& phi_hat, const FeatureBank& bank, int c) {
  if (c < 0 || c >= bank.num_classes) throw ConfigError("class index out of range");
  if (phi_hat.cols() != bank.dim() || phi_hat.rows() != bank.num_classes)
    throw ShapeError("classifier shape does not match feature bank");
  const auto block = bank.class_block(c);
  return class_deltas(phi_hat, block, c).transpose() * block / static_cast<double>(bank.per_class);
}

double grad_match_loss(const Matrix& g_v, const Matrix& g_agg) {
  if (g_v.rows() != g_agg.rows() || g_v.cols() != g_agg.cols())
    throw ShapeError("grad_match_loss: shape mismatch");
  double total = 0.0;
  for (Eigen::Index j = 0; j < g_v.rows(); ++j)
    total += cosine_dissimilarity(g_v.row(j).transpose(), g_agg.row(j).transpose());
  return total / static_cast<double>(g_v.rows());
}

double pcl_loss(const FeatureBank& bank, const PrototypeTable& prototypes, double tau,
                bool interclass_negatives) {
  return pcl_terms(bank, prototypes, tau, interclass_negatives, false).value;
}

SynthesisObjective synthesis_objective(const FeatureBank& bank, const ClassGradients& g_agg,
                                       const Matrix& phi_hat, const PrototypeTable& prototypes,
                                       const SynthesisConfig& config) {
  SynthesisObjective out;
  out.gradient = Matrix::Zero(bank.size(), bank.dim());
  const double m = static_cast<double>(bank.per_class);
  const double class_weight = g_agg.empty() ? 0.0 : 1.0 / static_cast<double>(g_agg.size());

  for (const auto& [c, target] : g_agg) {
    if (c < 0 || c >= bank.num_classes) throw ConfigError("aggregated gradient for unknown class");
    if (target.rows() != phi_hat.rows() || target.cols() != phi_hat.cols())
      throw ShapeError("aggregated gradient shape does not match classifier");
    const auto block = bank.class_block(c);
    const Matrix delta = class_deltas(phi_hat, block, c);  // m x C
    Matrix p = delta;
    p.col(c).array() += 1.0;
    const Matrix g_v = delta.transpose() * block / m;
    out.grad += class_weight * grad_match_loss(g_v, target);

    const Matrix upstream = class_weight * grad_match_upstream(g_v, target);  // C x d
    // d/dv_i = (1/m) [ R^T delta_i + phi^T (p_i * (u_i - <p_i, u_i>)) ], u_i = R v_i
    const Matrix u = block * upstream.transpose();  // m x C
    const Vector mean_u = p.cwiseProduct(u).rowwise().sum();
    const Matrix w = p.cwiseProduct(u - mean_u.replicate(1, u.cols()));
    out.gradient.middleRows(Eigen::Index{c} * bank.per_class, bank.per_class) +=
        (delta * upstream + w * phi_hat) / m;
  }

  if (config.eta_pcl != 0.0) {
    PclTerms pcl = pcl_terms(bank, prototypes, config.tau, config.interclass_negatives, true);
    out.pcl = pcl.value;
    out.gradient += config.eta_pcl * pcl.gradient;
  }
  out.total = out.grad + config.eta_pcl * out.pcl;
  return out;
}

FeatureBank optimize_features(FeatureBank bank, const ClassGradients& g_agg,
                              const Matrix& phi_hat, const PrototypeTable& prototypes,
                              const SynthesisConfig& config) {
  if (config.steps < 0) throw ConfigError("server.feature_steps must be >= 0");
  if (config.eta_pcl < 0.0) throw ConfigError("server.eta_pcl must be >= 0");
  for (int step = 0; step < config.steps; ++step) {
    SynthesisObjective obj = synthesis_objective(bank, g_agg, phi_hat, prototypes, config);
    bank.features -= config.lr * obj.gradient;
    if (!bank.features.allFinite())
      throw NumericError("federated features diverged at synthesis step " + std::to_string(step));
  }
  return bank;
}

Matrix retrain_classifier(Matrix phi, const FeatureBank& bank, int steps, double lr,
                          int batch_size, std::uint64_t seed) {
  if (steps < 0) throw ConfigError("server.retrain_steps must be >= 0");
  if (phi.rows() != bank.num_classes || phi.cols() != bank.dim())
    throw ShapeError("classifier shape does not match feature bank");
  const auto n = static_cast<std::size_t>(bank.size());
  const bool full_batch = batch_size <= 0 || static_cast<std::size_t>(batch_size) >= n;
  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n;

  Matrix batch;
  std::vector<int> labels;
  for (int step = 0; step < steps; ++step) {
    if (full_batch) {
      batch = bank.features;
      labels.resize(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = bank.label_of(static_cast<Eigen::Index>(i));
    } else {
      const auto b = static_cast<std::size_t>(batch_size);
      if (cursor + b > n) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.resize(static_cast<Eigen::Index>(b), bank.dim());
      labels.resize(b);
      for (std::size_t k = 0; k < b; ++k) {
        const auto row = static_cast<Eigen::Index>(order[cursor + k]);
        batch.row(static_cast<Eigen::Index>(k)) = bank.features.row(row);
        labels[k] = bank.label_of(row);
      }
      cursor += b;
    }
    Matrix delta = softmax_rows(batch * phi.transpose());
    for (std::size_t k = 0; k < labels.size(); ++k)
      delta(static_cast<Eigen::Index>(k), labels[k]) -= 1.0;
    phi -= (lr / static_cast<double>(labels.size())) * (delta.transpose() * batch);
  }
  return phi;
}

}  // namespace c2fl
