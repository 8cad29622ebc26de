#include "c2fl/client.hpp"

#include <numeric>

#include "c2fl/errors.hpp"
#include "c2fl/rng.hpp"

namespace c2fl {

ModelParams local_train(const ModelParams& global, const LabeledDataset& data,
                        const TeacherProvider* teacher, const LocalTrainConfig& config,
                        std::uint64_t seed) {
  if (data.empty()) throw ConfigError("local_train: client has no data");
  if (config.epochs < 1) throw ConfigError("training.epochs must be >= 1");
  if (config.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (config.beta < 0.0) throw ConfigError("training.beta must be >= 0");
  if (config.beta > 0.0 && teacher == nullptr)
    throw ConfigError("local_train: beta > 0 needs a teacher");

  ModelParams params = global;
  ModelParams velocity;
  if (config.momentum != 0.0) velocity = global.zeros_like();

  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Matrix no_teacher;
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const std::span<const std::size_t> batch(order.data() + start, stop - start);
      labels.clear();
      ids.clear();
      for (std::size_t p : batch) {
        labels.push_back(data.labels[p]);
        ids.push_back(data.ids[p]);
      }
      const Matrix inputs = data.gather(batch);
      const Matrix q = config.beta > 0.0 ? teacher->probs_for(ids) : no_teacher;
      ModelParams grads = backward_local(params, inputs, labels, q, config.beta);
      if (config.momentum != 0.0) {
        // v <- momentum * v + g ; w <- w - lr * v
        ModelParams next = grads;
        next.add_scaled(velocity, config.momentum);
        velocity = std::move(next);
        params = sgd_step(std::move(params), velocity, config.lr);
      } else {
        params = sgd_step(std::move(params), grads, config.lr);
      }
    }
  }
  return params;
}

ClassGradients compute_class_gradients(const ExtractorParams& theta, const Matrix& phi_hat,
                                       const LabeledDataset& data, int per_class_cap,
                                       std::uint64_t seed) {
  if (data.empty()) throw ConfigError("compute_class_gradients: client has no data");
  if (phi_hat.cols() != theta.feature_dim() || phi_hat.rows() != data.num_classes())
    throw ShapeError("retrained classifier shape does not match model");
  if (per_class_cap < 1) throw ConfigError("server.per_class_cap must be >= 1");

  Rng rng(seed);
  ClassGradients out;
  for (int c = 0; c < data.num_classes(); ++c) {
    const auto members = data.positions_of_class(c);
    if (members.empty()) continue;
    std::vector<std::size_t> chosen;
    if (members.size() <= static_cast<std::size_t>(per_class_cap)) {
      chosen = members;
    } else {
      for (std::size_t pick :
           rng.sample_without_replacement(members.size(), static_cast<std::size_t>(per_class_cap)))
        chosen.push_back(members[pick]);
    }
    const Matrix features = forward_features_batch(theta, data.gather(chosen));
    Matrix sum = Matrix::Zero(phi_hat.rows(), phi_hat.cols());
    for (Eigen::Index j = 0; j < features.cols(); ++j)
      sum += classifier_gradient(phi_hat, features.col(j), c);
    out.emplace(c, sum / static_cast<double>(features.cols()));
  }
  return out;
}

ClientUpdate run_client(const ModelParams& global, const Matrix& phi_hat,
                        const LabeledDataset& data, const TeacherProvider* teacher,
                        const LocalTrainConfig& config, int per_class_cap, bool with_gradients,
                        std::uint64_t seed) {
  ClientUpdate update;
  update.params = local_train(global, data, teacher, config, derive_seed(seed, {1}));
  if (with_gradients)
    update.class_gradients = compute_class_gradients(update.params.theta, phi_hat, data,
                                                     per_class_cap, derive_seed(seed, {2}));
  update.num_samples = data.size();
  for (int y : data.labels) update.classes_present.insert(y);
  return update;
}

}  // namespace c2fl
