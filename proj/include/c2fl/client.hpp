#pragma once

#include <cstdint>
#include <map>
#include <set>

#include "c2fl/core_model.hpp"
#include "c2fl/data.hpp"
#include "c2fl/teacher.hpp"

namespace c2fl {

struct LocalTrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double lr = 0.02;
  double momentum = 0.0;
  double beta = 3.0;
};

/// class -> C x d averaged classifier gradient.
using ClassGradients = std::map<int, Matrix>;

/// What a client sends back after a round. Per-class gradients are already
/// averaged over the class's samples; nothing per-sample leaves the client.
struct ClientUpdate {
  ModelParams params;
  ClassGradients class_gradients;
  std::size_t num_samples = 0;
  std::set<int> classes_present;
};

/// `epochs` passes of seeded-shuffled mini-batch SGD on CE + beta * KL.
/// `teacher` may be null when beta == 0.
ModelParams local_train(const ModelParams& global, const LabeledDataset& data,
                        const TeacherProvider* teacher, const LocalTrainConfig& config,
                        std::uint64_t seed);

/// Mean classifier gradient per locally present class, over up to
/// `per_class_cap` seeded-sampled members of that class.
ClassGradients compute_class_gradients(const ExtractorParams& theta, const Matrix& phi_hat,
                                       const LabeledDataset& data, int per_class_cap,
                                       std::uint64_t seed);

/// local_train followed by compute_class_gradients with the updated
/// extractor. `phi_hat` is the server's retrained head from last round.
ClientUpdate run_client(const ModelParams& global, const Matrix& phi_hat,
                        const LabeledDataset& data, const TeacherProvider* teacher,
                        const LocalTrainConfig& config, int per_class_cap, bool with_gradients,
                        std::uint64_t seed);

}  // namespace c2fl
