#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "c2fl/client.hpp"
#include "c2fl/metrics.hpp"
#include "c2fl/synthesis.hpp"

namespace c2fl {

enum class Method { fedavg, clip2fl, no_pcl, no_kd };

const char* method_name(Method m);
/// Throws ConfigError for unknown names.
Method parse_method(const std::string& name);
/// Whether the method synthesizes features and retrains the head.
bool uses_retraining(Method m);

struct RoundConfig {
  Method method = Method::clip2fl;
  LocalTrainConfig local;
  double client_fraction = 0.4;
  int per_class_cap = 64;
  SynthesisConfig synthesis;
  int retrain_steps = 300;
  double retrain_lr = 0.01;
  int retrain_batch = 0;  // <= 0: full batch

  void validate() const;
};

struct ServerState {
  ModelParams global;    // w^t
  Matrix retrained_head; // phi-hat^t
  FeatureBank bank;      // V^t
  int round = 0;

  /// Round-0 state: phi-hat^0 = phi^0, Gaussian bank.
  static ServerState initial(ModelParams global, int per_class, double bank_scale,
                             std::uint64_t bank_seed);
  /// {theta, phi-hat}: the model a retraining method evaluates.
  ModelParams retrained_model() const;
};

/// ceil(fraction * K) distinct client indices seeded by (seed, round), sorted.
std::vector<int> select_clients(int num_clients, double fraction, int round, std::uint64_t seed);

/// Sample-count weighted average of client parameters.
ModelParams aggregate_models(std::span<const ClientUpdate> updates);

/// Per class: unweighted mean over the clients that reported that class.
ClassGradients aggregate_gradients(std::span<const ClassGradients> per_client);

/// Everything a round needs besides the server state.
struct RoundContext {
  std::span<const LabeledDataset> clients;
  const TeacherProvider* teacher = nullptr;
  const LabeledDataset* train = nullptr;  // union of client shards, metrics only
  const LabeledDataset* test = nullptr;
  std::span<const ClassGroup> groups;
  const Matrix* cka_probe = nullptr;      // input_dim x n probe batch, optional
  int workers = 1;
};

struct RoundResult {
  ServerState state;
  RoundMetrics metrics;
};

/// One communication round. `seed` is the run's master seed; every random
/// choice inside is derived from (seed, round, ...).
RoundResult run_round(const ServerState& state, const RoundContext& context,
                      const RoundConfig& config, std::uint64_t seed);

/// Runs fn(0..n-1) on up to `workers` threads. Exceptions are rethrown for
/// the lowest failing index.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace c2fl
