#include "c2fl/server.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

#include "c2fl/errors.hpp"
#include "c2fl/rng.hpp"

namespace c2fl {
namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kSelectionStream = 0x53454c;
constexpr std::uint64_t kClientStream = 0x434c49;
constexpr std::uint64_t kRetrainStream = 0x524554;

}  // namespace

const char* method_name(Method m) {
  switch (m) {
    case Method::fedavg:
      return "fedavg";
    case Method::clip2fl:
      return "clip2fl";
    case Method::no_pcl:
      return "no_pcl";
    case Method::no_kd:
      return "no_kd";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::fedavg, Method::clip2fl, Method::no_pcl, Method::no_kd})
    if (name == method_name(m)) return m;
  throw ConfigError("method: unknown method '" + name +
                    "' (expected fedavg, clip2fl, no_pcl or no_kd)");
}

bool uses_retraining(Method m) { return m != Method::fedavg; }

void RoundConfig::validate() const {
  if (!(client_fraction > 0.0 && client_fraction <= 1.0))
    throw ConfigError("server.client_fraction must be in (0, 1]");
  if (local.epochs < 1) throw ConfigError("training.epochs must be >= 1");
  if (local.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (local.lr < 0.0) throw ConfigError("training.lr_local must be >= 0");
  if (local.beta < 0.0) throw ConfigError("training.beta must be >= 0");
  if (local.momentum < 0.0 || local.momentum >= 1.0)
    throw ConfigError("training.momentum must be in [0, 1)");
  if (per_class_cap < 1) throw ConfigError("server.per_class_cap must be >= 1");
  if (synthesis.steps < 0) throw ConfigError("server.feature_steps must be >= 0");
  if (synthesis.lr < 0.0) throw ConfigError("server.feature_lr must be >= 0");
  if (synthesis.eta_pcl < 0.0) throw ConfigError("server.eta_pcl must be >= 0");
  if (!(synthesis.tau > 0.0)) throw ConfigError("server.tau must be > 0");
  if (retrain_steps < 0) throw ConfigError("server.retrain_steps must be >= 0");
  if (retrain_lr < 0.0) throw ConfigError("server.retrain_lr must be >= 0");
}

ServerState ServerState::initial(ModelParams global, int per_class, double bank_scale,
                                 std::uint64_t bank_seed) {
  global.validate();
  ServerState s;
  s.retrained_head = global.phi;
  s.bank = FeatureBank::gaussian(global.num_classes(), per_class, global.feature_dim(),
                                 bank_scale, bank_seed);
  s.global = std::move(global);
  return s;
}

ModelParams ServerState::retrained_model() const {
  ModelParams m = global;
  m.phi = retrained_head;
  return m;
}

std::vector<int> select_clients(int num_clients, double fraction, int round, std::uint64_t seed) {
  if (num_clients < 1) throw ConfigError("need at least one client");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ConfigError("client fraction must be in (0, 1]");
  // Guard against 0.4 * 20 = 8.000000000000002 style overshoot.
  const double raw = fraction * static_cast<double>(num_clients);
  auto count = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  count = std::clamp<std::size_t>(count, 1, static_cast<std::size_t>(num_clients));
  Rng rng(derive_seed(seed, {kSelectionStream, static_cast<std::uint64_t>(round)}));
  auto picks = rng.sample_without_replacement(static_cast<std::size_t>(num_clients), count);
  std::vector<int> out(picks.begin(), picks.end());
  std::sort(out.begin(), out.end());
  return out;
}

ModelParams aggregate_models(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw ConfigError("aggregate_models: no client updates");
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.num_samples == 0) throw ConfigError("aggregate_models: client reported zero samples");
    total += static_cast<double>(u.num_samples);
  }
  ModelParams out = updates.front().params.zeros_like();
  for (const auto& u : updates) out.add_scaled(u.params, static_cast<double>(u.num_samples) / total);
  return out;
}

ClassGradients aggregate_gradients(std::span<const ClassGradients> per_client) {
  std::map<int, std::pair<Matrix, int>> sums;
  Eigen::Index rows = -1, cols = -1;
  for (const auto& client : per_client) {
    for (const auto& [c, g] : client) {
      if (rows < 0) {
        rows = g.rows();
        cols = g.cols();
      }
      if (g.rows() != rows || g.cols() != cols)
        throw ShapeError("aggregate_gradients: inconsistent gradient shapes");
      auto [it, fresh] = sums.try_emplace(c, g, 1);
      if (!fresh) {
        it->second.first += g;
        ++it->second.second;
      }
    }
  }
  ClassGradients out;
  for (auto& [c, s] : sums) out.emplace(c, s.first / static_cast<double>(s.second));
  return out;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const auto threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  std::vector<std::exception_ptr> errors(n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

RoundResult run_round(const ServerState& state, const RoundContext& context,
                      const RoundConfig& config, std::uint64_t seed) {
  config.validate();
  if (context.clients.empty()) throw ConfigError("run_round: no clients");
  if (context.test == nullptr) throw ConfigError("run_round: no evaluation set");
  const bool retrain = uses_retraining(config.method);
  if (config.local.beta > 0.0 && context.teacher == nullptr)
    throw ConfigError("run_round: beta > 0 needs a teacher");

  const auto round = static_cast<std::uint64_t>(state.round);
  const auto selected = select_clients(static_cast<int>(context.clients.size()),
                                       config.client_fraction, state.round, seed);

  // Broadcast w^t and phi-hat^t; clients train and report.
  std::vector<ClientUpdate> updates(selected.size());
  parallel_for(selected.size(), context.workers, [&](std::size_t i) {
    const int k = selected[i];
    updates[i] = run_client(state.global, state.retrained_head,
                            context.clients[static_cast<std::size_t>(k)], context.teacher,
                            config.local, config.per_class_cap, retrain,
                            derive_seed(seed, {kClientStream, round, static_cast<std::uint64_t>(k)}));
  });

  RoundResult result;
  ServerState& next = result.state;
  next.round = state.round + 1;
  next.global = aggregate_models(updates);
  RoundMetrics& metrics = result.metrics;
  metrics.round = state.round;

  if (retrain) {
    std::vector<ClassGradients> reported;
    reported.reserve(updates.size());
    for (const auto& u : updates) reported.push_back(u.class_gradients);
    const ClassGradients g_agg = aggregate_gradients(reported);
    const PrototypeTable& prototypes = context.teacher->prototypes();

    next.bank = g_agg.empty() ? state.bank
                              : optimize_features(state.bank, g_agg, state.retrained_head,
                                                  prototypes, config.synthesis);
    next.retrained_head =
        retrain_classifier(state.retrained_head, next.bank, config.retrain_steps,
                           config.retrain_lr, config.retrain_batch,
                           derive_seed(seed, {kRetrainStream, round}));

    ClassGradients g_v;
    for (const auto& [c, g] : g_agg) g_v.emplace(c, federated_gradient(state.retrained_head, next.bank, c));
    SynthesisConfig report = config.synthesis;
    report.eta_pcl = 0.0;
    metrics.loss_grad =
        synthesis_objective(next.bank, g_agg, state.retrained_head, prototypes, report).grad;
    metrics.loss_pcl = pcl_loss(next.bank, prototypes, config.synthesis.tau,
                                config.synthesis.interclass_negatives);
    metrics.grad_dissim = gradient_dissimilarity(g_v, g_agg, context.groups);
    if (context.train != nullptr)
      metrics.feat_dissim = feature_dissimilarity(
          next.bank, class_mean_features(next.global.theta, *context.train), context.groups);
    metrics.accuracy = groupwise_accuracy(next.retrained_model(), *context.test, context.groups);
  } else {
    next.bank = state.bank;
    next.retrained_head = next.global.phi;
    metrics.accuracy = groupwise_accuracy(next.global, *context.test, context.groups);
  }

  if (context.cka_probe != nullptr && updates.size() >= 2) {
    std::vector<Matrix> features;
    for (const auto& u : updates)
      features.push_back(forward_features_batch(u.params.theta, *context.cka_probe).transpose());
    metrics.cka = mean_pairwise_cka(features);
  }

  if (!next.global.all_finite() || !next.retrained_head.allFinite() || !metrics.all_finite())
    throw NumericError("non-finite values after round " + std::to_string(state.round));
  return result;
}

}  // namespace c2fl
