#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "c2fl/data.hpp"
#include "c2fl/metrics.hpp"
#include "c2fl/server.hpp"
#include "c2fl/teacher.hpp"

namespace c2fl {

struct DatasetSection {
  std::string source = "blobs";  // "blobs" | "import"
  std::string path;              // import directory
  int num_classes = 10;
  int input_dim = 32;
  std::int64_t n_max = 500;
  double imbalance_factor = 100.0;
  int n_test_per_class = 100;
  double spread = 1.5;
  double separation = 4.0;
  std::optional<std::uint64_t> seed;
  std::int64_t group_hi = 100;
  std::int64_t group_lo = 20;
};

struct PartitionSection {
  int num_clients = 20;
  double alpha = 0.5;
  std::optional<std::uint64_t> seed;
};

struct ModelSection {
  std::vector<int> hidden = {64};
  int feature_dim = 32;
  std::optional<std::uint64_t> seed;
};

struct TeacherSection {
  std::string source = "stub";  // "stub" | "file"
  std::string embeddings;       // C2FL-EMB directory when source == "file"
  double sigma = 0.3;
  double logit_scale = kDefaultLogitScale;
  std::optional<std::uint64_t> seed;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string method = "clip2fl";
  int rounds = 50;
  std::string output_dir = "runs/out";
  DatasetSection dataset;
  PartitionSection partition;
  ModelSection model;
  TeacherSection teacher;
  RoundConfig round;
  int features_per_class = 100;
  double bank_init_scale = 0.1;
  int cka_probe = 256;

  /// Throws ConfigError naming the offending field. Unknown keys are errors.
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// Full config with every default and every derived seed filled in.
  nlohmann::ordered_json to_json() const;

  /// Applies method implications (fedavg/no_kd: beta = 0, no_pcl: eta = 0),
  /// derives unset seeds from the master seed and validates.
  ExperimentConfig resolved() const;
  void validate() const;
};

/// Loads a JSON config file; a missing file is an IoError.
nlohmann::json load_config_json(const std::filesystem::path& path);
/// Applies "section.key=value" (value parsed as JSON, else taken as a string).
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Everything built before the first round.
struct ExperimentSetup {
  LabeledDataset train;
  LabeledDataset test;
  ClassCounts counts;
  std::vector<ClassGroup> groups;
  std::vector<LabeledDataset> clients;
  std::optional<TeacherProvider> teacher;
  Matrix cka_probe;  // input_dim x n, may be empty
  std::vector<std::string> warnings;
};

/// Dataset, long-tail subsample and partition only (no teacher).
ExperimentSetup build_data(const ExperimentConfig& resolved);
ExperimentSetup build_setup(const ExperimentConfig& resolved);

struct RunResult {
  std::vector<RoundMetrics> metrics;
  ServerState final_state;
};

using RoundObserver = std::function<void(const RoundMetrics&)>;

RunResult run_experiment(const ExperimentConfig& resolved, int workers,
                         const RoundObserver& observer = {});

/// Runs and writes metrics.jsonl, final.json and config.resolved.json into
/// `out_dir`. metrics.jsonl is flushed after every round, before `observer`.
RunResult run_to_directory(const ExperimentConfig& resolved, int workers,
                           const std::filesystem::path& out_dir,
                           const RoundObserver& observer = {});

/// CSV: "client,<class names...>" then one row of counts per client.
std::string partition_report_csv(const ExperimentConfig& resolved);

struct RunSummary {
  std::string dir;
  std::string method;
  std::uint64_t seed = 0;
  RoundMetrics final;
};

/// Reads config.resolved.json and the last metrics.jsonl record of a run.
RunSummary read_run_summary(const std::filesystem::path& dir);

/// CSV table: method,metric,<seed columns>,mean.
std::string compare_runs(const std::vector<std::filesystem::path>& dirs);

}  // namespace c2fl
