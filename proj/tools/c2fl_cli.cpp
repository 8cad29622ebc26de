// c2fl: federated long-tail simulator front end.
//
//   c2fl run --config cfg.json [--seed S] [--method M] [--workers N] [--out DIR] [--set k=v]...
//   c2fl partition-report --config cfg.json [--set k=v]...
//   c2fl compare DIR DIR...
//   c2fl export-stub --config cfg.json --out DIR
//
// Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure.

#include <cmath>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "c2fl/errors.hpp"
#include "c2fl/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

c2fl::ExperimentConfig load(const std::string& path, const std::vector<std::string>& overrides,
                            std::optional<std::uint64_t> seed, const std::string& method) {
  nlohmann::json j = c2fl::load_config_json(path);
  for (const auto& o : overrides) c2fl::apply_override(j, o);
  if (seed) j["seed"] = *seed;
  if (!method.empty()) j["method"] = method;
  return c2fl::ExperimentConfig::from_json(j).resolved();
}

void print_round(const c2fl::RoundMetrics& m) {
  std::cerr << "round " << m.round << "  acc_all=" << m.accuracy.all;
  if (m.accuracy.few) std::cerr << "  acc_few=" << *m.accuracy.few;
  if (m.loss_grad) std::cerr << "  loss_grad=" << *m.loss_grad;
  std::cerr << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated long-tail simulator with teacher-guided distillation and "
               "federated-feature classifier retraining"};
  app.require_subcommand(1);

  std::string config_path, method, out_dir;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  bool quiet = false;
  std::vector<std::string> overrides;

  auto* run = app.add_subcommand("run", "Run an experiment and write metrics");
  run->add_option("--config", config_path, "JSON config file")->required();
  run->add_option("--seed", seed, "Master seed (overrides config)");
  run->add_option("--method", method, "fedavg | clip2fl | no_pcl | no_kd");
  run->add_option("--workers", workers, "Client worker threads")->check(CLI::PositiveNumber);
  run->add_option("--out", out_dir, "Output directory (overrides config output_dir)");
  run->add_option("--set", overrides, "Override: section.key=value");
  run->add_flag("--quiet", quiet, "No per-round progress on stderr");

  auto* report = app.add_subcommand("partition-report", "Per-client per-class counts as CSV");
  report->add_option("--config", config_path, "JSON config file")->required();
  report->add_option("--seed", seed, "Master seed (overrides config)");
  report->add_option("--set", overrides, "Override: section.key=value");

  std::vector<std::string> dirs;
  auto* compare = app.add_subcommand("compare", "Summarize final accuracies of several runs");
  compare->add_option("dirs", dirs, "Run output directories")->required()->expected(2, -1);

  auto* exporter = app.add_subcommand(
      "export-stub", "Write the stub teacher's embeddings in the C2FL-EMB format");
  exporter->add_option("--config", config_path, "JSON config file")->required();
  exporter->add_option("--seed", seed, "Master seed (overrides config)");
  exporter->add_option("--out", out_dir, "Output directory")->required();
  exporter->add_option("--set", overrides, "Override: section.key=value");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      auto cfg = load(config_path, overrides, seed, method);
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      std::cerr << "c2fl: " << cfg.method << " seed " << cfg.seed << ", " << cfg.rounds
                << " rounds -> " << cfg.output_dir << '\n';
      c2fl::RoundObserver progress;
      if (!quiet) progress = print_round;
      c2fl::run_to_directory(cfg, workers, cfg.output_dir, progress);
    } else if (*report) {
      std::cout << c2fl::partition_report_csv(load(config_path, overrides, seed, ""));
    } else if (*compare) {
      std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
      std::cout << c2fl::compare_runs(paths);
    } else if (*exporter) {
      auto cfg = load(config_path, overrides, seed, "");
      auto setup = c2fl::build_setup(cfg);
      std::unordered_map<std::uint64_t, c2fl::Vector> samples;
      for (auto id : setup.train.ids) samples.emplace(id, setup.teacher->output(id).image_embedding);
      c2fl::save_embeddings(out_dir, setup.teacher->prototypes(), samples, "stub");
    }
  } catch (const c2fl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const c2fl::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const c2fl::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  }
  return 0;
}
