#include "c2fl/experiment.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "c2fl/binary_io.hpp"
#include "c2fl/errors.hpp"
#include "c2fl/rng.hpp"

namespace c2fl {
namespace {

// Seed streams derived from the master seed.
enum SeedStream : std::uint64_t {
  kDatasetSeed = 1,
  kPartitionSeed = 2,
  kTeacherSeed = 3,
  kModelSeed = 4,
  kBankSeed = 5,
  kProbeSeed = 6,
  kSubsampleSeed = 7,
};

// Reads keys out of one JSON object and rejects keys nobody asked for.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string prefix)
      : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(label("") + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(label(key) + ": " + e.what());
    }
  }

  void read_seed(const char* key, std::optional<std::uint64_t>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      throw ConfigError(label(key) + ": expected a non-negative integer seed");
    out = j_.at(key).get<std::uint64_t>();
  }

  const nlohmann::json& child(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return j_.contains(key) ? j_.at(key) : empty;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.contains(key)) throw ConfigError(label(key) + ": unknown config key");
  }

  std::string label(const std::string& key) const {
    if (prefix_.empty()) return key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

 private:
  const nlohmann::json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

nlohmann::ordered_json seed_json(const std::optional<std::uint64_t>& s) {
  return s ? nlohmann::ordered_json(*s) : nlohmann::ordered_json(nullptr);
}

void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  binary_io::write_text(path, j.dump(2) + "\n");
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  SectionReader top(j, "");
  top.read("seed", c.seed);
  top.read("method", c.method);
  top.read("rounds", c.rounds);
  top.read("output_dir", c.output_dir);

  SectionReader ds(top.child("dataset"), "dataset");
  ds.read("source", c.dataset.source);
  ds.read("path", c.dataset.path);
  ds.read("num_classes", c.dataset.num_classes);
  ds.read("input_dim", c.dataset.input_dim);
  ds.read("n_max", c.dataset.n_max);
  ds.read("imbalance_factor", c.dataset.imbalance_factor);
  ds.read("n_test_per_class", c.dataset.n_test_per_class);
  ds.read("spread", c.dataset.spread);
  ds.read("separation", c.dataset.separation);
  ds.read_seed("seed", c.dataset.seed);
  std::vector<std::int64_t> thresholds{c.dataset.group_hi, c.dataset.group_lo};
  ds.read("group_thresholds", thresholds);
  if (thresholds.size() != 2) throw ConfigError("dataset.group_thresholds: expected [hi, lo]");
  c.dataset.group_hi = thresholds[0];
  c.dataset.group_lo = thresholds[1];
  ds.finish();

  SectionReader part(top.child("partition"), "partition");
  part.read("num_clients", c.partition.num_clients);
  part.read("alpha", c.partition.alpha);
  part.read_seed("seed", c.partition.seed);
  part.finish();

  SectionReader model(top.child("model"), "model");
  model.read("hidden", c.model.hidden);
  model.read("feature_dim", c.model.feature_dim);
  model.read_seed("seed", c.model.seed);
  model.finish();

  SectionReader tr(top.child("training"), "training");
  tr.read("epochs", c.round.local.epochs);
  tr.read("batch_size", c.round.local.batch_size);
  tr.read("lr_local", c.round.local.lr);
  tr.read("momentum", c.round.local.momentum);
  tr.read("beta", c.round.local.beta);
  tr.finish();

  SectionReader sv(top.child("server"), "server");
  sv.read("client_fraction", c.round.client_fraction);
  sv.read("features_per_class", c.features_per_class);
  sv.read("bank_init_scale", c.bank_init_scale);
  sv.read("feature_steps", c.round.synthesis.steps);
  sv.read("feature_lr", c.round.synthesis.lr);
  sv.read("eta_pcl", c.round.synthesis.eta_pcl);
  sv.read("tau", c.round.synthesis.tau);
  std::string negatives = c.round.synthesis.interclass_negatives ? "interclass" : "all";
  sv.read("pcl_negatives", negatives);
  if (negatives != "all" && negatives != "interclass")
    throw ConfigError("server.pcl_negatives: expected \"all\" or \"interclass\"");
  c.round.synthesis.interclass_negatives = negatives == "interclass";
  sv.read("per_class_cap", c.round.per_class_cap);
  sv.read("retrain_steps", c.round.retrain_steps);
  sv.read("retrain_lr", c.round.retrain_lr);
  sv.read("retrain_batch", c.round.retrain_batch);
  sv.finish();

  SectionReader te(top.child("teacher"), "teacher");
  te.read("source", c.teacher.source);
  te.read("embeddings", c.teacher.embeddings);
  te.read("sigma", c.teacher.sigma);
  te.read("logit_scale", c.teacher.logit_scale);
  te.read_seed("seed", c.teacher.seed);
  te.finish();

  SectionReader me(top.child("metrics"), "metrics");
  me.read("cka_probe", c.cka_probe);
  me.finish();

  top.finish();
  c.round.method = parse_method(c.method);
  return c;
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["method"] = method;
  j["rounds"] = rounds;
  j["output_dir"] = output_dir;
  j["dataset"] = {{"source", dataset.source},
                  {"path", dataset.path},
                  {"num_classes", dataset.num_classes},
                  {"input_dim", dataset.input_dim},
                  {"n_max", dataset.n_max},
                  {"imbalance_factor", dataset.imbalance_factor},
                  {"n_test_per_class", dataset.n_test_per_class},
                  {"spread", dataset.spread},
                  {"separation", dataset.separation},
                  {"seed", seed_json(dataset.seed)},
                  {"group_thresholds", {dataset.group_hi, dataset.group_lo}}};
  j["partition"] = {{"num_clients", partition.num_clients},
                    {"alpha", partition.alpha},
                    {"seed", seed_json(partition.seed)}};
  j["model"] = {
      {"hidden", model.hidden}, {"feature_dim", model.feature_dim}, {"seed", seed_json(model.seed)}};
  j["training"] = {{"epochs", round.local.epochs},
                   {"batch_size", round.local.batch_size},
                   {"lr_local", round.local.lr},
                   {"momentum", round.local.momentum},
                   {"beta", round.local.beta}};
  j["server"] = {{"client_fraction", round.client_fraction},
                 {"features_per_class", features_per_class},
                 {"bank_init_scale", bank_init_scale},
                 {"feature_steps", round.synthesis.steps},
                 {"feature_lr", round.synthesis.lr},
                 {"eta_pcl", round.synthesis.eta_pcl},
                 {"tau", round.synthesis.tau},
                 {"pcl_negatives", round.synthesis.interclass_negatives ? "interclass" : "all"},
                 {"per_class_cap", round.per_class_cap},
                 {"retrain_steps", round.retrain_steps},
                 {"retrain_lr", round.retrain_lr},
                 {"retrain_batch", round.retrain_batch}};
  j["teacher"] = {{"source", teacher.source},
                  {"embeddings", teacher.embeddings},
                  {"sigma", teacher.sigma},
                  {"logit_scale", teacher.logit_scale},
                  {"seed", seed_json(teacher.seed)}};
  j["metrics"] = {{"cka_probe", cka_probe}};
  return j;
}

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig r = *this;
  r.round.method = parse_method(r.method);
  switch (r.round.method) {
    case Method::fedavg:
    case Method::no_kd:
      r.round.local.beta = 0.0;
      break;
    case Method::no_pcl:
      r.round.synthesis.eta_pcl = 0.0;
      break;
    case Method::clip2fl:
      break;
  }
  if (!r.dataset.seed) r.dataset.seed = derive_seed(seed, {kDatasetSeed});
  if (!r.partition.seed) r.partition.seed = derive_seed(seed, {kPartitionSeed});
  if (!r.model.seed) r.model.seed = derive_seed(seed, {kModelSeed});
  if (!r.teacher.seed) r.teacher.seed = derive_seed(seed, {kTeacherSeed});
  r.validate();
  return r;
}

void ExperimentConfig::validate() const {
  parse_method(method);
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (dataset.source != "blobs" && dataset.source != "import")
    throw ConfigError("dataset.source: expected \"blobs\" or \"import\"");
  if (dataset.source == "import" && dataset.path.empty())
    throw ConfigError("dataset.path: required when dataset.source is \"import\"");
  if (dataset.num_classes < 2) throw ConfigError("dataset.num_classes must be >= 2");
  if (dataset.input_dim < 1) throw ConfigError("dataset.input_dim must be >= 1");
  if (dataset.n_max < 1) throw ConfigError("dataset.n_max must be >= 1");
  if (!(dataset.imbalance_factor >= 1.0)) throw ConfigError("dataset.imbalance_factor must be >= 1");
  if (static_cast<double>(dataset.n_max) / dataset.imbalance_factor < 1.0)
    throw ConfigError("dataset.n_max / dataset.imbalance_factor must be >= 1");
  if (dataset.n_test_per_class < 1) throw ConfigError("dataset.n_test_per_class must be >= 1");
  if (dataset.spread < 0.0) throw ConfigError("dataset.spread must be >= 0");
  if (!(dataset.group_hi > dataset.group_lo && dataset.group_lo > 0))
    throw ConfigError("dataset.group_thresholds: need hi > lo > 0");
  if (partition.num_clients < 1) throw ConfigError("partition.num_clients must be >= 1");
  if (!(partition.alpha > 0.0)) throw ConfigError("partition.alpha must be > 0");
  for (int h : model.hidden)
    if (h < 1) throw ConfigError("model.hidden: layer sizes must be >= 1");
  if (model.feature_dim < 1) throw ConfigError("model.feature_dim must be >= 1");
  if (teacher.source != "stub" && teacher.source != "file")
    throw ConfigError("teacher.source: expected \"stub\" or \"file\"");
  if (teacher.source == "file" && teacher.embeddings.empty())
    throw ConfigError("teacher.embeddings: required when teacher.source is \"file\"");
  if (teacher.sigma < 0.0) throw ConfigError("teacher.sigma must be >= 0");
  if (!(teacher.logit_scale > 0.0)) throw ConfigError("teacher.logit_scale must be > 0");
  if (features_per_class < 1) throw ConfigError("server.features_per_class must be >= 1");
  if (!(bank_init_scale > 0.0)) throw ConfigError("server.bank_init_scale must be > 0");
  if (cka_probe < 0) throw ConfigError("metrics.cka_probe must be >= 0");
  round.validate();
}

nlohmann::json load_config_json(const std::filesystem::path& path) {
  const std::string text = binary_io::read_text(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects section.key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("--set: empty key in '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (!node->is_object() && !node->is_null())
      throw ConfigError("--set: '" + key + "' is not a section");
    start = dot + 1;
  }
}

ExperimentSetup build_data(const ExperimentConfig& cfg) {
  const auto& ds = cfg.dataset;
  ExperimentSetup setup;
  LabeledDataset pool;
  if (ds.source == "blobs") {
    pool = synth_blobs(ds.num_classes, ds.input_dim,
                       static_cast<int>(ds.n_max) + ds.n_test_per_class, ds.spread, *ds.seed,
                       ds.separation);
  } else {
    pool = load_dataset_dir(ds.path);
    if (pool.num_classes() != ds.num_classes || pool.input_dim() != ds.input_dim)
      throw ConfigError("dataset: imported data has " + std::to_string(pool.num_classes()) +
                        " classes of dim " + std::to_string(pool.input_dim()) +
                        ", config says " + std::to_string(ds.num_classes) + " / " +
                        std::to_string(ds.input_dim));
  }
  auto [test, train_pool] = split_per_class(pool, ds.n_test_per_class);
  for (std::size_t n : test.class_histogram())
    if (n < static_cast<std::size_t>(ds.n_test_per_class))
      throw ConfigError("dataset: not enough samples to hold out n_test_per_class per class");
  setup.test = std::move(test);
  setup.counts = make_longtail_counts(ds.n_max, ds.num_classes, ds.imbalance_factor);
  setup.train = subsample_longtail(train_pool, setup.counts,
                                   derive_seed(*ds.seed, {kSubsampleSeed}));
  setup.groups = split_many_medium_few(setup.counts, {ds.group_hi, ds.group_lo});
  setup.clients = dirichlet_partition(
      setup.train, PartitionSpec{cfg.partition.num_clients, cfg.partition.alpha, *cfg.partition.seed});
  return setup;
}

ExperimentSetup build_setup(const ExperimentConfig& cfg) {
  ExperimentSetup setup = build_data(cfg);
  const auto& te = cfg.teacher;
  if (te.source == "stub") {
    setup.teacher.emplace(
        stub_teacher(setup.train, cfg.model.feature_dim, te.sigma, te.logit_scale, *te.seed));
  } else {
    EmbeddingFile file = load_embeddings(te.embeddings);
    if (file.dim != cfg.model.feature_dim)
      throw ConfigError("teacher.embeddings: dim " + std::to_string(file.dim) +
                        " does not match model.feature_dim " +
                        std::to_string(cfg.model.feature_dim));
    setup.warnings = file.warnings;
    setup.teacher.emplace(file_teacher(file, setup.train, te.sigma, te.logit_scale, *te.seed));
  }
  if (cfg.cka_probe > 0) {
    // Balanced probe: round-robin over classes from a seeded order of the test set.
    Rng rng(derive_seed(cfg.seed, {kProbeSeed}));
    std::vector<std::vector<std::size_t>> by_class;
    for (int c = 0; c < setup.test.num_classes(); ++c) {
      auto members = setup.test.positions_of_class(c);
      rng.shuffle(members);
      by_class.push_back(std::move(members));
    }
    std::vector<std::size_t> picks;
    for (std::size_t i = 0; picks.size() < static_cast<std::size_t>(cfg.cka_probe); ++i) {
      bool any = false;
      for (const auto& members : by_class) {
        if (i < members.size() && picks.size() < static_cast<std::size_t>(cfg.cka_probe)) {
          picks.push_back(members[i]);
          any = true;
        }
      }
      if (!any) break;
    }
    setup.cka_probe = setup.test.gather(picks);
  }
  return setup;
}

RunResult run_experiment(const ExperimentConfig& cfg, int workers, const RoundObserver& observer) {
  ExperimentSetup setup = build_setup(cfg);
  std::vector<int> sizes{cfg.dataset.input_dim};
  sizes.insert(sizes.end(), cfg.model.hidden.begin(), cfg.model.hidden.end());
  sizes.push_back(cfg.model.feature_dim);
  ModelParams init = ModelParams::initialize(sizes, cfg.dataset.num_classes, *cfg.model.seed);
  ServerState state = ServerState::initial(std::move(init), cfg.features_per_class,
                                           cfg.bank_init_scale, derive_seed(cfg.seed, {kBankSeed}));

  RoundContext context;
  context.clients = setup.clients;
  context.teacher = &*setup.teacher;
  context.train = &setup.train;
  context.test = &setup.test;
  context.groups = setup.groups;
  context.cka_probe = setup.cka_probe.cols() >= 2 ? &setup.cka_probe : nullptr;
  context.workers = workers;

  RunResult result;
  for (int r = 0; r < cfg.rounds; ++r) {
    RoundResult round = run_round(state, context, cfg.round, cfg.seed);
    state = std::move(round.state);
    if (observer) observer(round.metrics);
    result.metrics.push_back(std::move(round.metrics));
  }
  result.final_state = std::move(state);
  return result;
}

RunResult run_to_directory(const ExperimentConfig& cfg, int workers,
                           const std::filesystem::path& out_dir, const RoundObserver& observer) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  write_json_file(out_dir / "config.resolved.json", cfg.to_json());

  const auto metrics_path = out_dir / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());
  RunResult result = run_experiment(cfg, workers, [&](const RoundMetrics& m) {
    metrics << m.to_json().dump() << '\n';
    metrics.flush();
    if (!metrics) throw IoError("write failed: " + metrics_path.string());
    if (observer) observer(m);
  });

  nlohmann::ordered_json final;
  final["method"] = cfg.method;
  final["seed"] = cfg.seed;
  final["rounds"] = cfg.rounds;
  final["final"] = result.metrics.back().to_json();
  write_json_file(out_dir / "final.json", final);
  return result;
}

std::string partition_report_csv(const ExperimentConfig& cfg) {
  const ExperimentSetup setup = build_data(cfg);
  std::ostringstream out;
  out << "client";
  for (const auto& name : setup.train.class_names) out << ',' << name;
  out << '\n';
  const auto table = partition_counts(setup.clients, setup.train.num_classes());
  for (std::size_t k = 0; k < table.size(); ++k) {
    out << k;
    for (auto n : table[k]) out << ',' << n;
    out << '\n';
  }
  return out.str();
}

RunSummary read_run_summary(const std::filesystem::path& dir) {
  RunSummary s;
  s.dir = dir.string();
  const auto config_path = dir / "config.resolved.json";
  if (!std::filesystem::exists(config_path)) throw IoError("missing run output: " + config_path.string());
  try {
    const auto cfg = nlohmann::json::parse(binary_io::read_text(config_path));
    s.method = cfg.at("method").get<std::string>();
    s.seed = cfg.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(config_path.string() + ": " + e.what());
  }

  const auto metrics_path = dir / "metrics.jsonl";
  std::ifstream in(metrics_path);
  if (!in) throw IoError("missing run output: " + metrics_path.string());
  std::string line, last;
  int line_no = 0, last_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    last = line;
    last_no = line_no;
  }
  if (last.empty()) throw FormatError(metrics_path.string() + ": no metrics records");
  try {
    s.final = RoundMetrics::from_json(nlohmann::json::parse(last));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(metrics_path.string() + ":" + std::to_string(last_no) + ": " + e.what());
  }
  return s;
}

std::string compare_runs(const std::vector<std::filesystem::path>& dirs) {
  if (dirs.size() < 2) throw ConfigError("compare needs at least two run directories");
  std::vector<RunSummary> runs;
  for (const auto& d : dirs) runs.push_back(read_run_summary(d));

  std::vector<std::string> methods;
  std::set<std::uint64_t> seed_set;
  for (const auto& r : runs) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
      methods.push_back(r.method);
    seed_set.insert(r.seed);
  }
  const std::vector<std::uint64_t> seeds(seed_set.begin(), seed_set.end());

  struct Metric {
    const char* name;
    std::optional<double> (*get)(const RoundMetrics&);
  };
  const Metric metrics[] = {
      {"acc_all", [](const RoundMetrics& m) -> std::optional<double> { return m.accuracy.all; }},
      {"acc_many", [](const RoundMetrics& m) { return m.accuracy.many; }},
      {"acc_medium", [](const RoundMetrics& m) { return m.accuracy.medium; }},
      {"acc_few", [](const RoundMetrics& m) { return m.accuracy.few; }},
  };

  std::ostringstream out;
  out.precision(6);
  out << "method,metric";
  for (auto s : seeds) out << ",seed_" << s;
  out << ",mean\n";
  for (const auto& method : methods) {
    for (const auto& metric : metrics) {
      out << method << ',' << metric.name;
      double total = 0.0;
      int n = 0;
      for (auto s : seeds) {
        // Several runs with the same (method, seed): average them.
        double cell = 0.0;
        int cell_n = 0;
        for (const auto& r : runs)
          if (r.method == method && r.seed == s)
            if (auto v = metric.get(r.final)) {
              cell += *v;
              ++cell_n;
            }
        out << ',';
        if (cell_n > 0) {
          out << cell / cell_n;
          total += cell / cell_n;
          ++n;
        }
      }
      out << ',';
      if (n > 0) out << total / n;
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace c2fl
