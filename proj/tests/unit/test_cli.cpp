#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>

#include "doctest.h"

#include "c2fl/binary_io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "c2fl_unit_cli";

int run_cli(const std::string& args) {
  const std::string cmd = std::string(C2FL_CLI_PATH) + " " + args + " >" +
                          (kWork / "stdout.txt").string() + " 2>" +
                          (kWork / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string captured_stdout() { return c2fl::binary_io::read_text(kWork / "stdout.txt"); }

void write_config(const std::string& text) {
  c2fl::binary_io::write_text(kWork / "cfg.json", text);
}

const char* kTiny = R"({
  "seed": 1, "method": "fedavg", "rounds": 1,
  "dataset": {"num_classes": 3, "input_dim": 4, "n_max": 20, "imbalance_factor": 4,
              "n_test_per_class": 5, "group_thresholds": [10, 6]},
  "partition": {"num_clients": 3},
  "model": {"hidden": [4], "feature_dim": 3},
  "training": {"epochs": 1},
  "server": {"client_fraction": 0.7},
  "metrics": {"cka_probe": 8}
})";

}  // namespace

TEST_CASE("command line exit codes") {
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  const std::string cfg = (kWork / "cfg.json").string();
  const std::string out = (kWork / "run").string();

  SUBCASE("successful run") {
    write_config(kTiny);
    CHECK(run_cli("run --quiet --config " + cfg + " --out " + out) == 0);
    CHECK(fs::exists(fs::path(out) / "metrics.jsonl"));
    CHECK(run_cli("run --quiet --config " + cfg + " --method clip2fl --seed 4 --out " + out +
                  "_b --set server.feature_steps=2") == 0);
    CHECK(run_cli("compare " + out + " " + out + "_b") == 0);
    CHECK(captured_stdout().rfind("method,metric,seed_1,seed_4,mean\n", 0) == 0);
  }
  SUBCASE("partition report") {
    write_config(kTiny);
    CHECK(run_cli("partition-report --config " + cfg) == 0);
    CHECK(captured_stdout().rfind("client,class_0,class_1,class_2\n", 0) == 0);
  }
  SUBCASE("stub export loads back") {
    write_config(kTiny);
    const std::string emb = (kWork / "emb").string();
    CHECK(run_cli("export-stub --config " + cfg + " --out " + emb) == 0);
    CHECK(run_cli("run --quiet --config " + cfg + " --out " + out +
                  " --set teacher.source=file --set teacher.embeddings=" + emb) == 0);
  }
  SUBCASE("config errors exit 2") {
    write_config(R"({"server": {"typo": 1}})");
    CHECK(run_cli("run --config " + cfg) == 2);
    write_config(kTiny);
    CHECK(run_cli("run --config " + cfg + " --method creff") == 2);
    CHECK(run_cli("run --config " + cfg + " --set partition.alpha=-1") == 2);
  }
  SUBCASE("i/o and format errors exit 3") {
    CHECK(run_cli("run --config " + (kWork / "absent.json").string()) == 3);
    write_config(kTiny);
    CHECK(run_cli("run --quiet --config " + cfg + " --set teacher.source=file "
                  "--set teacher.embeddings=" + (kWork / "none").string()) == 3);
    CHECK(run_cli("compare " + out + " " + (kWork / "absent").string()) == 3);
  }
  SUBCASE("numeric failure exits 4") {
    write_config(kTiny);
    CHECK(run_cli("run --quiet --config " + cfg + " --out " + out + " --set training.lr_local=1e200") == 4);
  }
}
