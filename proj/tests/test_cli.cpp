// Drives the installed binary end to end: data generation, pretraining,
// evaluation, the -XLCO ablation path, and error handling. Takes the CLI
// path as argv[1]; returns nonzero on the first failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int failures = 0;

void check(bool ok, const std::string& what) {
  if (ok) {
    std::printf("ok    %s\n", what.c_str());
  } else {
    std::printf("FAIL  %s\n", what.c_str());
    ++failures;
  }
}

int run(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return status;
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return "";
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <path-to-xlp-binary>\n");
    return 2;
  }
  const std::string xlp = argv[1];
  const fs::path root = fs::temp_directory_path() / "xlp_cli_test";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string quiet = " > /dev/null 2>&1";
  const std::string data = (root / "data").string();
  const std::string run_small =
      " --set total_steps=25 --set warmup_steps=5 --set batch_size=2"
      " --set queue_capacity=16 --set log_interval=5"
      " --set data_dir=" + data + "/train --set eval_dir=" + data + "/eval";

  check(run(xlp + " gen-data --out " + data +
            " --set gen_mono_sentences=120 --set gen_train_pairs=150 --set gen_eval_pairs=40" +
            quiet) == 0,
        "gen-data succeeds");
  check(fs::exists(root / "data/train/vocab.txt"), "vocab written");
  check(fs::exists(root / "data/train/para.l0-l1.tsv"), "parallel corpus written");
  check(fs::exists(root / "data/config.resolved.txt"), "resolved config written");

  const std::string run1 = (root / "run1").string();
  check(run(xlp + " pretrain --out " + run1 + run_small + quiet) == 0, "pretrain succeeds");
  check(fs::exists(root / "run1/checkpoint_final.bin"), "checkpoint written");
  check(fs::exists(root / "run1/metrics.log"), "metrics written");

  // Same command, fresh output directory: byte-identical metrics.
  const std::string run2 = (root / "run2").string();
  run(xlp + " pretrain --out " + run2 + run_small + quiet);
  check(!slurp(root / "run1/metrics.log").empty() &&
            slurp(root / "run1/metrics.log") == slurp(root / "run2/metrics.log"),
        "identical command lines give byte-identical metrics logs");

  const std::string evald = (root / "eval").string();
  check(run(xlp + " eval-retrieval --out " + evald + run_small +
            " --set checkpoint=" + run1 + "/checkpoint_final.bin" + quiet) == 0,
        "eval-retrieval succeeds");
  {
    const std::string report = slurp(root / "eval/report.tsv");
    check(!report.empty(), "report written");
    std::istringstream is(report);
    std::string direction;
    int layer = 0;
    double acc = -1.0;
    bool in_range = true, saw_gap = false;
    while (is >> direction >> layer >> acc) {
      if (direction == "transfer_gap") {
        saw_gap = true;
        continue;
      }
      if (acc < 0.0 || acc > 1.0) in_range = false;
    }
    check(in_range, "accuracies within [0, 1]");
    check(saw_gap, "transfer gap reported");
  }

  check(run(xlp + " layer-sweep --out " + (root / "sweep").string() + run_small +
            " --set checkpoint=" + run1 + "/checkpoint_final.bin" + quiet) == 0,
        "layer-sweep succeeds");
  check(run(xlp + " estimate-mi --out " + (root / "mi").string() + run_small +
            " --set checkpoint=" + run1 + "/checkpoint_final.bin" + quiet) == 0,
        "estimate-mi succeeds");
  check(!slurp(root / "mi/mi.txt").empty(), "mi estimate written");

  // -XLCO ablation: no xlco entries in the metrics log.
  const std::string ablate = (root / "ablate").string();
  check(run(xlp + " pretrain --out " + ablate + run_small + " --set xlco=off" + quiet) == 0,
        "pretrain with xlco off succeeds");
  {
    const std::string log = slurp(root / "ablate/metrics.log");
    check(!log.empty() && log.find("\txlco\t") == std::string::npos,
          "ablated metrics log has no xlco entries");
  }

  // Unknown keys fail fast, nonzero, and leave no partial outputs behind.
  const std::string broken = (root / "broken").string();
  check(run(xlp + " pretrain --out " + broken + run_small + " --set no_such_key=1" + quiet) != 0,
        "unknown config key exits nonzero");
  check(!fs::exists(root / "broken/metrics.log"), "no partial metrics after failure");
  check(run(xlp + " pretrain --out " + (root / "broken2").string() + run_small +
            " --set data_dir=/nonexistent" + quiet) != 0,
        "missing data directory exits nonzero");

  check(run(xlp + " grad-check" + quiet) == 0, "grad-check passes");

  fs::remove_all(root);
  if (failures == 0) {
    std::printf("all cli checks passed\n");
    return 0;
  }
  std::printf("%d cli check(s) failed\n", failures);
  return 1;
}
