#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sdlab/bench/suite.hpp>
#include <sdlab/diffusion/checkpoint.hpp>
#include <sdlab/edit/checkpoint.hpp>
#include <sdlab/eval/probe.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

using namespace sdlab;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const std::string& log = "cli_scratch/log.txt") {
  const std::string cmd = std::string(SDLAB_CLI_PATH) + " " + args + " > " + log + " 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kSpecJson =
    R"({"shape":"circle","color":"red","accessory":"none","background":0,"position":[0,0],"scale":0.7})";

/// Shared tiny artifacts, built once: a 16x16 dataset, a briefly trained
/// denoiser, and a probe certified at threshold zero.
struct Fixture {
  Fixture() {
    fs::remove_all("cli_scratch");
    fs::create_directories("cli_scratch");
    REQUIRE(run_cli("gen-data --n 16 --res 16 --out cli_scratch/ds --seed 3") == 0);
    REQUIRE(run_cli("train --dataset cli_scratch/ds --steps 25 --base-width 8 "
                    "--out cli_scratch/den.ckpt --seed 1") == 0);
    REQUIRE(run_cli("train-probe --dataset cli_scratch/ds --steps 80 --certify-threshold 0 "
                    "--out cli_scratch/probe.ckpt") == 0);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("dataset generation is reproducible and guards its output directory") {
  fixture();
  CHECK(run_cli("gen-data --n 16 --res 16 --out cli_scratch/ds_b --seed 3") == 0);
  CHECK(slurp("cli_scratch/ds_b/manifest.jsonl") == slurp("cli_scratch/ds/manifest.jsonl"));
  CHECK(slurp("cli_scratch/ds_b/suite.json") == slurp("cli_scratch/ds/suite.json"));
  // The held-out split is ready for the benchmark runner.
  bench::BenchSuite suite = bench::load_suite("cli_scratch/ds/suite.json");
  CHECK(suite.entries.size() == 35 * 3);

  CHECK(run_cli("gen-data --n 16 --res 16 --out cli_scratch/ds_b --seed 3") == 2);
  CHECK(run_cli("gen-data --n 16 --res 16 --out cli_scratch/ds_b --seed 3 --force") == 0);
  CHECK(run_cli("gen-data --n 0 --out cli_scratch/ds_zero") == 1);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 1);  // a subcommand is required
}

TEST_CASE("training writes a reloadable checkpoint with manifest and loss curve") {
  fixture();
  CHECK(fs::exists("cli_scratch/den.ckpt.loss.csv"));
  CHECK(fs::exists("cli_scratch/den.ckpt.manifest.json"));
  auto loaded = diffusion::load_denoiser<double>("cli_scratch/den.ckpt");
  CHECK(loaded.model.config().res == 16);
  CHECK(loaded.model.config().base_width == 8);
  CHECK(loaded.manifest.at("train_steps").get<int>() == 25);

  // A non-checkpoint file is refused, and the CLI reports it as a runtime error.
  std::ofstream("cli_scratch/garbage.ckpt") << "not a checkpoint";
  CHECK(run_cli("sample --ckpt cli_scratch/garbage.ckpt --cond 1 --out cli_scratch/g.png") == 2);
}

TEST_CASE("sampling is deterministic per seed and supports unguided draws") {
  fixture();
  CHECK(run_cli("sample --ckpt cli_scratch/den.ckpt --cond 3 --seed 9 --ddim-steps 10 "
                "--out cli_scratch/s1.png") == 0);
  CHECK(run_cli("sample --ckpt cli_scratch/den.ckpt --cond 3 --seed 9 --ddim-steps 10 "
                "--out cli_scratch/s2.png") == 0);
  CHECK(run_cli("sample --ckpt cli_scratch/den.ckpt --cond 3 --seed 10 --ddim-steps 10 "
                "--out cli_scratch/s3.png") == 0);
  CHECK(slurp("cli_scratch/s1.png") == slurp("cli_scratch/s2.png"));
  CHECK(slurp("cli_scratch/s1.png") != slurp("cli_scratch/s3.png"));
  CHECK(fs::exists("cli_scratch/s1.png.manifest.json"));
  CHECK(run_cli("sample --ckpt cli_scratch/den.ckpt --cond 3 --cfg 0 --ddim-steps 10 "
                "--out cli_scratch/s0.png") == 0);
  CHECK(run_cli("sample --ckpt cli_scratch/den.ckpt --cond 99999 --out cli_scratch/sx.png") == 1);
}

TEST_CASE("editing at lambda zero reproduces shared-latent dds byte for byte") {
  fixture();
  const std::string common = std::string("edit --ckpt cli_scratch/den.ckpt --steps 12 "
                                         "--log-every 4 --seed 5 --task texturing "
                                         "--source-spec '") +
                             kSpecJson + "'";
  CHECK(run_cli(common + " --method piva --lambda 0 --out cli_scratch/e_piva0") == 0);
  CHECK(run_cli(common + " --method dds-shared --out cli_scratch/e_dds") == 0);
  CHECK(slurp("cli_scratch/e_piva0/edited.png") == slurp("cli_scratch/e_dds/edited.png"));
  CHECK(slurp("cli_scratch/e_piva0/trajectory.csv")
            .starts_with("step,mse_to_source,alignment,field_norm,psi_loss,phi_loss"));

  // The run checkpoint restores against the same denoiser.
  auto loaded = diffusion::load_denoiser<double>("cli_scratch/den.ckpt");
  auto st = edit::restore<double, scenes::PixelCanvas<double>>("cli_scratch/e_piva0/state.ckpt",
                                                               loaded.model);
  CHECK(st.step == 12);
  CHECK(st.cfg.lambda == 0.0);

  CHECK(run_cli(common + " --method sdedit --out cli_scratch/e_bad") == 1);
  CHECK(run_cli(common + " --method piva --lambda -1 --out cli_scratch/e_bad2") == 1);
}

TEST_CASE("benchmark reports are identical across process-pool sizes") {
  fixture();
  bench::BenchSuite suite = bench::load_suite("cli_scratch/ds/suite.json");
  bench::BenchSuite small;
  small.name = "small";
  small.entries.assign(suite.entries.begin(), suite.entries.begin() + 3);
  bench::save_suite("cli_scratch/small.json", small);

  const std::string common =
      "benchmark --suite cli_scratch/small.json --methods dds,piva:0.2 "
      "--ckpt cli_scratch/den.ckpt --probe cli_scratch/probe.ckpt --steps 4 --eval-poses 2 "
      "--seed 2 --out ";
  CHECK(run_cli(common + "cli_scratch/rep1") == 0);
  CHECK(run_cli(common + "cli_scratch/rep2 --jobs 2") == 0);
  CHECK(slurp("cli_scratch/rep1/report.csv") == slurp("cli_scratch/rep2/report.csv"));
  CHECK(slurp("cli_scratch/rep1/report.json") == slurp("cli_scratch/rep2/report.json"));
  CHECK(fs::exists("cli_scratch/rep2/summary.md"));
  int grids = 0;
  for (const auto& e : fs::directory_iterator("cli_scratch/rep2/grids")) {
    (void)e;
    ++grids;
  }
  CHECK(grids == 3);

  // Over-budget failures exit with the gate code.
  bench::BenchSuite gated = small;
  gated.entries.resize(1);
  bench::BenchEntry broken;
  broken.path = "missing.png";
  broken.source_prompt = "a red circle";
  broken.target_prompt = "a blue circle";
  broken.type = bench::EditType::texturing;
  gated.entries.push_back(broken);  // unrenderable: no spec
  bench::save_suite("cli_scratch/gated.json", gated);
  CHECK(run_cli("benchmark --suite cli_scratch/gated.json --methods dds,piva "
                "--ckpt cli_scratch/den.ckpt --probe cli_scratch/probe.ckpt --steps 4 "
                "--eval-poses 2 --out cli_scratch/rep3",
                "cli_scratch/gate_log.txt") == 3);
  CHECK(slurp("cli_scratch/gate_log.txt").find("gate failure") != std::string::npos);
}

TEST_CASE("lambda ablation writes its table") {
  fixture();
  CHECK(run_cli(std::string("ablate-lambda --ckpt cli_scratch/den.ckpt --values 0 0.4 "
                            "--seeds 1 --steps 4 --task texturing --source-spec '") +
                kSpecJson + "' --out cli_scratch/abl") == 0);
  const std::string csv = slurp("cli_scratch/abl/ablation.csv");
  CHECK(csv.starts_with("lambda,median_mse_to_source,median_alignment,runs"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("mock benchgen is offline-safe and writes a parseable suite") {
  fixture();
  // No token variable anywhere in the environment: mock mode must not care.
  const std::string cmd = std::string("env -u SDLAB_API_TOKEN ") + SDLAB_CLI_PATH +
                          " gen-bench --mock --out cli_scratch/gen.json "
                          "> cli_scratch/log.txt 2>&1";
  const int st = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(st));
  CHECK(WEXITSTATUS(st) == 0);
  bench::BenchSuite s = bench::load_suite("cli_scratch/gen.json");
  CHECK(s.entries.size() == 3);
  CHECK(s.entries[0].path == bench::kFlowerBoxAssetPath);
  // Giving neither --mock nor --endpoint is a usage error.
  CHECK(run_cli("gen-bench --out cli_scratch/gen2.json") == 1);
}

TEST_CASE("probe certification failure exits with the gate code") {
  fixture();
  CHECK(run_cli("train-probe --dataset cli_scratch/ds --steps 5 --certify-threshold 0.999 "
                "--out cli_scratch/probe_fail.ckpt",
                "cli_scratch/probe_log.txt") == 3);
  CHECK(slurp("cli_scratch/probe_log.txt").find("gate failure") != std::string::npos);
  auto probe = eval::load_probe<double>("cli_scratch/probe.ckpt");
  CHECK(probe.certified());
}
