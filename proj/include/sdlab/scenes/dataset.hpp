#pragma once

#include <sdlab/core/png_io.hpp>
#include <sdlab/core/rng.hpp>
#include <sdlab/scenes/rasterize.hpp>
#include <sdlab/scenes/scene.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlab::scenes {

struct SceneRow {
  SceneSpec spec;
  PromptCode code;
  std::string file;
};

struct DatasetConfig {
  int n_scenes = 2000;
  std::uint64_t seed = 0;
  int res = 32;
  int bench_count = 35;  // held-out scenes reserved for the benchmark suite
};

/// In-memory dataset: rows carry specs, and images are re-rasterized on
/// demand (rasterization is deterministic, so specs are the ground truth).
struct Dataset {
  DatasetConfig cfg;
  std::vector<SceneRow> train;
  std::vector<SceneRow> bench;
};

/// Block-shuffled round-robin: exact class balance up to one block, random
/// order within each block.
class BalancedPicker {
 public:
  BalancedPicker(int n_classes, Rng& rng) : n_(n_classes), rng_(&rng) {}
  int next() {
    if (pos_ == int(block_.size())) {
      block_.resize(std::size_t(n_));
      for (int i = 0; i < n_; ++i) block_[std::size_t(i)] = i;
      for (int i = n_ - 1; i > 0; --i)
        std::swap(block_[std::size_t(i)], block_[std::size_t(rng_->uniform_int(i + 1))]);
      pos_ = 0;
    }
    return block_[std::size_t(pos_++)];
  }

 private:
  int n_ = 1;
  Rng* rng_;
  std::vector<int> block_;
  int pos_ = 0;
};

inline SceneSpec sample_spec(Rng& rng, BalancedPicker& shapes, BalancedPicker& colors,
                             BalancedPicker& accs, BalancedPicker& bgs) {
  SceneSpec s;
  s.shape = Shape(shapes.next());
  s.color_id = colors.next();
  s.accessory = Accessory(accs.next());
  s.background_id = bgs.next();
  s.pos_x = rng.uniform(-0.2, 0.2);
  s.pos_y = rng.uniform(-0.2, 0.2);
  s.scale = rng.uniform(0.5, 0.9);
  return s;
}

inline Dataset build_dataset(const DatasetConfig& cfg) {
  if (cfg.n_scenes < 1) throw std::invalid_argument("build_dataset: n_scenes must be >= 1");
  Dataset ds;
  ds.cfg = cfg;
  Rng rng(cfg.seed);
  BalancedPicker shapes(kNumShapes, rng), colors(kNumColors, rng), accs(kNumAccessories, rng),
      bgs(kNumBackgrounds, rng);
  char buf[64];
  for (int i = 0; i < cfg.n_scenes; ++i) {
    SceneRow row;
    row.spec = sample_spec(rng, shapes, colors, accs, bgs);
    row.code = PromptCode::encode(row.spec);
    std::snprintf(buf, sizeof buf, "train_%05d.png", i);
    row.file = buf;
    ds.train.push_back(row);
  }
  Rng bench_rng = rng.fork(42);
  BalancedPicker bshapes(kNumShapes, bench_rng), bcolors(kNumColors, bench_rng),
      baccs(kNumAccessories, bench_rng), bbgs(kNumBackgrounds, bench_rng);
  for (int i = 0; i < cfg.bench_count; ++i) {
    SceneRow row;
    row.spec = sample_spec(bench_rng, bshapes, bcolors, baccs, bbgs);
    row.code = PromptCode::encode(row.spec);
    std::snprintf(buf, sizeof buf, "bench_%03d.png", i);
    row.file = buf;
    ds.bench.push_back(row);
  }
  return ds;
}

inline nlohmann::ordered_json row_to_json(const SceneRow& row, const char* split) {
  nlohmann::ordered_json j;
  j["file"] = row.file;
  j["split"] = split;
  j["code"] = row.code.value;
  j["prompt"] = describe(row.spec);
  j["spec"] = spec_to_json(row.spec);
  return j;
}

/// Writes PNG renders plus manifest.jsonl (one JSON object per scene).
inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream mf(dir + "/manifest.jsonl", std::ios::trunc);
  if (!mf) throw std::runtime_error("write_dataset: cannot open manifest in " + dir);
  auto emit = [&](const SceneRow& row, const char* split) {
    write_png(dir + "/" + row.file, rasterize(row.spec, ds.cfg.res).cast<double>());
    mf << row_to_json(row, split).dump() << '\n';
  };
  for (const auto& row : ds.train) emit(row, "train");
  for (const auto& row : ds.bench) emit(row, "bench");
  nlohmann::ordered_json meta;
  meta["n_scenes"] = ds.cfg.n_scenes;
  meta["seed"] = ds.cfg.seed;
  meta["res"] = ds.cfg.res;
  meta["bench_count"] = ds.cfg.bench_count;
  std::ofstream(dir + "/dataset.json") << meta.dump(2) << '\n';
}

inline Dataset read_dataset(const std::string& dir) {
  std::ifstream meta_in(dir + "/dataset.json");
  if (!meta_in) throw std::runtime_error("read_dataset: missing dataset.json in " + dir);
  nlohmann::json meta = nlohmann::json::parse(meta_in);
  Dataset ds;
  ds.cfg.n_scenes = meta.at("n_scenes").get<int>();
  ds.cfg.seed = meta.at("seed").get<std::uint64_t>();
  ds.cfg.res = meta.at("res").get<int>();
  ds.cfg.bench_count = meta.at("bench_count").get<int>();
  std::ifstream mf(dir + "/manifest.jsonl");
  if (!mf) throw std::runtime_error("read_dataset: missing manifest.jsonl in " + dir);
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SceneRow row;
    row.spec = spec_from_json(j.at("spec"));
    row.code = PromptCode{j.at("code").get<int>()};
    row.file = j.at("file").get<std::string>();
    if (row.code != PromptCode::encode(row.spec))
      throw std::runtime_error("read_dataset: code/spec mismatch for " + row.file);
    (j.at("split") == "bench" ? ds.bench : ds.train).push_back(row);
  }
  return ds;
}

}  // namespace sdlab::scenes
