// Single entry point wiring every module behind subcommands. Exit codes:
// 0 success, 1 usage error, 2 runtime failure, 3 quality-gate failure
// (benchmark suite over its failure budget).
#include <CLI11.hpp>

#include <sdlab/bench/genclient.hpp>
#include <sdlab/bench/run.hpp>
#include <sdlab/bench/suite.hpp>
#include <sdlab/core/png_io.hpp>
#include <sdlab/core/sha1.hpp>
#include <sdlab/diffusion/checkpoint.hpp>
#include <sdlab/diffusion/ddim.hpp>
#include <sdlab/diffusion/train.hpp>
#include <sdlab/edit/checkpoint.hpp>
#include <sdlab/edit/run.hpp>
#include <sdlab/eval/probe.hpp>
#include <sdlab/scenes/dataset.hpp>

// httplib drags in <resolv.h>, whose `_res` macro corrupts any Eigen header
// read after it — keep it last.
#include <httplib.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace sdlab;

namespace {

/// Raised when a run completes but fails its quality gate (exit code 3).
struct GateFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string now_iso8601() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Content hash of a file in git blob form: sha1("blob <size>\0" + bytes).
std::string git_blob_hash(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  std::string pre = "blob " + std::to_string(bytes.size());
  pre.push_back('\0');
  return sha1_hex(pre + bytes);
}

/// Every run drops one manifest next to its outputs: subcommand, resolved
/// config with all defaults materialized, seed, input content hashes, and
/// start/finish timestamps. A run is reproducible from this file alone.
class RunManifest {
 public:
  RunManifest(const std::string& subcommand, std::uint64_t seed) {
    j_["subcommand"] = subcommand;
    j_["seed"] = seed;
    j_["started"] = now_iso8601();
    j_["inputs"] = ojson::object();
  }

  void config(ojson cfg) { j_["config"] = std::move(cfg); }
  void input(const std::string& path) { j_["inputs"][path] = git_blob_hash(path); }
  void note(const std::string& key, const ojson& value) { j_[key] = value; }

  /// Writes <dir>/manifest.json for directory outputs, or
  /// <file>.manifest.json beside single-file outputs.
  void write(const std::string& out_target) {
    j_["finished"] = now_iso8601();
    const fs::path target(out_target);
    const fs::path path =
        fs::is_directory(target) ? target / "manifest.json" : fs::path(out_target + ".manifest.json");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
    out << j_.dump(2) << "\n";
  }

 private:
  ojson j_;
};

/// Refuses to clobber existing non-empty output directories unless --force.
void ensure_out_dir(const std::string& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw std::runtime_error("output path exists and is not a directory: " + dir);
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw std::runtime_error("output directory is not empty: " + dir + " (use --force)");
  fs::create_directories(dir);
}

void ensure_out_file(const std::string& path, bool force) {
  if (fs::exists(path) && !force)
    throw std::runtime_error("output file exists: " + path + " (use --force)");
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  int n = 1000;
  std::string out;
  std::uint64_t seed = 0;
  int res = 32;
  int bench_count = 35;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  RunManifest man("gen-data", a.seed);
  scenes::DatasetConfig cfg;
  cfg.n_scenes = a.n;
  cfg.seed = a.seed;
  cfg.res = a.res;
  cfg.bench_count = a.bench_count;
  ensure_out_dir(a.out, a.force);
  scenes::Dataset ds = scenes::build_dataset(cfg);
  scenes::write_dataset(ds, a.out);
  // The held-out split doubles as the benchmark suite, ready for `benchmark`.
  bench::save_suite((fs::path(a.out) / "suite.json").string(), bench::build_toy_noe(ds.bench));
  ojson c;
  c["n_scenes"] = cfg.n_scenes;
  c["res"] = cfg.res;
  c["bench_count"] = cfg.bench_count;
  man.config(c);
  man.note("train_scenes", int(ds.train.size()));
  man.note("bench_scenes", int(ds.bench.size()));
  man.note("suite_entries", int(ds.bench.size()) * 3);
  man.write(a.out);
  std::cout << "wrote " << ds.train.size() << " training and " << ds.bench.size()
            << " held-out scenes to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string dataset;
  std::string out;
  int steps = 3000;
  int batch = 16;
  double lr = 2e-3;
  int base_width = 24;
  double null_dropout = 0.1;
  std::uint64_t seed = 0;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  RunManifest man("train", a.seed);
  man.input((fs::path(a.dataset) / "manifest.jsonl").string());
  ensure_out_file(a.out, a.force);

  scenes::Dataset ds = scenes::read_dataset(a.dataset);
  if (ds.train.empty()) throw std::runtime_error("dataset has no training scenes: " + a.dataset);

  diffusion::UNetConfig ucfg;
  ucfg.res = ds.cfg.res;
  ucfg.base_width = a.base_width;
  ucfg.vocab = scenes::PromptCode::vocab_size();
  ucfg.uses_null_condition = true;
  diffusion::ConditionedDenoiser<double> den(ucfg);
  Rng init_rng(a.seed);
  den.init_params(init_rng);
  diffusion::NoiseScheduleT<double> sched;

  // Scenes are rasterized once up front; specs are the ground truth.
  std::vector<MatX<double>> acts;
  acts.reserve(ds.train.size());
  for (const auto& row : ds.train)
    acts.push_back(diffusion::image_to_act(scenes::rasterize(row.spec, ds.cfg.res)));

  const int null_code = ucfg.null_code();
  auto draw = [&](Rng& rng, MatX<double>& x0, std::vector<int>& cond) {
    const Index hw = Index(ds.cfg.res) * ds.cfg.res;
    x0.resize(hw * a.batch, 3);
    cond.resize(std::size_t(a.batch));
    for (int b = 0; b < a.batch; ++b) {
      const std::size_t ri = std::size_t(rng.uniform_int(int(ds.train.size())));
      x0.middleRows(Index(b) * hw, hw) = acts[ri];
      cond[std::size_t(b)] = rng.uniform() < a.null_dropout
                                 ? null_code
                                 : scenes::PromptCode::encode(ds.train[ri].spec).value;
    }
  };

  diffusion::TrainConfig tcfg;
  tcfg.steps = a.steps;
  tcfg.batch = a.batch;
  tcfg.lr = a.lr;
  tcfg.seed = a.seed;
  diffusion::TrainLog log = diffusion::train_denoiser<double>(den, draw, sched, tcfg);
  diffusion::save_denoiser(a.out, den, sched, a.seed, a.steps);

  {
    std::ofstream curve(a.out + ".loss.csv");
    curve << "step,loss\n";
    for (std::size_t i = 0; i < log.loss.size(); ++i)
      curve << i << "," << log.loss[i] << "\n";
  }

  ojson c;
  c["steps"] = a.steps;
  c["batch"] = a.batch;
  c["lr"] = a.lr;
  c["base_width"] = a.base_width;
  c["null_dropout"] = a.null_dropout;
  c["res"] = ds.cfg.res;
  man.config(c);
  if (!log.loss.empty()) {
    man.note("first_loss", log.loss.front());
    man.note("last_loss", log.loss.back());
  }
  man.write(a.out);
  std::cout << "trained " << a.steps << " steps";
  if (!log.loss.empty()) std::cout << ", final loss " << log.loss.back();
  std::cout << "; checkpoint at " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-probe

struct TrainProbeArgs {
  std::string dataset;
  std::string out;
  int steps = 2000;
  int batch = 32;
  double lr = 2e-3;
  double certify_threshold = 0.95;
  std::uint64_t seed = 17;
  bool force = false;
};

int cmd_train_probe(const TrainProbeArgs& a) {
  RunManifest man("train-probe", a.seed);
  man.input((fs::path(a.dataset) / "manifest.jsonl").string());
  ensure_out_file(a.out, a.force);
  scenes::Dataset ds = scenes::read_dataset(a.dataset);
  std::vector<scenes::SceneSpec> specs;
  for (const auto& row : ds.train) specs.push_back(row.spec);

  eval::ProbeConfig pcfg;
  pcfg.res = ds.cfg.res;
  pcfg.steps = a.steps;
  pcfg.batch = a.batch;
  pcfg.lr = a.lr;
  pcfg.certify_threshold = a.certify_threshold;
  pcfg.seed = a.seed;
  eval::AttributeProbe<double> probe;
  try {
    probe = eval::train_probe<double>(specs, pcfg);
  } catch (const eval::ProbeError& ex) {
    // Certification is a quality gate, not a runtime fault.
    throw GateFailure(ex.what());
  }
  eval::save_probe(a.out, probe);

  ojson c;
  c["steps"] = a.steps;
  c["batch"] = a.batch;
  c["lr"] = a.lr;
  c["certify_threshold"] = a.certify_threshold;
  c["res"] = pcfg.res;
  man.config(c);
  const auto& acc = probe.holdout_accuracy();
  man.note("holdout_accuracy", ojson{{"shape", acc[0]}, {"color", acc[1]}, {"accessory", acc[2]}});
  man.write(a.out);
  std::cout << "probe certified (shape " << acc[0] << ", color " << acc[1] << ", accessory "
            << acc[2] << "); checkpoint at " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sample

struct SampleArgs {
  std::string ckpt;
  std::string out;
  int cond = 0;
  double cfg_scale = 3.0;
  int ddim_steps = 50;
  std::uint64_t seed = 0;
  bool force = false;
};

int cmd_sample(const SampleArgs& a) {
  RunManifest man("sample", a.seed);
  man.input(a.ckpt);
  ensure_out_file(a.out, a.force);
  auto loaded = diffusion::load_denoiser<double>(a.ckpt);
  if (a.cond < 0 || a.cond >= loaded.model.config().vocab)
    throw std::invalid_argument("condition code out of range [0, " +
                                std::to_string(loaded.model.config().vocab) + ")");
  ImageT<double> img = diffusion::ddim_sample(loaded.model, a.cond, a.ddim_steps, a.cfg_scale,
                                              loaded.sched, a.seed);
  write_png(a.out, img);
  ojson c;
  c["cond"] = a.cond;
  c["cfg"] = a.cfg_scale;
  c["ddim_steps"] = a.ddim_steps;
  man.config(c);
  if (a.cond < scenes::PromptCode::num_attribute_codes())
    man.note("prompt", scenes::describe(scenes::PromptCode{a.cond}));
  man.write(a.out);
  std::cout << "wrote sample to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// shared source/target resolution for edit and ablate-lambda

struct SourceArgs {
  std::string source_spec;   // JSON file path or inline JSON
  std::string source_image;  // PNG path (requires source_code)
  int source_code = -1;
  int target = -1;
  std::string task;  // texturing | addition | translation
};

struct ResolvedSource {
  ImageT<double> image;
  std::optional<scenes::SceneSpec> spec;
  int c_src = 0;
  int c_tgt = 0;
  std::vector<std::string> input_files;
};

ResolvedSource resolve_source(const SourceArgs& a, int res) {
  if (a.source_spec.empty() == a.source_image.empty())
    throw std::invalid_argument("give exactly one of --source-spec / --source-image");
  if ((a.target < 0) == a.task.empty())
    throw std::invalid_argument("give exactly one of --target / --task");

  ResolvedSource r;
  if (!a.source_spec.empty()) {
    std::string text = a.source_spec;
    if (fs::exists(a.source_spec)) {
      text = read_file_bytes(a.source_spec);
      r.input_files.push_back(a.source_spec);
    }
    r.spec = scenes::spec_from_json(json::parse(text));
    r.image = scenes::rasterize(*r.spec, res);
    r.c_src = a.source_code >= 0 ? a.source_code : scenes::PromptCode::encode(*r.spec).value;
  } else {
    if (a.source_code < 0)
      throw std::invalid_argument("--source-image requires --source-code");
    r.image = read_png(a.source_image);
    if (r.image.h != res || r.image.w != res)
      throw std::invalid_argument("source image must be " + std::to_string(res) + "x" +
                                  std::to_string(res) + " to match the model");
    r.c_src = a.source_code;
    r.input_files.push_back(a.source_image);
  }

  if (!a.task.empty()) {
    if (!r.spec)
      throw std::invalid_argument("--task needs --source-spec to derive the target");
    const scenes::EditType type = scenes::edit_type_from_name(a.task);
    for (const scenes::EditTask& t : scenes::make_edit_tasks(*r.spec))
      if (t.type == type) r.c_tgt = t.tgt_code.value;
  } else {
    if (a.target >= scenes::PromptCode::num_attribute_codes())
      throw std::invalid_argument("target code out of range [0, " +
                                  std::to_string(scenes::PromptCode::num_attribute_codes()) + ")");
    r.c_tgt = a.target;
  }
  return r;
}

void add_source_flags(CLI::App* sub, SourceArgs& a) {
  sub->add_option("--source-spec", a.source_spec,
                  "Scene spec as a JSON file path or inline JSON");
  sub->add_option("--source-image", a.source_image, "Source view PNG (with --source-code)");
  sub->add_option("--source-code", a.source_code, "Condition code of the source image");
  sub->add_option("--target", a.target, "Target condition code");
  sub->add_option("--task", a.task,
                  "Derive the target from the spec: texturing | addition | translation");
}

// ---------------------------------------------------------------------------
// edit

struct EditArgs {
  std::string ckpt;
  std::string out;
  std::string method = "piva";
  std::string generator = "pixel";
  std::string probe_path;
  SourceArgs src;
  edit::EditConfig cfg;  // lambda/steps/lrs/guidance defaults live here
  bool force = false;
};

ojson edit_config_json(const edit::EditConfig& c) {
  ojson j;
  j["method"] = edit::method_name(c.method);
  j["lambda"] = c.lambda;
  j["steps"] = c.steps;
  j["guidance_base"] = c.guidance_base;
  j["guidance_adapter"] = c.guidance_adapter;
  j["gen_lr"] = c.gen_lr;
  j["adapter_lr"] = c.adapter_lr;
  j["adapter_rank"] = c.adapter_rank;
  j["log_every"] = c.log_every;
  j["divergence_threshold"] = c.divergence_threshold;
  j["field_clip"] = c.field_clip;
  return j;
}

template <class Gen>
int edit_with_generator(const EditArgs& a, Gen source_gen, const ResolvedSource& src,
                        const diffusion::LoadedDenoiser<double>& loaded,
                        const eval::AttributeProbe<double>* probe, RunManifest& man) {
  scenes::fit_generator(source_gen, {{src.image, scenes::ViewPose::identity()}});
  auto st = edit::run_edit<double>(source_gen, src.c_src, src.c_tgt, loaded.model, loaded.sched,
                                   a.cfg, probe);

  const int res = loaded.model.config().res;
  write_png_any((fs::path(a.out) / "source.png").string(),
                st.source.render(scenes::ViewPose::identity(), res));
  write_png_any((fs::path(a.out) / "edited.png").string(),
                st.edited.render(scenes::ViewPose::identity(), res));
  edit::write_trajectory_csv((fs::path(a.out) / "trajectory.csv").string(), st.trajectory);
  edit::checkpoint(st, (fs::path(a.out) / "state.ckpt").string());

  man.note("steps_run", st.step);
  man.note("diverged", st.diverged);
  man.note("aborted", st.aborted);
  if (st.aborted) man.note("abort_reason", st.abort_reason);
  if (!st.trajectory.empty()) {
    const auto& last = st.trajectory.back();
    man.note("final_mse_to_source", last.mse_to_source);
    if (std::isfinite(last.alignment)) man.note("final_alignment", last.alignment);
  }
  man.write(a.out);

  if (st.aborted) {
    std::cerr << "edit aborted: " << st.abort_reason << " (rolled back to step " << st.step
              << ")\n";
    return 2;
  }
  if (st.diverged)
    std::cerr << "warning: drift flag set (moved more than "
              << a.cfg.divergence_threshold << " MSE from the source)\n";
  std::cout << "edited " << st.step << " steps; outputs in " << a.out << "\n";
  return 0;
}

int cmd_edit(const EditArgs& args) {
  EditArgs a = args;
  a.cfg.method = edit::method_from_name(a.method);
  a.cfg.validate();
  if (a.generator != "pixel" && a.generator != "neural")
    throw std::invalid_argument("unknown generator (use pixel or neural): " + a.generator);

  RunManifest man("edit", a.cfg.seed);
  man.input(a.ckpt);
  ensure_out_dir(a.out, a.force);
  auto loaded = diffusion::load_denoiser<double>(a.ckpt);
  const int res = loaded.model.config().res;
  ResolvedSource src = resolve_source(a.src, res);
  for (const auto& f : src.input_files) man.input(f);

  std::optional<eval::AttributeProbe<double>> probe;
  if (!a.probe_path.empty()) {
    probe = eval::load_probe<double>(a.probe_path);
    man.input(a.probe_path);
  }

  ojson c = edit_config_json(a.cfg);
  c["generator"] = a.generator;
  c["c_src"] = src.c_src;
  c["c_tgt"] = src.c_tgt;
  c["source_prompt"] = scenes::describe(scenes::PromptCode{src.c_src});
  c["target_prompt"] = scenes::describe(scenes::PromptCode{src.c_tgt});
  man.config(c);

  const eval::AttributeProbe<double>* probe_ptr = probe ? &*probe : nullptr;
  if (a.generator == "neural")
    return edit_with_generator(a, scenes::NeuralCanvas<double>(), src, loaded, probe_ptr, man);
  return edit_with_generator(a, scenes::PixelCanvas<double>(res), src, loaded, probe_ptr, man);
}

// ---------------------------------------------------------------------------
// benchmark

struct BenchmarkArgs {
  std::string suite;
  std::string ckpt;
  std::string probe_path;
  std::string out;
  std::string methods = "dds,piva";
  int steps = 800;
  int eval_poses = 16;
  int jobs = 1;
  std::uint64_t seed = 0;
  bool force = false;
};

/// Stable ordering regardless of how entries were sharded across jobs.
void sort_report(bench::MetricsReport& rep, const bench::BenchSuite& suite,
                 const std::vector<bench::MethodSpec>& methods) {
  std::map<std::string, int> entry_rank, method_rank;
  for (std::size_t i = 0; i < suite.entries.size(); ++i)
    entry_rank.emplace(suite.entries[i].id(), int(i));
  for (std::size_t i = 0; i < methods.size(); ++i)
    method_rank.emplace(methods[i].name(), int(i));
  auto key = [&](const std::string& entry, const std::string& method) {
    return std::pair<int, int>(entry_rank.count(entry) ? entry_rank[entry] : 1 << 20,
                               method_rank.count(method) ? method_rank[method] : 1 << 20);
  };
  std::stable_sort(rep.rows.begin(), rep.rows.end(),
                   [&](const auto& x, const auto& y) { return key(x.entry, x.method) < key(y.entry, y.method); });
  std::stable_sort(rep.failures.begin(), rep.failures.end(),
                   [&](const auto& x, const auto& y) { return key(x.entry, x.method) < key(y.entry, y.method); });
}

int cmd_benchmark(const BenchmarkArgs& a) {
  RunManifest man("benchmark", a.seed);
  man.input(a.suite);
  man.input(a.ckpt);
  man.input(a.probe_path);
  ensure_out_dir(a.out, a.force);

  bench::BenchSuite suite = bench::load_suite(a.suite);
  auto methods = bench::parse_methods(a.methods);
  auto loaded = diffusion::load_denoiser<double>(a.ckpt);
  auto probe = eval::load_probe<double>(a.probe_path);

  bench::SuiteRunConfig rcfg;
  rcfg.edit.steps = a.steps;
  rcfg.eval_poses = a.eval_poses;
  rcfg.seed = a.seed;

  bench::MetricsReport report;
  if (a.jobs <= 1 || suite.entries.size() < 2) {
    auto result = bench::run_suite<double>(suite, methods, loaded.model, loaded.sched, probe, rcfg);
    sort_report(result.report, suite, methods);
    report = result.report;
    bench::emit_report(result, a.out);
  } else {
    // Process pool: shard entries round-robin, run each shard in a forked
    // child writing into its own part directory, then merge the reports.
    const int jobs = std::min<int>(a.jobs, int(suite.entries.size()));
    std::vector<pid_t> pids;
    for (int k = 0; k < jobs; ++k) {
      bench::BenchSuite shard;
      shard.name = suite.name;
      for (std::size_t i = std::size_t(k); i < suite.entries.size(); i += std::size_t(jobs))
        shard.entries.push_back(suite.entries[i]);
      const std::string part_dir = (fs::path(a.out) / ("part-" + std::to_string(k))).string();
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        try {
          auto result =
              bench::run_suite<double>(shard, methods, loaded.model, loaded.sched, probe, rcfg);
          fs::create_directories(part_dir);
          bench::emit_report(result, part_dir);
          _exit(0);
        } catch (const std::exception& ex) {
          std::fprintf(stderr, "benchmark shard %d failed: %s\n", k, ex.what());
          _exit(2);
        }
      }
      pids.push_back(pid);
    }
    bool shard_failed = false;
    for (pid_t pid : pids) {
      int status = 0;
      waitpid(pid, &status, 0);
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) shard_failed = true;
    }
    if (shard_failed) throw std::runtime_error("a benchmark shard exited abnormally");

    report.entries = int(suite.entries.size());
    report.methods = int(methods.size());
    fs::create_directories(fs::path(a.out) / "grids");
    for (int k = 0; k < jobs; ++k) {
      const fs::path part_dir = fs::path(a.out) / ("part-" + std::to_string(k));
      bench::MetricsReport part =
          bench::report_from_json(ojson::parse(read_file_bytes((part_dir / "report.json").string())));
      report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
      report.failures.insert(report.failures.end(), part.failures.begin(), part.failures.end());
      const fs::path part_grids = part_dir / "grids";
      if (fs::exists(part_grids))
        for (const auto& entry : fs::directory_iterator(part_grids))
          fs::rename(entry.path(), fs::path(a.out) / "grids" / entry.path().filename());
    }
    sort_report(report, suite, methods);
    bench::detail::aggregate_rows(report, methods);
    bench::SuiteResult<double> merged;
    merged.report = report;
    bench::emit_report(merged, a.out);
    for (int k = 0; k < jobs; ++k)
      fs::remove_all(fs::path(a.out) / ("part-" + std::to_string(k)));
  }

  ojson c;
  c["methods"] = a.methods;
  c["steps"] = a.steps;
  c["eval_poses"] = a.eval_poses;
  c["jobs"] = a.jobs;
  man.config(c);
  man.note("rows", int(report.rows.size()));
  man.note("failures", int(report.failures.size()));
  man.note("ok", report.ok());
  man.write(a.out);

  std::cout << "scored " << report.rows.size() << " (entry, method) runs, "
            << report.failures.size() << " failures; report in " << a.out << "\n";
  if (!report.ok())
    throw GateFailure("more than 20% of the scheduled runs failed (" +
                      std::to_string(report.failures.size()) + " of " +
                      std::to_string(report.entries * report.methods) + ")");
  return 0;
}

// ---------------------------------------------------------------------------
// ablate-lambda

struct AblateArgs {
  std::string ckpt;
  std::string probe_path;
  std::string out;
  std::vector<double> values = {0.0, 0.2, 0.4, 1.0, 2.0};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int steps = 800;
  SourceArgs src;
  bool force = false;
};

int cmd_ablate(const AblateArgs& a) {
  RunManifest man("ablate-lambda", a.seeds.empty() ? 0 : a.seeds.front());
  man.input(a.ckpt);
  ensure_out_dir(a.out, a.force);
  auto loaded = diffusion::load_denoiser<double>(a.ckpt);
  ResolvedSource src = resolve_source(a.src, loaded.model.config().res);
  for (const auto& f : src.input_files) man.input(f);

  std::optional<eval::AttributeProbe<double>> probe;
  if (!a.probe_path.empty()) {
    probe = eval::load_probe<double>(a.probe_path);
    man.input(a.probe_path);
  }

  edit::EditConfig cfg;
  cfg.steps = a.steps;
  scenes::PixelCanvas<double> source_gen(loaded.model.config().res);
  scenes::fit_generator(source_gen, {{src.image, scenes::ViewPose::identity()}});
  auto summaries = edit::ablate_lambda<double>(source_gen, src.c_src, src.c_tgt, loaded.model,
                                               loaded.sched, a.values, a.seeds, cfg,
                                               probe ? &*probe : nullptr);

  const std::string csv_path = (fs::path(a.out) / "ablation.csv").string();
  {
    std::ofstream out(csv_path);
    out << "lambda,median_mse_to_source,median_alignment,runs\n";
    for (const auto& s : summaries)
      out << s.lambda << "," << s.median_mse_to_source << "," << s.median_alignment << ","
          << s.runs << "\n";
  }

  ojson c;
  c["values"] = a.values;
  c["seeds"] = a.seeds;
  c["steps"] = a.steps;
  c["c_src"] = src.c_src;
  c["c_tgt"] = src.c_tgt;
  man.config(c);
  man.write(a.out);
  std::cout << "ablation over " << a.values.size() << " lambda values x " << a.seeds.size()
            << " seeds; table in " << csv_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gen-bench

struct GenBenchArgs {
  std::string endpoint;
  bool mock = false;
  std::vector<std::string> assets;
  std::string image;
  std::string token_env;
  std::string out;
  int max_attempts = 3;
  bool verbose = false;
  bool force = false;
};

/// Live HTTP transport; constructed only here so the library stays offline.
class HttpTransport : public bench::Transport {
 public:
  std::string post_json(const std::string& url, const std::string& body,
                        const std::vector<bench::Header>& headers) override {
    const std::size_t scheme = url.find("://");
    if (scheme == std::string::npos) throw std::invalid_argument("endpoint is not a URL: " + url);
    const std::size_t slash = url.find('/', scheme + 3);
    const std::string base = slash == std::string::npos ? url : url.substr(0, slash);
    const std::string path = slash == std::string::npos ? "/" : url.substr(slash);
    httplib::Client client(base);
    client.set_read_timeout(60, 0);
    httplib::Headers hdrs;
    for (const auto& [k, v] : headers) hdrs.emplace(k, v);
    auto res = client.Post(path, hdrs, body, "application/json");
    if (!res)
      throw bench::TransportError(0, "no response from " + base + " (" +
                                         httplib::to_string(res.error()) + ")");
    if (res->status < 200 || res->status >= 300)
      throw bench::TransportError(res->status, "endpoint returned an error body");
    return res->body;
  }
};

int cmd_gen_bench(const GenBenchArgs& a) {
  if (a.mock == !a.endpoint.empty())
    throw std::invalid_argument("give exactly one of --mock / --endpoint");
  RunManifest man("gen-bench", 0);
  ensure_out_file(a.out, a.force);

  std::string image_png;
  if (!a.image.empty()) {
    image_png = read_file_bytes(a.image);
    man.input(a.image);
  } else {
    // Self-contained default: the front view of the default scene.
    image_png = encode_png(scenes::rasterize(scenes::SceneSpec{}, 32));
  }

  // The token is referenced by environment variable name only; its value is
  // read at send time and never recorded anywhere.
  std::string token_env = a.token_env;
  if (token_env.empty() && !a.mock) token_env = "SDLAB_API_TOKEN";

  bench::MockTransport mock;
  HttpTransport http;
  bench::Transport& transport = a.mock ? static_cast<bench::Transport&>(mock) : http;
  bench::GenClientConfig ccfg;
  ccfg.max_attempts = a.max_attempts;
  if (a.mock) ccfg.min_request_interval_s = 0.0;
  bench::GenClient::LogFn log;
  if (a.verbose) log = [](const std::string& line) { std::cerr << "[gen-bench] " << line << "\n"; };
  bench::GenClient client(transport, ccfg, log);

  std::vector<std::string> assets = a.assets;
  if (assets.empty()) assets.push_back(bench::kFlowerBoxAssetPath);

  bench::BenchSuite suite;
  suite.name = "generated";
  for (const auto& asset : assets) {
    bench::GenRequest req;
    req.asset_path = asset;
    req.image_png = image_png;
    req.endpoint = a.mock ? "mock://offline" : a.endpoint;
    req.token_env = token_env;
    auto entries = client.request_entries(req);
    suite.entries.insert(suite.entries.end(), entries.begin(), entries.end());
  }
  bench::save_suite(a.out, suite);

  ojson c;
  c["mode"] = a.mock ? "mock" : "endpoint";
  c["assets"] = assets;
  c["token_env"] = token_env;  // the name, never the value
  c["max_attempts"] = a.max_attempts;
  man.config(c);
  man.note("entries", int(suite.entries.size()));
  man.write(a.out);
  std::cout << "wrote " << suite.entries.size() << " entries to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Score-distillation editing laboratory"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* s_gd = app.add_subcommand("gen-data", "Build the procedural scene dataset");
  s_gd->add_option("--n", gd.n, "Number of training scenes")
      ->default_val(1000)
      ->check(CLI::PositiveNumber);
  s_gd->add_option("--out", gd.out, "Output dataset directory")->required();
  s_gd->add_option("--seed", gd.seed, "RNG seed")->default_val(0);
  s_gd->add_option("--res", gd.res, "Image resolution")->default_val(32);
  s_gd->add_option("--bench-count", gd.bench_count, "Held-out scenes for the benchmark split")
      ->default_val(35);
  s_gd->add_flag("--force", gd.force, "Overwrite a non-empty output directory");

  TrainArgs tr;
  auto* s_tr = app.add_subcommand("train", "Train the conditional denoiser on a dataset");
  s_tr->add_option("--dataset", tr.dataset, "Dataset directory from gen-data")->required();
  s_tr->add_option("--steps", tr.steps, "Optimization steps")->default_val(3000);
  s_tr->add_option("--out", tr.out, "Checkpoint output path")->required();
  s_tr->add_option("--batch", tr.batch, "Batch size")->default_val(16);
  s_tr->add_option("--lr", tr.lr, "Learning rate")->default_val(2e-3);
  s_tr->add_option("--base-width", tr.base_width, "U-Net base channel width")->default_val(24);
  s_tr->add_option("--null-dropout", tr.null_dropout,
                   "Probability of dropping the condition (enables guidance)")
      ->default_val(0.1);
  s_tr->add_option("--seed", tr.seed, "RNG seed")->default_val(0);
  s_tr->add_flag("--force", tr.force, "Overwrite an existing checkpoint");

  TrainProbeArgs tp;
  auto* s_tp = app.add_subcommand("train-probe", "Train and certify the attribute probe");
  s_tp->add_option("--dataset", tp.dataset, "Dataset directory from gen-data")->required();
  s_tp->add_option("--steps", tp.steps, "Optimization steps")->default_val(2000);
  s_tp->add_option("--batch", tp.batch, "Batch size")->default_val(32);
  s_tp->add_option("--lr", tp.lr, "Learning rate")->default_val(2e-3);
  s_tp->add_option("--certify-threshold", tp.certify_threshold,
                   "Minimum per-head held-out accuracy")
      ->default_val(0.95);
  s_tp->add_option("--seed", tp.seed, "RNG seed")->default_val(17);
  s_tp->add_option("--out", tp.out, "Probe checkpoint output path")->required();
  s_tp->add_flag("--force", tp.force, "Overwrite an existing checkpoint");

  SampleArgs sa;
  auto* s_sa = app.add_subcommand("sample", "Draw one guided DDIM sample");
  s_sa->add_option("--ckpt", sa.ckpt, "Denoiser checkpoint")->required();
  s_sa->add_option("--cond", sa.cond, "Condition code")->required();
  s_sa->add_option("--cfg", sa.cfg_scale, "Guidance scale")->default_val(3.0);
  s_sa->add_option("--ddim-steps", sa.ddim_steps, "DDIM steps")
      ->default_val(50)
      ->check(CLI::PositiveNumber);
  s_sa->add_option("--seed", sa.seed, "RNG seed")->default_val(0);
  s_sa->add_option("--out", sa.out, "Output PNG path")->required();
  s_sa->add_flag("--force", sa.force, "Overwrite an existing file");

  EditArgs ed;
  auto* s_ed = app.add_subcommand("edit", "Optimize a source image toward a target condition");
  s_ed->add_option("--ckpt", ed.ckpt, "Denoiser checkpoint")->required();
  s_ed->add_option("--method", ed.method, "sds | vsd | dds | dds-shared | piva")
      ->default_val("piva");
  s_ed->add_option("--lambda", ed.cfg.lambda, "Identity-regularizer weight")->default_val(0.4);
  s_ed->add_option("--steps", ed.cfg.steps, "Optimization steps")->default_val(800);
  s_ed->add_option("--gen-lr", ed.cfg.gen_lr, "Generator learning rate")->default_val(0.01);
  s_ed->add_option("--adapter-lr", ed.cfg.adapter_lr, "Adapter learning rate")->default_val(1e-4);
  s_ed->add_option("--guidance", ed.cfg.guidance_base, "Guidance scale of the frozen model")
      ->default_val(7.5);
  s_ed->add_option("--log-every", ed.cfg.log_every, "Trajectory logging period")->default_val(25);
  s_ed->add_option("--seed", ed.cfg.seed, "RNG seed")->default_val(0);
  s_ed->add_option("--generator", ed.generator, "pixel | neural")->default_val("pixel");
  s_ed->add_option("--probe", ed.probe_path, "Attribute probe checkpoint (enables alignment)");
  add_source_flags(s_ed, ed.src);
  s_ed->add_option("--out", ed.out, "Output directory")->required();
  s_ed->add_flag("--force", ed.force, "Overwrite a non-empty output directory");

  BenchmarkArgs bm;
  auto* s_bm = app.add_subcommand("benchmark", "Run an edit-method comparison over a suite");
  s_bm->add_option("--suite", bm.suite, "Benchmark suite JSON")->required();
  s_bm->add_option("--methods", bm.methods, "Comma-separated methods; piva:<lambda> sets lambda")
      ->default_val("dds,piva");
  s_bm->add_option("--ckpt", bm.ckpt, "Denoiser checkpoint")->required();
  s_bm->add_option("--probe", bm.probe_path, "Certified attribute probe checkpoint")->required();
  s_bm->add_option("--steps", bm.steps, "Edit steps per run")->default_val(800);
  s_bm->add_option("--eval-poses", bm.eval_poses, "Evaluation poses per entry")->default_val(16);
  s_bm->add_option("--jobs", bm.jobs, "Process-pool size")
      ->default_val(1)
      ->check(CLI::PositiveNumber);
  s_bm->add_option("--seed", bm.seed, "RNG seed")->default_val(0);
  s_bm->add_option("--out", bm.out, "Report output directory")->required();
  s_bm->add_flag("--force", bm.force, "Overwrite a non-empty output directory");

  AblateArgs ab;
  auto* s_ab = app.add_subcommand("ablate-lambda", "Trace the identity/alignment trade-off");
  s_ab->add_option("--ckpt", ab.ckpt, "Denoiser checkpoint")->required();
  s_ab->add_option("--values", ab.values, "Lambda values (default: 0 0.2 0.4 1 2)");
  s_ab->add_option("--seeds", ab.seeds, "Seeds shared across lambda values (default: 0 1 2)");
  s_ab->add_option("--steps", ab.steps, "Edit steps per run")->default_val(800);
  s_ab->add_option("--probe", ab.probe_path, "Attribute probe checkpoint (enables alignment)");
  add_source_flags(s_ab, ab.src);
  s_ab->add_option("--out", ab.out, "Output directory")->required();
  s_ab->add_flag("--force", ab.force, "Overwrite a non-empty output directory");

  GenBenchArgs gb;
  auto* s_gb = app.add_subcommand("gen-bench", "Generate benchmark entries via a chat endpoint");
  auto* opt_ep = s_gb->add_option("--endpoint", gb.endpoint, "Chat-completion endpoint URL");
  s_gb->add_flag("--mock", gb.mock, "Use the offline scripted transport")->excludes(opt_ep);
  s_gb->add_option("--asset", gb.assets, "Asset path(s) to request entries for");
  s_gb->add_option("--image", gb.image, "Front-view PNG sent with the request");
  s_gb->add_option("--token-env", gb.token_env,
                   "Name of the env var holding the bearer token (default SDLAB_API_TOKEN "
                   "for live endpoints; none for --mock)");
  s_gb->add_option("--max-attempts", gb.max_attempts, "Schema-retry budget")->default_val(3);
  s_gb->add_flag("--verbose", gb.verbose, "Log redacted request/reply bodies to stderr");
  s_gb->add_option("--out", gb.out, "Output suite JSON path")->required();
  s_gb->add_flag("--force", gb.force, "Overwrite an existing file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (s_gd->parsed()) return cmd_gen_data(gd);
    if (s_tr->parsed()) return cmd_train(tr);
    if (s_tp->parsed()) return cmd_train_probe(tp);
    if (s_sa->parsed()) return cmd_sample(sa);
    if (s_ed->parsed()) return cmd_edit(ed);
    if (s_bm->parsed()) return cmd_benchmark(bm);
    if (s_ab->parsed()) return cmd_ablate(ab);
    if (s_gb->parsed()) return cmd_gen_bench(gb);
  } catch (const GateFailure& e) {
    std::cerr << "gate failure: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
