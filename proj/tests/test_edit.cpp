#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sdlab/core/sha1.hpp>
#include <sdlab/edit/checkpoint.hpp>
#include <sdlab/edit/run.hpp>
#include <sdlab/scenes/rasterize.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

using namespace sdlab;
using namespace sdlab::edit;
using diffusion::ConditionedDenoiser;
using diffusion::NoiseScheduleT;
using diffusion::UNetConfig;
using scenes::PixelCanvas;
using scenes::PromptCode;

namespace {

UNetConfig tiny_unet() {
  UNetConfig cfg;
  cfg.res = 8;
  cfg.base_width = 8;
  cfg.groups = 4;
  cfg.vocab = PromptCode::vocab_size();
  cfg.uses_null_condition = true;
  return cfg;
}

template <class S>
void perturb(ConditionedDenoiser<S>& den, Rng& rng, double scale = 0.05) {
  for (Index i = 0; i < den.params().data.size(); ++i)
    den.params().data[i] += S(scale * rng.normal());
}

ConditionedDenoiser<double> make_den(std::uint64_t seed = 91) {
  ConditionedDenoiser<double> den(tiny_unet());
  Rng rng(seed);
  den.init_params(rng);
  perturb(den, rng);
  return den;
}

PixelCanvas<double> scene_canvas(const scenes::SceneSpec& spec) {
  ImageT<double> img = scenes::rasterize(spec, 8);
  img.data = img.data.max(0.05).min(0.95);  // keep the logistic fit well-posed
  PixelCanvas<double> g(8);
  std::vector<std::pair<ImageT<double>, scenes::ViewPose>> pairs;
  pairs.emplace_back(img, scenes::ViewPose::identity());
  scenes::fit_generator(g, pairs, scenes::FitConfig{});
  return g;
}

scenes::SceneSpec red_circle() {
  scenes::SceneSpec s;
  s.shape = scenes::Shape::circle;
  s.color_id = 0;
  s.background_id = 0;
  s.accessory = scenes::Accessory::none;
  return s;
}

EditConfig quick_cfg(Method m, int steps, std::uint64_t seed = 5) {
  EditConfig cfg;
  cfg.method = m;
  cfg.steps = steps;
  cfg.seed = seed;
  cfg.log_every = 10;
  return cfg;
}

bool same_or_both_nan(double a, double b) {
  return (std::isnan(a) && std::isnan(b)) || a == b;
}

std::string vec_hash(const VecX<double>& v) {
  return sha1_hex(std::string(reinterpret_cast<const char*>(v.data()),
                              std::size_t(v.size()) * sizeof(double)));
}

}  // namespace

TEST_CASE("edit config and method names validate their inputs") {
  for (Method m : {Method::sds, Method::vsd, Method::dds, Method::dds_shared, Method::piva})
    CHECK(method_from_name(method_name(m)) == m);
  CHECK(method_from_name("dds_shared") == Method::dds_shared);
  CHECK_THROWS_AS(method_from_name("sdedit"), std::invalid_argument);

  EditConfig cfg;
  cfg.lambda = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.steps = -5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.gen_lr = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.log_every = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("zero-step run returns the source untouched, with one logged row") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  auto src = scene_canvas(red_circle());
  const int c = PromptCode::encode(red_circle()).value;

  auto st = run_edit(src, c, (c + 1) % PromptCode::num_attribute_codes(), den, sched,
                     quick_cfg(Method::piva, 0));
  CHECK(st.step == 0);
  CHECK((st.edited.params() - src.params()).abs().maxCoeff() == 0.0);
  REQUIRE(st.trajectory.size() == 1);
  CHECK(st.trajectory[0].step == 0);
  CHECK(st.trajectory[0].mse_to_source == 0.0);
  CHECK(st.trajectory[0].field_norm == 0.0);
  CHECK(std::isnan(st.trajectory[0].alignment));
  CHECK_FALSE(st.diverged);
  CHECK_FALSE(st.aborted);
}

TEST_CASE("identical seeds reproduce the run bit for bit; seeds matter") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  auto src = scene_canvas(red_circle());
  const int c_src = PromptCode::encode(red_circle()).value;
  const int c_tgt = c_src + 3;

  auto a = run_edit(src, c_src, c_tgt, den, sched, quick_cfg(Method::piva, 30, 7));
  auto b = run_edit(src, c_src, c_tgt, den, sched, quick_cfg(Method::piva, 30, 7));
  CHECK((a.edited.params() - b.edited.params()).abs().maxCoeff() == 0.0);
  REQUIRE(a.trajectory.size() == b.trajectory.size());
  for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
    CHECK(a.trajectory[i].step == b.trajectory[i].step);
    CHECK(a.trajectory[i].mse_to_source == b.trajectory[i].mse_to_source);
    CHECK(a.trajectory[i].field_norm == b.trajectory[i].field_norm);
  }

  auto c = run_edit(src, c_src, c_tgt, den, sched, quick_cfg(Method::piva, 30, 8));
  CHECK((a.edited.params() - c.edited.params()).abs().maxCoeff() > 0.0);
}

TEST_CASE("the source generator is never touched by a run") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  auto src = scene_canvas(red_circle());
  const std::string before = vec_hash(src.params());
  const int c_src = PromptCode::encode(red_circle()).value;

  auto st = run_edit(src, c_src, c_src + 5, den, sched, quick_cfg(Method::piva, 40));
  CHECK(vec_hash(src.params()) == before);
  CHECK(vec_hash(st.source.params()) == before);
  CHECK((st.edited.params() - src.params()).abs().maxCoeff() > 0.0);
}

TEST_CASE("adapters exist exactly for the methods that use them") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  auto src = scene_canvas(red_circle());
  const int c = PromptCode::encode(red_circle()).value;

  for (Method m : {Method::sds, Method::dds, Method::dds_shared}) {
    auto st = run_edit(src, c, c + 1, den, sched, quick_cfg(m, 3));
    CHECK_FALSE(st.psi.has_value());
    CHECK_FALSE(st.phi.has_value());
    CHECK_FALSE(st.adapter_opt.has_value());
  }
  auto v = run_edit(src, c, c + 1, den, sched, quick_cfg(Method::vsd, 3));
  CHECK_FALSE(v.psi.has_value());
  CHECK(v.phi.has_value());
  auto p = run_edit(src, c, c + 1, den, sched, quick_cfg(Method::piva, 3));
  CHECK(p.psi.has_value());
  CHECK(p.phi.has_value());
  CHECK(p.adapter_opt.has_value());
}

TEST_CASE("lambda zero runs the shared-latent method step for step") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  auto src = scene_canvas(red_circle());
  const int c_src = PromptCode::encode(red_circle()).value;
  const int c_tgt = c_src + 2;

  EditConfig cfg = quick_cfg(Method::piva, 25, 11);
  cfg.lambda = 0.0;
  auto a = run_edit(src, c_src, c_tgt, den, sched, cfg);
  cfg.method = Method::dds_shared;
  auto b = run_edit(src, c_src, c_tgt, den, sched, cfg);
  CHECK((a.edited.params() - b.edited.params()).abs().maxCoeff() == 0.0);
  for (std::size_t i = 0; i < a.trajectory.size(); ++i)
    CHECK(a.trajectory[i].mse_to_source == b.trajectory[i].mse_to_source);
}

TEST_CASE("editing toward the source prompt stays put") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  auto src = scene_canvas(red_circle());
  const int c = PromptCode::encode(red_circle()).value;

  EditConfig cfg = quick_cfg(Method::piva, 200, 3);
  auto st = run_edit(src, c, c, den, sched, cfg);
  CHECK_FALSE(st.aborted);
  CHECK(st.trajectory.back().mse_to_source <= 1e-3);
}

TEST_CASE("runaway optimization trips the rollback and the divergence flag") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  auto src = scene_canvas(red_circle());
  const int c = PromptCode::encode(red_circle()).value;

  SUBCASE("non-finite parameters roll back to the last snapshot") {
    EditConfig cfg = quick_cfg(Method::sds, 60, 2);
    cfg.gen_lr = 1e12;  // guaranteed overflow through the logistic gradient
    auto st = run_edit(src, c, c + 1, den, sched, cfg);
    if (st.aborted) {
      CHECK_FALSE(st.abort_reason.empty());
      CHECK(st.step < 60);
      CHECK(st.edited.params().isFinite().all());
    } else {
      // The squash keeps pixels bounded, so the run may survive; it must
      // then have drifted far enough to trip the divergence flag.
      CHECK(st.diverged);
    }
  }

  SUBCASE("crossing the configured drift threshold sets the sticky flag") {
    EditConfig cfg = quick_cfg(Method::sds, 200, 2);
    cfg.gen_lr = 2.0;
    cfg.divergence_threshold = 0.01;
    auto st = run_edit(src, c, c + 7, den, sched, cfg);
    CHECK(st.diverged);
    CHECK_FALSE(st.aborted);  // divergence flags, it does not abort
  }
}

TEST_CASE("checkpoint + resume reproduces the uninterrupted trajectory") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  auto src = scene_canvas(red_circle());
  const int c_src = PromptCode::encode(red_circle()).value;
  const int c_tgt = c_src + 4;
  const std::string path = "edit_ckpt_test.blob";

  EditConfig cfg = quick_cfg(Method::piva, 120, 21);
  cfg.log_every = 20;

  auto straight = run_edit(src, c_src, c_tgt, den, sched, cfg);

  auto st = init_edit(src, c_src, c_tgt, den, cfg);
  continue_edit(st, den, sched, 60);
  checkpoint(st, path);
  auto resumed = restore<double, PixelCanvas<double>>(path, den);

  CHECK(resumed.step == 60);
  CHECK(resumed.cfg.method == cfg.method);
  CHECK(resumed.cfg.lambda == cfg.lambda);
  CHECK(resumed.cfg.steps == cfg.steps);
  CHECK(resumed.cfg.seed == cfg.seed);
  CHECK(resumed.cfg.gen_lr == cfg.gen_lr);
  CHECK(resumed.cfg.adapter_lr == cfg.adapter_lr);
  CHECK(resumed.cfg.log_every == cfg.log_every);
  CHECK((resumed.edited.params() - st.edited.params()).abs().maxCoeff() == 0.0);
  CHECK((resumed.psi->arena.data - st.psi->arena.data).abs().maxCoeff() == 0.0);
  CHECK((resumed.phi->arena.data - st.phi->arena.data).abs().maxCoeff() == 0.0);

  continue_edit(resumed, den, sched, 120);
  CHECK(resumed.step == 120);
  CHECK((resumed.edited.params() - straight.edited.params()).abs().maxCoeff() == 0.0);
  REQUIRE(resumed.trajectory.size() == straight.trajectory.size());
  for (std::size_t i = 0; i < straight.trajectory.size(); ++i) {
    CHECK(resumed.trajectory[i].step == straight.trajectory[i].step);
    CHECK(resumed.trajectory[i].mse_to_source == straight.trajectory[i].mse_to_source);
    CHECK(resumed.trajectory[i].field_norm == straight.trajectory[i].field_norm);
    CHECK(same_or_both_nan(resumed.trajectory[i].psi_loss, straight.trajectory[i].psi_loss));
    CHECK(same_or_both_nan(resumed.trajectory[i].phi_loss, straight.trajectory[i].phi_loss));
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoints refuse garbage and future versions") {
  auto den = make_den();

  SUBCASE("corrupt file") {
    const std::string path = "edit_ckpt_garbage.blob";
    std::ofstream(path) << "this is not a checkpoint";
    CHECK_THROWS_AS((restore<double, PixelCanvas<double>>(path, den)), BlobError);
    std::remove(path.c_str());
  }

  SUBCASE("wrong kind") {
    const std::string path = "edit_ckpt_kind.blob";
    BlobWriter w;
    ojson m;
    m["kind"] = "something-else";
    w.write(path, m);
    CHECK_THROWS_AS((restore<double, PixelCanvas<double>>(path, den)), BlobError);
    std::remove(path.c_str());
  }

  SUBCASE("version from the future") {
    const std::string path = "edit_ckpt_version.blob";
    BlobWriter w;
    ojson m;
    m["kind"] = "edit-state";
    m["version"] = kEditCheckpointVersion + 1;
    w.write(path, m);
    CHECK_THROWS_AS((restore<double, PixelCanvas<double>>(path, den)), BlobError);
    std::remove(path.c_str());
  }
}

TEST_CASE("trajectory csv carries the fixed header and one line per row") {
  std::vector<TrajectoryRow> rows(3);
  rows[0] = {0, 0.0, std::nan(""), 0.0, std::nan(""), std::nan("")};
  rows[1] = {10, 0.01, 0.5, 2.5, 0.9, 0.8};
  rows[2] = {20, 0.02, 0.6, 1.5, 0.7, 0.6};
  const std::string path = "traj_test.csv";
  write_trajectory_csv(path, rows);

  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,mse_to_source,alignment,field_norm,psi_loss,phi_loss");
  int data_lines = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++data_lines;
  CHECK(data_lines == 3);
  std::remove(path.c_str());
}

TEST_CASE("lambda ablation: shared seeds, repeated values agree exactly") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  auto src = scene_canvas(red_circle());
  const int c_src = PromptCode::encode(red_circle()).value;
  const int c_tgt = c_src + 6;

  EditConfig cfg = quick_cfg(Method::piva, 15, 0);
  std::vector<std::uint64_t> seeds = {4, 9};

  auto out = ablate_lambda(src, c_src, c_tgt, den, sched, {0.4, 0.4}, seeds, cfg);
  REQUIRE(out.size() == 2);
  CHECK(out[0].lambda == out[1].lambda);
  CHECK(out[0].runs == 2);
  CHECK(out[0].median_mse_to_source == out[1].median_mse_to_source);
  CHECK(std::isnan(out[0].median_alignment));  // no probe attached
  CHECK(std::isnan(out[1].median_alignment));

  CHECK_THROWS_AS(ablate_lambda(src, c_src, c_tgt, den, sched, {0.4}, seeds, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(ablate_lambda(src, c_src, c_tgt, den, sched, {0.0, 0.4}, {}, cfg),
                  std::invalid_argument);
}

TEST_CASE("coordinate-network generator drives the same loop through adam") {
  auto den = make_den();
  NoiseScheduleT<double> sched;
  scenes::NeuralCanvasConfig ncfg;
  ncfg.hidden = 16;
  ncfg.depth = 2;
  ncfg.octaves = 3;
  scenes::NeuralCanvas<double> src(ncfg);
  Rng rng(31);
  src.init_params(rng);
  const int c = PromptCode::encode(red_circle()).value;

  auto a = run_edit(src, c, c + 1, den, sched, quick_cfg(Method::piva, 12, 6));
  CHECK(a.gen_opt.has_value());
  CHECK(a.step == 12);
  CHECK((a.edited.params() - src.params()).abs().maxCoeff() > 0.0);

  auto b = run_edit(src, c, c + 1, den, sched, quick_cfg(Method::piva, 12, 6));
  CHECK((a.edited.params() - b.edited.params()).abs().maxCoeff() == 0.0);

  const std::string path = "edit_ckpt_neural.blob";
  checkpoint(a, path);
  auto r = restore<double, scenes::NeuralCanvas<double>>(path, den);
  CHECK((r.edited.params() - a.edited.params()).abs().maxCoeff() == 0.0);
  CHECK(r.gen_opt->steps == a.gen_opt->steps);
  std::remove(path.c_str());
}
