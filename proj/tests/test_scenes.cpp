#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sdlab/core/png_io.hpp>
#include <sdlab/eval/metrics.hpp>
#include <sdlab/scenes/dataset.hpp>
#include <sdlab/scenes/depth.hpp>
#include <sdlab/scenes/generators.hpp>
#include <sdlab/scenes/pose.hpp>
#include <sdlab/scenes/rasterize.hpp>
#include <sdlab/scenes/scene.hpp>
#include <sdlab/scenes/tasks.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

using namespace sdlab;
using namespace sdlab::scenes;

namespace {

std::filesystem::path temp_dir(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

SceneSpec spec_with(Shape sh, int color, Accessory acc) {
  SceneSpec s;
  s.shape = sh;
  s.color_id = color;
  s.accessory = acc;
  return s;
}

/// Central finite difference of `loss` along coordinate `i` of `theta`.
template <class Loss>
double fd_grad(VecX<double>& theta, Index i, Loss&& loss, double h = 1e-5) {
  const double saved = theta[i];
  theta[i] = saved + h;
  double up = loss();
  theta[i] = saved - h;
  double down = loss();
  theta[i] = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace

TEST_CASE("prompt codes: encode is injective and decodes back") {
  std::set<int> seen;
  for (int sh = 0; sh < kNumShapes; ++sh)
    for (int c = 0; c < kNumColors; ++c)
      for (int a = 0; a < kNumAccessories; ++a) {
        PromptCode code = PromptCode::encode(Shape(sh), c, Accessory(a));
        CHECK(code.value >= 0);
        CHECK(code.value < PromptCode::null().value);
        CHECK(seen.insert(code.value).second);  // injective
        CHECK(int(code.shape()) == sh);
        CHECK(code.color_id() == c);
        CHECK(int(code.accessory()) == a);
      }
  CHECK(int(seen.size()) == kNumShapes * kNumColors * kNumAccessories);
  CHECK(PromptCode::null().value == 72);
  CHECK(PromptCode::vocab_size() == 73);
  CHECK(describe(Shape::circle, 0, Accessory::dot) == "a red circle with a dot");
  CHECK(describe(Shape::square, 2, Accessory::none) == "a blue square");
  CHECK(describe(Shape::cross, 5, Accessory::ring) == "a cyan cross with a ring");
}

TEST_CASE("scene spec: validation rejects out-of-range fields") {
  SceneSpec s;
  CHECK_NOTHROW(s.validate());
  s.color_id = 6;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.pos_x = 0.5;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.scale = 0.3;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.background_id = -1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("scene spec: json round-trip keeps every field") {
  SceneSpec s = spec_with(Shape::triangle, 4, Accessory::ring);
  s.background_id = 2;
  s.pos_x = -0.15;
  s.pos_y = 0.08;
  s.scale = 0.62;
  SceneSpec back = spec_from_json(spec_to_json(s));
  CHECK(back == s);
  CHECK(spec_to_json(s)["color"] == "magenta");

  nlohmann::json bad = spec_to_json(s);
  bad["shape"] = "hexagon";
  CHECK_THROWS_AS(spec_from_json(bad), std::invalid_argument);
}

TEST_CASE("rasterize: deterministic, bounded, and correctly colored") {
  SceneSpec s = spec_with(Shape::square, 1, Accessory::none);
  s.background_id = 2;
  s.pos_x = 0.1;
  s.pos_y = -0.05;
  ImageT<double> a = rasterize(s, 32);
  ImageT<double> b = rasterize(s, 32);
  CHECK((a.data - b.data).abs().maxCoeff() == 0.0);  // bit-identical
  CHECK(a.data.minCoeff() >= 0.0);
  CHECK(a.data.maxCoeff() <= 1.0);
  CHECK(a.h == 32);
  CHECK(a.c == 3);

  // The pixel at the shape center carries the palette color; the corners are
  // pure background for in-range specs.
  int cy = 15, cx = 17;  // nearest pixel to (0.1, -0.05)
  for (int ch = 0; ch < 3; ++ch) {
    CHECK(a.at(cy, cx, ch) == doctest::Approx(kPalette[1][std::size_t(ch)]));
    CHECK(a.at(0, 0, ch) == doctest::Approx(kBackgrounds[2][std::size_t(ch)]));
    CHECK(a.at(31, 31, ch) == doctest::Approx(kBackgrounds[2][std::size_t(ch)]));
  }

  // A centered dot paints the accessory color over the shape center.
  SceneSpec d = spec_with(Shape::circle, 0, Accessory::dot);
  ImageT<double> di = rasterize(d, 32);
  for (int ch = 0; ch < 3; ++ch)
    CHECK(di.at(16, 16, ch) == doctest::Approx(kAccessoryColor[std::size_t(ch)]));
}

TEST_CASE("rasterize: accessory change is local to the dot region") {
  SceneSpec base = spec_with(Shape::circle, 0, Accessory::none);
  SceneSpec dotted = base;
  dotted.accessory = Accessory::dot;
  const int res = 32;
  ImageT<double> a = rasterize(base, res);
  ImageT<double> b = rasterize(dotted, res);
  const double aa = 2.0 / res;
  int changed = 0;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      double cx = pixel_center(x, res);
      double cy = -pixel_center(y, res);
      bool outside = std::hypot(cx, cy) > kDotRadius + 2.0 * aa;
      for (int ch = 0; ch < 3; ++ch) {
        if (a.at(y, x, ch) != b.at(y, x, ch)) {
          ++changed;
          CHECK(!outside);  // differences confined to the dot plus AA fringe
        }
      }
    }
  CHECK(changed > 0);
}

TEST_CASE("rasterize: circle mean matches the analytic area fraction") {
  SceneSpec s = spec_with(Shape::circle, 0, Accessory::none);
  s.background_id = 1;  // light gray keeps every channel well away from zero
  s.scale = 0.8;
  const int res = 64;
  ImageT<double> img = rasterize(s, res);
  const double r = 0.5 * s.scale;
  const double frac = M_PI * r * r / 4.0;  // canvas area is 2x2
  for (int ch = 0; ch < 3; ++ch) {
    double expected =
        frac * kPalette[0][std::size_t(ch)] + (1.0 - frac) * kBackgrounds[1][std::size_t(ch)];
    double mean = double(img.plane(ch).mean());
    CHECK(std::abs(mean - expected) <= 0.02 * expected);
  }
}

TEST_CASE("pose: identity and flip resample bit-exactly") {
  Rng rng(7);
  ImageT<double> img(32, 32, 3);
  for (Index i = 0; i < img.size(); ++i) img.data[i] = rng.uniform();

  ImageT<double> same = pose_sample(img, ViewPose::identity(), 32);
  CHECK((same.data - img.data).abs().maxCoeff() == 0.0);

  ViewPose flip;
  flip.flip = true;
  ImageT<double> mirrored = pose_sample(img, flip, 32);
  ImageT<double> reference = flip_horizontal(img);
  CHECK((mirrored.data - reference.data).abs().maxCoeff() == 0.0);

  ImageT<double> twice = pose_sample(mirrored, flip, 32);
  CHECK((twice.data - img.data).abs().maxCoeff() == 0.0);
}

TEST_CASE("pose: bilinear sampling is exact on affine images") {
  const int res = 32;
  const double a = 0.4, b = 0.25, c = -0.15;
  ImageT<double> ramp(res, res, 1);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x)
      ramp.at(y, x, 0) = a + b * pixel_center(x, res) + c * pixel_center(y, res);

  ViewPose pose;
  pose.zoom = 1.25;
  pose.center_x = 0.05;
  pose.center_y = -0.04;
  ImageT<double> out = pose_sample(ramp, pose, res);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      double sx, sy;
      pose_source_coords(pose, pixel_center(x, res), pixel_center(y, res), sx, sy);
      CHECK(out.at(y, x, 0) == doctest::Approx(a + b * sx + c * sy).epsilon(1e-12));
    }
}

TEST_CASE("pose: backward pass is the exact adjoint of sampling") {
  Rng rng(11);
  for (int trial = 0; trial < 3; ++trial) {
    ViewPose pose = sample_pose(rng);
    ImageT<double> x(24, 24, 3);
    ImageT<double> y(16, 16, 3);
    for (Index i = 0; i < x.size(); ++i) x.data[i] = rng.normal();
    for (Index i = 0; i < y.size(); ++i) y.data[i] = rng.normal();

    ImageT<double> ax = pose_sample(x, pose, 16);
    double lhs = double((ax.data * y.data).sum());

    ImageT<double> aty = ImageT<double>::zeros(24, 24, 3);
    pose_sample_backward(y, pose, aty);
    double rhs = double((aty.data * x.data).sum());
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("pose: sampled poses stay inside the safe window") {
  CHECK(pose_center_limit(0.8) == doctest::Approx(0.3));
  CHECK(pose_center_limit(1.25) == doctest::Approx(0.1));
  Rng rng(5);
  int flips = 0;
  for (int i = 0; i < 200; ++i) {
    ViewPose p = sample_pose(rng);
    CHECK(p.zoom >= kPoseZoomMin);
    CHECK(p.zoom <= kPoseZoomMax);
    double lim = pose_center_limit(p.zoom);
    CHECK(std::abs(p.center_x) <= lim);
    CHECK(std::abs(p.center_y) <= lim);
    flips += p.flip ? 1 : 0;
  }
  CHECK(flips > 50);
  CHECK(flips < 150);

  PixelCanvas<double> g(8);
  ViewPose bad;
  bad.zoom = 0.0;
  CHECK_THROWS_AS(g.render(bad, 8), std::invalid_argument);
  NeuralCanvas<double> n;
  CHECK_THROWS_AS(n.render(bad, 8), std::invalid_argument);
}

TEST_CASE("edit tasks: each task changes exactly one attribute") {
  for (int sh = 0; sh < kNumShapes; ++sh)
    for (int c = 0; c < kNumColors; ++c)
      for (int a = 0; a < kNumAccessories; ++a) {
        SceneSpec s = spec_with(Shape(sh), c, Accessory(a));
        auto tasks = make_edit_tasks(s);
        REQUIRE(tasks.size() == 3);
        CHECK(tasks[0].type == EditType::texturing);
        CHECK(tasks[1].type == EditType::addition);
        CHECK(tasks[2].type == EditType::translation);
        for (const auto& t : tasks) {
          CHECK(t.src_code.value == PromptCode::encode(s).value);
          CHECK(t.tgt_code.value == PromptCode::encode(t.tgt_spec).value);
          int diffs = int(t.src_spec.shape != t.tgt_spec.shape) +
                      int(t.src_spec.color_id != t.tgt_spec.color_id) +
                      int(t.src_spec.accessory != t.tgt_spec.accessory);
          CHECK(diffs == 1);
          // Geometry is shared between source and target.
          CHECK(t.src_spec.background_id == t.tgt_spec.background_id);
          CHECK(t.src_spec.pos_x == t.tgt_spec.pos_x);
          CHECK(t.src_spec.scale == t.tgt_spec.scale);
        }
        CHECK(tasks[0].tgt_spec.color_id != c);
        CHECK(tasks[1].tgt_spec.accessory != Accessory(a));
        if (Accessory(a) == Accessory::none)
          CHECK(tasks[1].tgt_spec.accessory == Accessory::dot);
        CHECK(tasks[2].tgt_spec.shape != Shape(sh));
      }

  // The canonical example: a red circle textures to blue, gains a dot, and
  // translates to a square.
  auto tasks = make_edit_tasks(spec_with(Shape::circle, 0, Accessory::none));
  CHECK(tasks[0].tgt_spec.color_id == 2);
  CHECK(describe(tasks[0].tgt_code) == "a blue circle");
  CHECK(describe(tasks[1].tgt_code) == "a red circle with a dot");
  CHECK(describe(tasks[2].tgt_code) == "a red square");
  CHECK(edit_type_from_name("texturing") == EditType::texturing);
  CHECK_THROWS_AS(edit_type_from_name("stylization"), std::invalid_argument);
}

TEST_CASE("pixel canvas: identity render is the squashed parameter grid") {
  PixelCanvas<double> g(8);
  Rng rng(2);
  for (Index i = 0; i < g.theta.size(); ++i) g.theta[i] = rng.normal();
  ImageT<double> img = g.render(ViewPose::identity(), 8);
  for (Index i = 0; i < img.size(); ++i)
    CHECK(img.data[i] == squash(g.theta[i]));
  CHECK(img.data.minCoeff() > 0.0);
  CHECK(img.data.maxCoeff() < 1.0);
}

TEST_CASE("pixel canvas: closed-form fit inverts the squash") {
  SceneSpec s = spec_with(Shape::triangle, 3, Accessory::ring);
  ImageT<double> target = rasterize(s, 32);
  PixelCanvas<double> g(32);
  FitResult fit = fit_generator(g, {{target, ViewPose::identity()}});
  CHECK(fit.steps_run == 0);  // closed form, no iterations
  CHECK(fit.final_psnr >= 60.0);
  CHECK(fit.converged);
  ImageT<double> r = g.render(ViewPose::identity(), 32);
  CHECK((r.data - target.data).abs().maxCoeff() <= 2e-4);

  CHECK_THROWS_AS(g.fit_exact(ImageT<double>(16, 16, 3)), std::invalid_argument);
  CHECK_THROWS_AS(fit_generator(g, {}), std::invalid_argument);

  // A zero-iteration fit on a non-trivial pose set leaves parameters alone.
  PixelCanvas<double> h(32);
  VecX<double> before = h.theta;
  FitConfig none;
  none.steps = 0;
  ViewPose pose;
  pose.zoom = 1.1;
  fit_generator(h, {{target, ViewPose::identity()}, {target, pose}}, none);
  CHECK((h.theta - before).abs().maxCoeff() == 0.0);
}

TEST_CASE("generators: reverse-mode gradients match finite differences") {
  Rng rng(13);
  const int res = 8;
  ImageT<double> y(res, res, 3);
  for (Index i = 0; i < y.size(); ++i) y.data[i] = rng.uniform();
  ViewPose pose;
  pose.zoom = 1.15;
  pose.center_x = 0.06;
  pose.center_y = -0.03;
  pose.flip = true;

  SUBCASE("pixel canvas") {
    PixelCanvas<double> g(res);
    for (Index i = 0; i < g.theta.size(); ++i) g.theta[i] = 0.5 * rng.normal();
    auto loss = [&] {
      ImageT<double> r = g.render(pose, res);
      return double((r.data - y.data).square().sum());
    };
    ImageT<double> r = g.render(pose, res);
    ImageT<double> dimg = r;
    dimg.data = 2.0 * (r.data - y.data);
    VecX<double> grad = VecX<double>::Zero(g.theta.size());
    g.render_backward(dimg, pose, grad);
    for (int k = 0; k < 10; ++k) {
      Index i = Index(rng.uniform_int(int(g.theta.size())));
      double fd = fd_grad(g.theta, i, loss);
      if (std::abs(fd) < 1e-9 && std::abs(grad[i]) < 1e-9) continue;  // clipped tap
      CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-3));
    }
  }

  SUBCASE("neural canvas") {
    NeuralCanvasConfig cfg;
    cfg.hidden = 16;
    cfg.depth = 2;
    cfg.octaves = 3;
    NeuralCanvas<double> g(cfg);
    g.init_params(rng);
    auto loss = [&] {
      ImageT<double> r = g.render(pose, res);
      return double((r.data - y.data).square().sum());
    };
    NeuralCanvasWorkspace<double> ws;
    ImageT<double> r = g.render(pose, res, ws);
    ImageT<double> dimg = r;
    dimg.data = 2.0 * (r.data - y.data);
    VecX<double> grad = VecX<double>::Zero(g.params().size());
    g.render_backward(dimg, ws, grad);
    for (int k = 0; k < 10; ++k) {
      Index i = Index(rng.uniform_int(int(g.params().size())));
      double fd = fd_grad(g.params(), i, loss);
      CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-3));
    }
  }
}

TEST_CASE("neural canvas: regression reaches reference quality") {
  SceneSpec s = spec_with(Shape::circle, 2, Accessory::dot);
  s.background_id = 1;
  ImageT<float> target = rasterize(s, 32).cast<float>();

  SUBCASE("single identity view") {
    NeuralCanvas<float> g;
    Rng rng(21);
    g.init_params(rng);
    FitResult fit = fit_generator(g, {{target, ViewPose::identity()}});
    CHECK(fit.steps_run == 2000);
    CHECK(fit.final_psnr >= 30.0);
    CHECK(fit.converged);
  }

  SUBCASE("sixteen posed views") {
    Rng rng(22);
    std::vector<std::pair<ImageT<float>, ViewPose>> pairs;
    pairs.emplace_back(target, ViewPose::identity());
    for (int i = 0; i < 15; ++i) {
      ViewPose pose = sample_pose(rng);
      pairs.emplace_back(pose_sample(target, pose, 32), pose);
    }
    NeuralCanvas<float> g;
    g.init_params(rng);
    fit_generator(g, pairs);
    for (const auto& [img, pose] : pairs) {
      ImageT<float> r = g.render(pose, 32);
      CHECK(eval::psnr(r, img) >= 28.0);
    }
  }
}

TEST_CASE("depth proxy: flat images are zero, edges light up to one") {
  ImageT<double> flat = ImageT<double>::constant(16, 16, 3, 0.37);
  ImageT<double> d = depth_proxy(flat);
  CHECK(d.c == 1);
  CHECK(d.data.abs().maxCoeff() == 0.0);

  // Vertical step: the response concentrates on the columns beside the edge.
  const int res = 16;
  ImageT<double> step(res, res, 3);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x)
      for (int ch = 0; ch < 3; ++ch) step.at(y, x, ch) = x < res / 2 ? 0.0 : 1.0;
  ImageT<double> ds = depth_proxy(step);
  CHECK(ds.data.maxCoeff() == doctest::Approx(1.0));
  for (int y = 1; y < res - 1; ++y)
    for (int x = 0; x < res; ++x) {
      bool near_edge = x == res / 2 - 1 || x == res / 2;
      if (near_edge)
        CHECK(ds.at(y, x, 0) > 0.5);
      else
        CHECK(ds.at(y, x, 0) == doctest::Approx(0.0));
    }

  ImageT<double> scene = rasterize(spec_with(Shape::square, 0, Accessory::none), 32);
  CHECK(depth_proxy(scene).data.maxCoeff() == doctest::Approx(1.0));
}

TEST_CASE("dataset: balanced attributes and reproducible builds") {
  DatasetConfig cfg;
  cfg.n_scenes = 1000;
  cfg.seed = 9;
  Dataset ds = build_dataset(cfg);
  REQUIRE(int(ds.train.size()) == 1000);
  REQUIRE(int(ds.bench.size()) == 35);

  std::array<int, kNumShapes> shapes{};
  std::array<int, kNumColors> colors{};
  std::array<int, kNumAccessories> accs{};
  std::set<std::string> files;
  for (const auto& row : ds.train) {
    ++shapes[std::size_t(int(row.spec.shape))];
    ++colors[std::size_t(row.spec.color_id)];
    ++accs[std::size_t(int(row.spec.accessory))];
    CHECK(row.code.value == PromptCode::encode(row.spec).value);
    CHECK(files.insert(row.file).second);
  }
  for (int n : shapes) CHECK(std::abs(n - 250) <= 25);  // within 10% of uniform
  for (int n : colors) CHECK(std::abs(n * 6 - 1000) <= 600);
  for (int n : accs) CHECK(std::abs(n * 3 - 1000) <= 300);
  for (const auto& row : ds.bench) CHECK(files.insert(row.file).second);

  Dataset again = build_dataset(cfg);
  REQUIRE(again.train.size() == ds.train.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    CHECK(again.train[i].spec == ds.train[i].spec);
    CHECK(again.train[i].file == ds.train[i].file);
  }
  for (std::size_t i = 0; i < ds.bench.size(); ++i)
    CHECK(again.bench[i].spec == ds.bench[i].spec);

  DatasetConfig bad = cfg;
  bad.n_scenes = 0;
  CHECK_THROWS_AS(build_dataset(bad), std::invalid_argument);
}

TEST_CASE("dataset: directory round-trip preserves every row") {
  DatasetConfig cfg;
  cfg.n_scenes = 40;
  cfg.seed = 4;
  cfg.bench_count = 5;
  Dataset ds = build_dataset(cfg);
  auto dir = temp_dir("sdlab_dataset_rt");
  write_dataset(ds, dir.string());

  Dataset back = read_dataset(dir.string());
  REQUIRE(back.train.size() == ds.train.size());
  REQUIRE(back.bench.size() == ds.bench.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    CHECK(back.train[i].spec == ds.train[i].spec);
    CHECK(back.train[i].code.value == ds.train[i].code.value);
    CHECK(back.train[i].file == ds.train[i].file);
  }

  // Images on disk match a fresh rasterization up to 8-bit quantization.
  ImageT<double> png = read_png((dir / ds.train[0].file).string());
  ImageT<double> ref = rasterize(ds.train[0].spec, cfg.res);
  CHECK((png.data - ref.data).abs().maxCoeff() <= 0.5 / 255.0 + 1e-9);

  std::ifstream manifest(dir / "manifest.jsonl");
  int lines = 0;
  for (std::string line; std::getline(manifest, line);)
    if (!line.empty()) ++lines;
  CHECK(lines == 45);

  // A manifest whose prompt code disagrees with its spec is refused.
  auto meta_path = dir / "manifest.jsonl";
  std::ifstream in(meta_path);
  std::string all, line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first && !line.empty()) {
      nlohmann::json row = nlohmann::json::parse(line);
      row["code"] = (row["code"].get<int>() + 1) % 72;
      line = row.dump();
      first = false;
    }
    all += line + "\n";
  }
  in.close();
  std::ofstream(meta_path) << all;
  CHECK_THROWS_AS(read_dataset(dir.string()), std::runtime_error);
}
