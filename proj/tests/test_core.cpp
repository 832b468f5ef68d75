#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sdlab/core/blob.hpp>
#include <sdlab/core/image.hpp>
#include <sdlab/core/rng.hpp>
#include <sdlab/core/sha1.hpp>
#include <sdlab/eval/metrics.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace sdlab;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("image: channel-plane layout and accessors") {
  ImageT<float> img(2, 3, 2);
  img.at(1, 2, 0) = 5.f;
  img.at(0, 0, 1) = 7.f;
  CHECK(img.data[1 * 3 + 2] == 5.f);       // plane 0, row 1, col 2
  CHECK(img.data[2 * 3 + 0] == 7.f);       // plane 1 starts at h*w
  CHECK(img.plane(1)[0] == 7.f);
  CHECK(img.size() == 12);

  ImageT<float> other(2, 3, 2);
  CHECK(img.same_shape(other));
  CHECK_THROWS_AS(require_same_shape(img, ImageT<float>(3, 3, 2), "test"),
                  std::invalid_argument);
}

TEST_CASE("image: flip is an involution and clamp saturates") {
  Rng rng(3);
  ImageT<double> img(4, 5, 3);
  for (Index i = 0; i < img.size(); ++i) img.data[i] = rng.uniform(-0.5, 1.5);
  ImageT<double> twice = flip_horizontal(flip_horizontal(img));
  CHECK((twice.data - img.data).abs().maxCoeff() == 0.0);

  ImageT<double> cl = clamp01(img);
  CHECK(cl.data.minCoeff() >= 0.0);
  CHECK(cl.data.maxCoeff() <= 1.0);
  CHECK(img.data.minCoeff() < 0.0);  // original untouched
}

TEST_CASE("image: pixel centers are symmetric in [-1, 1]") {
  const int n = 8;
  for (int i = 0; i < n; ++i)
    CHECK(pixel_center(i, n) == doctest::Approx(-pixel_center(n - 1 - i, n)));
  CHECK(pixel_center(0, 2) == doctest::Approx(-0.5));
  CHECK(pixel_center(1, 2) == doctest::Approx(0.5));
}

TEST_CASE("rng: determinism, forked independence, state round-trip") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());

  // A fork draws a stream unrelated to the parent's continuation.
  Rng parent(7);
  Rng child = parent.fork(1);
  const double p1 = parent.uniform();
  Rng parent2(7);
  parent2.fork(1);
  CHECK(parent2.uniform() == p1);  // forking does not consume parent draws

  // Same (seed, tag) gives the same child; different tags differ.
  CHECK(Rng(9).fork(3).uniform() == Rng(9).fork(3).uniform());
  CHECK(Rng(9).fork(3).uniform() != Rng(9).fork(4).uniform());

  // Save/restore mid-stream, including the cached normal spare.
  Rng c(11);
  c.normal();
  const std::string state = c.save_state();
  VecX<double> ahead = c.normal_vec<double>(7);
  Rng d(999);
  d.restore_state(state);
  VecX<double> replay = d.normal_vec<double>(7);
  CHECK((ahead - replay).abs().maxCoeff() == 0.0);
  CHECK(child.fork(5).save_state() == child.fork(5).save_state());
  CHECK_THROWS_AS(d.restore_state("not a state"), std::runtime_error);
}

TEST_CASE("rng: integer ranges and hash stability") {
  Rng r(1);
  for (int i = 0; i < 200; ++i) {
    const int v = r.uniform_int(5);
    CHECK(v >= 0);
    CHECK(v < 5);
    const int w = r.uniform_int(3, 9);
    CHECK(w >= 3);
    CHECK(w <= 9);
  }
  CHECK(stable_hash64("alpha") == stable_hash64("alpha"));
  CHECK(stable_hash64("alpha") != stable_hash64("beta"));
  CHECK(stable_hash64("alpha", 1) != stable_hash64("alpha", 2));
}

TEST_CASE("blob: tensor round-trip with manifest") {
  const std::string path = temp_path("sdlab_test_blob.bin");
  BlobWriter w;
  VecX<float> vf = Rng(5).normal_vec<float>(17);
  VecX<double> vd = Rng(6).normal_vec<double>(9);
  w.add("weights", vf);
  w.add("stats", vd);
  ojson manifest;
  manifest["kind"] = "test";
  manifest["note"] = "round trip";
  w.write(path, manifest);

  BlobReader r(path);
  CHECK(r.manifest().at("kind") == "test");
  CHECK(r.has_tensor("weights"));
  CHECK_FALSE(r.has_tensor("missing"));
  VecX<float> vf2 = r.tensor<float>("weights");
  VecX<double> vd2 = r.tensor<double>("stats");
  REQUIRE(vf2.size() == vf.size());
  CHECK((vf2 - vf).abs().maxCoeff() == 0.f);
  CHECK((vd2 - vd).abs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(r.tensor<float>("missing"), BlobError);
  std::filesystem::remove(path);
}

TEST_CASE("blob: corrupt file is refused") {
  const std::string path = temp_path("sdlab_test_blob_bad.bin");
  {
    std::ofstream out(path, std::ios::binary);
    out << "definitely not a blob";
  }
  CHECK_THROWS_AS(BlobReader{path}, BlobError);
  std::filesystem::remove(path);
}

TEST_CASE("sha1: known digests and git blob form") {
  CHECK(sha1_hex("") == "da39a3ee5e6b4b0d3255bfef95601890afd80709");
  CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  // `printf 'hello\n' | git hash-object --stdin`
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("metrics: identities and analytic cases") {
  ImageT<double> a = ImageT<double>::zeros(8, 8, 3);
  ImageT<double> b = ImageT<double>::constant(8, 8, 3, 1.0);
  CHECK(eval::mse(a, a) == 0.0);
  CHECK(eval::psnr(a, a) == doctest::Approx(99.0));
  CHECK(eval::mse(a, b) == doctest::Approx(1.0));
  CHECK(eval::psnr(a, b) == doctest::Approx(0.0));
  CHECK(eval::ssim(a, a) == doctest::Approx(1.0));

  Rng rng(2);
  ImageT<double> x(9, 9, 3), y(9, 9, 3);
  for (Index i = 0; i < x.size(); ++i) {
    x.data[i] = rng.uniform();
    y.data[i] = rng.uniform();
  }
  const double m = eval::mse(x, y);
  CHECK(eval::psnr(x, y) == doctest::Approx(10.0 * std::log10(1.0 / m)).epsilon(1e-9));
  CHECK(eval::mse(x, y) == eval::mse(y, x));
  CHECK(eval::ssim(x, y) == doctest::Approx(eval::ssim(y, x)));
  CHECK(eval::ssim(x, y) < 1.0);
  CHECK(eval::ssim(x, y) >= -1.0);
  CHECK_THROWS_AS(eval::mse(x, a), std::invalid_argument);
  CHECK_THROWS_AS(eval::ssim(ImageT<double>::zeros(5, 5, 1), ImageT<double>::zeros(5, 5, 1)),
                  std::invalid_argument);
}
