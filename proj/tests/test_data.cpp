#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "helpers.hpp"
#include "mlomae/data.hpp"
#include "mlomae/optim.hpp"

using namespace mlomae;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mlomae_tests";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> cifar_record(unsigned char label, unsigned char fill) {
  std::vector<unsigned char> r(3073, fill);
  r[0] = label;
  return r;
}

bool same_images(const std::vector<LabeledImage>& a, const std::vector<LabeledImage>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].pixels == b[i].pixels) || a[i].label != b[i].label) return false;
  return true;
}

ModelDims geometry(const SynthSpec& s) {
  ModelDims d;
  d.image_side = s.side;
  d.channels = s.channels;
  d.patch_size = s.patch_size;
  return d;
}

// Multinomial logistic regression on raw features, full batch, as an
// independent probe.
double logistic_probe(const Matrix& xtr, const IndexList& ytr, const Matrix& xval, const IndexList& yval, Index k) {
  TensorMap p{{"w", Matrix::Zero(xtr.cols(), k)}, {"b", Matrix::Zero(1, k)}};
  OptState st;
  for (int it = 0; it < 300; ++it) {
    ad::Tape t;
    ad::Var w = t.param("w", p["w"]), b = t.param("b", p["b"]);
    const GradMap g = t.backward(ad::cross_entropy_logits(ad::add_row(ad::matmul(t.constant(xtr), w), b), ytr));
    adamw_update(p, g, st, 1e-2, AdamWParams<double>{0.9, 0.999, 0.0, 1e-8});
  }
  Matrix logits = xval * p["w"];
  logits.rowwise() += Eigen::RowVectorXd(p["b"]);
  Index correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg == yval[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

}  // namespace

TEST_CASE("synthetic generator is deterministic and well formed") {
  const SynthSpec spec;
  const DatasetBundle a = synth_generate(spec, 3), b = synth_generate(spec, 3);
  CHECK(same_images(a.d_tr, b.d_tr));
  CHECK(same_images(a.d_val, b.d_val));
  CHECK(a.d_tr.size() == 640);
  CHECK(a.d_val.size() == 160);
  REQUIRE(a.informative_set.has_value());
  CHECK(*a.informative_set == spec.informative);
  for (const auto& li : a.d_tr) {
    CHECK(li.pixels.minCoeff() >= 0.0);
    CHECK(li.pixels.maxCoeff() <= 1.0);
    CHECK(li.label >= 0);
    CHECK(li.label < spec.num_classes);
  }
  // d_u is d_tr without labels.
  REQUIRE(a.d_u.size() == a.d_tr.size());
  for (std::size_t i = 0; i < a.d_u.size(); ++i) CHECK(a.d_u[i] == a.d_tr[i].pixels);
  CHECK(!same_images(synth_generate(spec, 4).d_tr, a.d_tr));
}

TEST_CASE("synthetic spec validation") {
  SynthSpec s;
  s.informative = {};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SynthSpec{};
  s.informative = {16};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SynthSpec{};
  s.amplitude = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SynthSpec{};
  s.noise = -0.1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("noiseless synthetic classes are separable by nearest template") {
  SynthSpec spec;
  spec.noise = 0.0;
  const std::uint64_t seed = 5;
  const ModelDims g = geometry(spec);
  const Matrix templates = synth_templates(spec, seed);
  const Index pp = g.patch_pixels();
  // Expected S content per class, built independently of the generator.
  std::vector<Matrix> expect;
  for (Index k = 0; k < spec.num_classes; ++k) {
    Matrix e(static_cast<Index>(spec.informative.size()), pp);
    for (Index j = 0; j < e.rows(); ++j)
      e.row(j) = (0.5 + spec.amplitude * templates.row(k).segment(j * pp, pp).array()).cwiseMax(0.0).cwiseMin(1.0);
    expect.push_back(e);
  }
  const DatasetBundle b = synth_generate(spec, seed);
  Index correct = 0;
  for (const auto& li : b.d_val) {
    const Matrix grid = patchify(li.pixels, g);
    Index best = 0;
    double best_d = 1e300;
    for (Index k = 0; k < spec.num_classes; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < spec.informative.size(); ++j)
        d += (grid.row(spec.informative[j]) - expect[static_cast<std::size_t>(k)].row(static_cast<Index>(j)))
                 .squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    if (best == li.label) ++correct;
    // Outside S every pixel is the flat background.
    for (Index p = 0; p < grid.rows(); ++p)
      if (std::find(spec.informative.begin(), spec.informative.end(), p) == spec.informative.end())
        CHECK((grid.row(p).array() == 0.5).all());
  }
  CHECK(correct == static_cast<Index>(b.d_val.size()));
}

TEST_CASE("patches outside the informative set carry no label information") {
  for (double noise : {0.0, 0.1}) {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
      SynthSpec spec;
      spec.noise = noise;
      const ModelDims g = geometry(spec);
      const DatasetBundle b = synth_generate(spec, seed);
      IndexList outside;
      for (Index p = 0; p < spec.num_patches(); ++p)
        if (std::find(spec.informative.begin(), spec.informative.end(), p) == spec.informative.end())
          outside.push_back(p);
      auto features = [&](const std::vector<LabeledImage>& list, IndexList& y) {
        Matrix x(static_cast<Index>(list.size()), static_cast<Index>(outside.size()) * g.patch_pixels());
        for (std::size_t i = 0; i < list.size(); ++i) {
          const Matrix grid = patchify(list[i].pixels, g);
          for (std::size_t j = 0; j < outside.size(); ++j)
            x.row(static_cast<Index>(i)).segment(static_cast<Index>(j) * g.patch_pixels(), g.patch_pixels()) =
                grid.row(outside[j]);
          y.push_back(list[i].label);
        }
        return x;
      };
      IndexList ytr, yval;
      const Matrix xtr = features(b.d_tr, ytr), xval = features(b.d_val, yval);
      const double acc = logistic_probe(xtr, ytr, xval, yval, spec.num_classes);
      CAPTURE(noise);
      CAPTURE(seed);
      CHECK(acc <= 1.0 / static_cast<double>(spec.num_classes) + 0.05);
    }
  }
}

TEST_CASE("CIFAR-10 binary reader") {
  const fs::path p = temp_file("two_records.bin");
  std::vector<unsigned char> bytes = cifar_record(7, 0xFF);
  const std::vector<unsigned char> second = cifar_record(2, 0x00);
  bytes.insert(bytes.end(), second.begin(), second.end());
  bytes[1] = 0;          // red (0,0) of record 0
  bytes[1 + 1024] = 51;  // green (0,0)
  write_bytes(p, bytes);
  const auto images = cifar10_read(p.string());
  REQUIRE(images.size() == 2);
  CHECK(images[0].label == 7);
  CHECK(images[1].label == 2);
  CHECK(images[0].pixels.rows() == 3);
  CHECK(images[0].pixels.cols() == 1024);
  CHECK(images[0].pixels(0, 0) == 0.0);
  CHECK(images[0].pixels(1, 0) == 51.0 / 255.0);
  CHECK(images[0].pixels(0, 1) == 1.0);
  CHECK(images[0].pixels(2, 1023) == 1.0);
  CHECK(images[1].pixels.maxCoeff() == 0.0);
  CHECK(same_images(images, cifar10_read(p.string())));
  CHECK(cifar10_read(p.string(), 1).size() == 1);

  const fs::path trunc = temp_file("truncated.bin");
  write_bytes(trunc, std::vector<unsigned char>(3000, 1));
  CHECK_THROWS_AS(cifar10_read(trunc.string()), FormatError);

  const fs::path bad = temp_file("bad_label.bin");
  std::vector<unsigned char> two = cifar_record(1, 0);
  const std::vector<unsigned char> b2 = cifar_record(10, 0);
  two.insert(two.end(), b2.begin(), b2.end());
  write_bytes(bad, two);
  try {
    cifar10_read(bad.string());
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("record 1") != std::string::npos);
  }
  CHECK_THROWS_AS(cifar10_read(temp_file("missing.bin").string()), IoError);
}

TEST_CASE("80/20 split") {
  std::vector<LabeledImage> ten;
  for (int i = 0; i < 10; ++i) ten.push_back({Matrix::Constant(1, 4, i), i % 3});
  const auto [tr, val] = split_80_20(ten, 1);
  CHECK(tr.size() == 8);
  CHECK(val.size() == 2);
  std::multiset<double> all;
  for (const auto& li : tr) all.insert(li.pixels(0, 0));
  for (const auto& li : val) all.insert(li.pixels(0, 0));
  CHECK(all == std::multiset<double>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});

  const auto again = split_80_20(ten, 1);
  CHECK(same_images(again.first, tr));
  bool differs = false;
  for (std::uint64_t s = 2; s < 12; ++s) differs = differs || !same_images(split_80_20(ten, s).first, tr);
  CHECK(differs);

  std::vector<LabeledImage> seven(ten.begin(), ten.begin() + 7);
  const auto [t7, v7] = split_80_20(seven, 0);
  CHECK(t7.size() == 5);
  CHECK(v7.size() == 2);
  CHECK_THROWS_AS(split_80_20(std::vector<LabeledImage>(ten.begin(), ten.begin() + 4), 0), ConfigError);
}

TEST_CASE("augmentation") {
  const Index side = 6;
  const Matrix img = testutil::random_matrix(3, side * side, 8, 0, 1);
  Rng rng(1);
  CHECK(augment(img, side, rng, Augmentation{AugmentPolicy::None, 4}) == img);
  CHECK(hflip(hflip(img, side), side) == img);
  CHECK(hflip(img, side)(0, 0) == img(0, side - 1));
  CHECK(crop_padded(img, side, 0, 0, 0) == img);
  CHECK(crop_padded(img, side, 2, 2, 2) == img);
  // Shifted window: top-left corner falls in the zero padding.
  CHECK(crop_padded(img, side, 2, 0, 0)(0, 0) == 0.0);
  CHECK(crop_padded(img, side, 2, 0, 0)(0, 2 * side + 2) == img(0, 0));

  Rng r2(2);
  int flips = 0;
  for (int i = 0; i < 200; ++i) {
    const Matrix out = augment(img, side, r2, Augmentation{AugmentPolicy::Flip, 0});
    if (out == hflip(img, side)) ++flips;
    else CHECK(out == img);
  }
  CHECK(flips > 60);
  CHECK(flips < 140);
  for (int i = 0; i < 50; ++i) {
    const Matrix out = augment(img, side, r2, Augmentation{AugmentPolicy::FlipCrop, 2});
    CHECK(out.minCoeff() >= 0.0);
    CHECK(out.maxCoeff() <= 1.0);
  }
}

TEST_CASE("batching") {
  const auto b = batches(10, 4, 3, 0);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 4);
  CHECK(b[1].size() == 4);
  CHECK(b[2].size() == 2);
  std::set<Index> seen;
  for (const auto& batch : b) seen.insert(batch.begin(), batch.end());
  CHECK(seen.size() == 10);
  CHECK(batches(10, 4, 3, 0) == b);
  CHECK(batches(10, 4, 3, 1) != b);
  CHECK_THROWS_AS(batches(10, 0, 3, 0), ConfigError);

  Rng r(4);
  IndexList perm = shuffled_indices(20, r);
  std::sort(perm.begin(), perm.end());
  for (Index i = 0; i < 20; ++i) CHECK(perm[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("dataset bundle round trip") {
  SynthSpec spec;
  spec.samples_per_class = 10;
  const DatasetBundle b = synth_generate(spec, 6);
  const fs::path p = temp_file("bundle.mlom");
  save_bundle(p.string(), b);
  const DatasetBundle r = load_bundle(p.string());
  CHECK(same_images(r.d_tr, b.d_tr));
  CHECK(same_images(r.d_val, b.d_val));
  REQUIRE(r.d_u.size() == b.d_u.size());
  for (std::size_t i = 0; i < r.d_u.size(); ++i) CHECK(r.d_u[i] == b.d_u[i]);
  CHECK(r.split_seed == b.split_seed);
  CHECK(r.informative_set == b.informative_set);
}
