#include "mlomae/data.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>

#include "mlomae/container.hpp"

namespace mlomae {

namespace {

constexpr std::size_t kCifarRecord = 3073;
constexpr Index kCifarSide = 32;

Rng derived_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

Matrix images_to_matrix(const std::vector<Matrix>& images) {
  if (images.empty()) return Matrix(0, 0);
  const Index per = images.front().size();
  Matrix out(static_cast<Index>(images.size()), per);
  for (std::size_t i = 0; i < images.size(); ++i)
    out.row(static_cast<Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(images[i].data(), per);
  return out;
}

}  // namespace

void SynthSpec::validate() const {
  if (side < 1 || patch_size < 1 || side % patch_size != 0)
    throw ConfigError("synthetic: side must be a positive multiple of patch_size");
  if (channels < 1 || num_classes < 2 || samples_per_class < 1)
    throw ConfigError("synthetic: channels, classes and samples must be positive");
  if (informative.empty()) throw ConfigError("synthetic: informative set must be nonempty");
  for (Index s : informative)
    if (s < 0 || s >= num_patches()) throw ConfigError("synthetic: informative index out of range");
  if (std::set<Index>(informative.begin(), informative.end()).size() != informative.size())
    throw ConfigError("synthetic: informative set has duplicates");
  if (!(amplitude > 0.0)) throw ConfigError("synthetic: amplitude must be positive");
  if (!(noise >= 0.0)) throw ConfigError("synthetic: noise must be non-negative");
}

Matrix synth_templates(const SynthSpec& spec, std::uint64_t seed) {
  const Index pp = spec.patch_size * spec.patch_size * spec.channels;
  Rng rng = derived_rng(seed, 0x7e3a);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  Matrix t(spec.num_classes, static_cast<Index>(spec.informative.size()) * pp);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

std::vector<LabeledImage> synth_images(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Matrix templates = synth_templates(spec, seed);
  ModelDims geom;
  geom.image_side = spec.side;
  geom.channels = spec.channels;
  geom.patch_size = spec.patch_size;
  const Index pp = geom.patch_pixels();

  Rng rng = derived_rng(seed, 0x5a3b1e);
  std::normal_distribution<double> noise(0.5, spec.noise);
  std::vector<LabeledImage> out;
  out.reserve(static_cast<std::size_t>(spec.num_classes * spec.samples_per_class));
  for (Index k = 0; k < spec.num_classes; ++k) {
    for (Index s = 0; s < spec.samples_per_class; ++s) {
      Matrix grid(spec.num_patches(), pp);
      for (Index i = 0; i < grid.size(); ++i)
        grid.data()[i] = spec.noise > 0.0 ? std::clamp(noise(rng), 0.0, 1.0) : 0.5;
      for (std::size_t j = 0; j < spec.informative.size(); ++j) {
        auto row = grid.row(spec.informative[j]);
        row += spec.amplitude * templates.row(k).segment(static_cast<Index>(j) * pp, pp);
        row = row.cwiseMax(0.0).cwiseMin(1.0);
      }
      out.push_back({unpatchify(grid, geom), k});
    }
  }
  return out;
}

DatasetBundle synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  DatasetBundle b = make_bundle(synth_images(spec, seed), seed);
  b.informative_set = spec.informative;
  return b;
}

std::vector<LabeledImage> cifar10_read(const std::string& path, std::optional<std::size_t> limit) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open CIFAR-10 file " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecord != 0)
    throw FormatError("CIFAR-10 file " + path + " is truncated: " + std::to_string(bytes.size()) +
                      " bytes is not a multiple of 3073");
  std::size_t records = bytes.size() / kCifarRecord;
  if (limit) records = std::min(records, *limit);
  std::vector<LabeledImage> out;
  out.reserve(records);
  const Index plane = kCifarSide * kCifarSide;
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] > 9)
      throw FormatError("CIFAR-10 record " + std::to_string(r) + " has label byte " +
                        std::to_string(rec[0]));
    LabeledImage img;
    img.label = rec[0];
    img.pixels.resize(3, plane);
    for (Index i = 0; i < 3 * plane; ++i) img.pixels.data()[i] = static_cast<double>(rec[1 + i]) / 255.0;
    out.push_back(std::move(img));
  }
  return out;
}

IndexList shuffled_indices(Index n, Rng& rng) {
  IndexList idx = all_indices(n);
  for (Index i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<Index> pick(0, i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  return idx;
}

std::pair<std::vector<LabeledImage>, std::vector<LabeledImage>> split_80_20(
    const std::vector<LabeledImage>& images, std::uint64_t seed) {
  if (images.size() < 5) throw ConfigError("split_80_20 needs at least 5 images");
  Rng rng = derived_rng(seed, 0x5b11);
  const IndexList order = shuffled_indices(static_cast<Index>(images.size()), rng);
  const std::size_t n_tr = images.size() * 4 / 5;
  std::pair<std::vector<LabeledImage>, std::vector<LabeledImage>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_tr ? out.first : out.second;
    dst.push_back(images[static_cast<std::size_t>(order[i])]);
  }
  return out;
}

DatasetBundle make_bundle(const std::vector<LabeledImage>& images, std::uint64_t seed) {
  DatasetBundle b;
  std::tie(b.d_tr, b.d_val) = split_80_20(images, seed);
  b.split_seed = seed;
  b.d_u.reserve(b.d_tr.size());
  for (const auto& li : b.d_tr) b.d_u.push_back(li.pixels);
  return b;
}

Matrix hflip(const Matrix& image, Index side) {
  Matrix out(image.rows(), image.cols());
  for (Index c = 0; c < image.rows(); ++c)
    for (Index y = 0; y < side; ++y)
      for (Index x = 0; x < side; ++x) out(c, y * side + x) = image(c, y * side + (side - 1 - x));
  return out;
}

Matrix crop_padded(const Matrix& image, Index side, Index pad, Index top, Index left) {
  Matrix out = Matrix::Zero(image.rows(), image.cols());
  for (Index c = 0; c < image.rows(); ++c)
    for (Index y = 0; y < side; ++y)
      for (Index x = 0; x < side; ++x) {
        const Index sy = top + y - pad, sx = left + x - pad;
        if (sy >= 0 && sy < side && sx >= 0 && sx < side) out(c, y * side + x) = image(c, sy * side + sx);
      }
  return out;
}

Matrix augment(const Matrix& image, Index side, Rng& rng, const Augmentation& aug) {
  if (aug.policy == AugmentPolicy::None) return image;
  std::bernoulli_distribution coin(0.5);
  Matrix out = coin(rng) ? hflip(image, side) : image;
  if (aug.policy == AugmentPolicy::FlipCrop && aug.pad > 0) {
    std::uniform_int_distribution<Index> off(0, 2 * aug.pad);
    const Index top = off(rng);
    const Index left = off(rng);
    out = crop_padded(out, side, aug.pad, top, left);
  }
  return out;
}

std::vector<IndexList> batches(Index n, Index batch_size, std::uint64_t seed, long epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  Rng rng = derived_rng(seed, 0xba7c0000ULL + static_cast<std::uint64_t>(epoch));
  const IndexList order = shuffled_indices(n, rng);
  std::vector<IndexList> out;
  for (Index start = 0; start < n; start += batch_size) {
    const Index end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

void save_bundle(const std::string& path, const DatasetBundle& bundle) {
  TensorMap t;
  auto put_labeled = [&](const std::string& name, const std::vector<LabeledImage>& list) {
    std::vector<Matrix> px;
    Matrix labels(1, static_cast<Index>(list.size()));
    for (std::size_t i = 0; i < list.size(); ++i) {
      px.push_back(list[i].pixels);
      labels(0, static_cast<Index>(i)) = static_cast<double>(list[i].label);
    }
    t[name + ".pixels"] = images_to_matrix(px);
    t[name + ".labels"] = labels;
  };
  put_labeled("d_tr", bundle.d_tr);
  put_labeled("d_val", bundle.d_val);
  t["d_u.pixels"] = images_to_matrix(bundle.d_u);
  const Matrix& ref = !bundle.d_tr.empty() ? bundle.d_tr.front().pixels : bundle.d_u.front();
  t["meta.image_shape"] = (Matrix(1, 2) << static_cast<double>(ref.rows()), static_cast<double>(ref.cols())).finished();
  t["meta.split_seed"] = Matrix::Constant(1, 1, static_cast<double>(bundle.split_seed));
  if (bundle.informative_set) {
    Matrix s(1, static_cast<Index>(bundle.informative_set->size()));
    for (std::size_t i = 0; i < bundle.informative_set->size(); ++i)
      s(0, static_cast<Index>(i)) = static_cast<double>((*bundle.informative_set)[i]);
    t["meta.informative"] = s;
  }
  save_container(path, t);
}

DatasetBundle load_bundle(const std::string& path) {
  const TensorMap t = load_container(path);
  auto need = [&](const std::string& k) -> const Matrix& {
    auto it = t.find(k);
    if (it == t.end()) throw FormatError("bundle " + path + " lacks tensor " + k);
    return it->second;
  };
  const Matrix& shape = need("meta.image_shape");
  const Index ch = static_cast<Index>(shape(0, 0)), px = static_cast<Index>(shape(0, 1));
  auto image_at = [&](const Matrix& rows, Index i) {
    Matrix m(ch, px);
    Eigen::Map<Eigen::RowVectorXd>(m.data(), m.size()) = rows.row(i);
    return m;
  };
  auto get_labeled = [&](const std::string& name) {
    const Matrix& p = need(name + ".pixels");
    const Matrix& l = need(name + ".labels");
    std::vector<LabeledImage> out;
    for (Index i = 0; i < l.cols(); ++i) out.push_back({image_at(p, i), static_cast<Index>(l(0, i))});
    return out;
  };
  DatasetBundle b;
  b.d_tr = get_labeled("d_tr");
  b.d_val = get_labeled("d_val");
  const Matrix& u = need("d_u.pixels");
  for (Index i = 0; i < u.rows(); ++i) b.d_u.push_back(image_at(u, i));
  b.split_seed = static_cast<std::uint64_t>(need("meta.split_seed")(0, 0));
  if (auto it = t.find("meta.informative"); it != t.end()) {
    IndexList s;
    for (Index i = 0; i < it->second.cols(); ++i) s.push_back(static_cast<Index>(it->second(0, i)));
    b.informative_set = s;
  }
  return b;
}

}  // namespace mlomae
