#include <cmath>
#include <cstdio>
#include <fcntl.h>
#include <unistd.h>

#include "mlomae/container.hpp"
#include "mlomae/io.hpp"

namespace mlomae {

namespace {

std::string g17(double d) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

constexpr const char* kRoles[] = {"E", "D", "C", "T"};

ParamSet& role_set(Model& m, int i) {
  switch (i) {
    case 0: return m.encoder;
    case 1: return m.decoder;
    case 2: return m.head;
    default: return m.masking;
  }
}

const ParamSet& role_set(const Model& m, int i) { return role_set(const_cast<Model&>(m), i); }

OptState& role_opt(TrainState& s, int i) {
  switch (i) {
    case 0: return s.opt_E;
    case 1: return s.opt_D;
    case 2: return s.opt_C;
    default: return s.opt_T;
  }
}

Matrix dims_row(const ModelDims& d) {
  Matrix m(1, 11);
  m << static_cast<double>(d.image_side), static_cast<double>(d.channels), static_cast<double>(d.patch_size),
      static_cast<double>(d.emb_dim), static_cast<double>(d.dec_dim), static_cast<double>(d.enc_blocks),
      static_cast<double>(d.dec_blocks), static_cast<double>(d.heads), static_cast<double>(d.num_classes),
      static_cast<double>(d.mask_hidden), static_cast<double>(d.mlp_ratio);
  return m;
}

ModelDims dims_from_row(const Matrix& m) {
  if (m.size() != 11) throw FormatError("checkpoint meta/dims has wrong length");
  auto at = [&](Index i) { return static_cast<Index>(m(0, i)); };
  ModelDims d;
  d.image_side = at(0);
  d.channels = at(1);
  d.patch_size = at(2);
  d.emb_dim = at(3);
  d.dec_dim = at(4);
  d.enc_blocks = at(5);
  d.dec_blocks = at(6);
  d.heads = at(7);
  d.num_classes = at(8);
  d.mask_hidden = at(9);
  d.mlp_ratio = at(10);
  return d;
}

}  // namespace

std::string format_metrics_row(const MetricsRow& r) {
  std::string s = std::to_string(r.step) + "," + std::to_string(r.epoch);
  for (double v : {r.recon_loss, r.train_cls_loss, r.val_cls_loss, r.val_accuracy, r.mask_ratio, r.lr_E, r.lr_C,
                   r.lr_T})
    s += "," + g17(v);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", r.wallclock_ms);
  return s + "," + buf;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, bool append) {
  const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, fresh ? std::ios::trunc : std::ios::app);
  if (!out_) throw IoError("cannot open metrics file " + path.string());
  if (fresh) out_ << kMetricsHeader << "\n" << std::flush;
}

void MetricsWriter::write(const MetricsRow& row) {
  if (row.step <= last_step_) throw StateError("metrics rows must be appended in increasing step order");
  for (double v : {row.recon_loss, row.train_cls_loss, row.val_cls_loss, row.val_accuracy})
    if (!std::isfinite(v)) throw NumericError("refusing to write non-finite metrics row at step " + std::to_string(row.step));
  last_step_ = row.step;
  out_ << format_metrics_row(row) << "\n" << std::flush;
  if (!out_) throw IoError("metrics write failed");
}

TensorMap checkpoint_tensors(const TrainState& s, std::uint64_t seed) {
  TensorMap t;
  t["meta/seed"] = Matrix::Constant(1, 1, static_cast<double>(seed));
  t["meta/step"] = Matrix::Constant(1, 1, static_cast<double>(s.step));
  t["meta/dims"] = dims_row(s.model.dims);
  for (int i = 0; i < 4; ++i) {
    const std::string r = kRoles[i];
    for (const auto& [k, v] : role_set(s.model, i).tensors) t[r + "/param/" + k] = v;
    const OptState& o = role_opt(const_cast<TrainState&>(s), i);
    t[r + "/opt_step"] = Matrix::Constant(1, 1, static_cast<double>(o.step));
    for (const auto& [k, mom] : o.moments) {
      t[r + "/adam_m/" + k] = mom.m;
      t[r + "/adam_v/" + k] = mom.v;
    }
  }
  return t;
}

TrainState restore_checkpoint(const TensorMap& t, std::uint64_t* seed) {
  auto need = [&](const std::string& k) -> const Matrix& {
    auto it = t.find(k);
    if (it == t.end()) throw FormatError("checkpoint lacks tensor " + k);
    return it->second;
  };
  TrainState s;
  s.model.dims = dims_from_row(need("meta/dims"));
  s.model.dims.validate();
  s.step = static_cast<long>(need("meta/step")(0, 0));
  if (seed) *seed = static_cast<std::uint64_t>(need("meta/seed")(0, 0));
  for (int i = 0; i < 4; ++i) {
    const std::string r = kRoles[i];
    ParamSet& ps = role_set(s.model, i);
    ps.role = static_cast<Role>(i);
    OptState& o = role_opt(s, i);
    o.step = static_cast<long>(need(r + "/opt_step")(0, 0));
    const std::string pp = r + "/param/", pm = r + "/adam_m/", pv = r + "/adam_v/";
    for (const auto& [k, v] : t) {
      if (k.rfind(pp, 0) == 0) ps.tensors[k.substr(pp.size())] = v;
      if (k.rfind(pm, 0) == 0) o.moments[k.substr(pm.size())].m = v;
      if (k.rfind(pv, 0) == 0) o.moments[k.substr(pv.size())].v = v;
    }
  }
  // Shapes must agree with a fresh model of the stored dims.
  const Model ref = init_model(s.model.dims, 0);
  for (int i = 0; i < 4; ++i) {
    const TensorMap& want = role_set(ref, i).tensors;
    const TensorMap& got = role_set(s.model, i).tensors;
    if (want.size() != got.size()) throw FormatError(std::string("checkpoint tensor set mismatch for ") + kRoles[i]);
    for (const auto& [k, v] : want) {
      auto it = got.find(k);
      if (it == got.end() || it->second.rows() != v.rows() || it->second.cols() != v.cols())
        throw FormatError(std::string("checkpoint tensor ") + kRoles[i] + "/" + k + " missing or misshapen");
    }
  }
  return s;
}

void save_checkpoint(const std::string& path, const TrainState& s, std::uint64_t seed) {
  save_container(path, checkpoint_tensors(s, seed));
}

TrainState load_checkpoint(const std::string& path, std::uint64_t* seed) {
  return restore_checkpoint(load_container(path), seed);
}

void write_pgm(const std::filesystem::path& path, Index width, Index height, const std::vector<std::uint8_t>& px) {
  if (static_cast<Index>(px.size()) != width * height) throw DimensionError("write_pgm: pixel count mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string());
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, Index* width, Index* height) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  Index w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || w < 1 || h < 1 || maxval != 255) throw FormatError("not a P5 PGM with maxval 255");
  is.get();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w * h));
  is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (is.gcount() != static_cast<std::streamsize>(px.size())) throw FormatError("PGM pixel data truncated");
  if (width) *width = w;
  if (height) *height = h;
  return px;
}

namespace {

std::vector<std::uint8_t> fill_blocks(const ModelDims& dims, const std::vector<std::uint8_t>& per_patch) {
  const Index side = dims.image_side, p = dims.patch_size, g = dims.grid_side();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(side * side));
  for (Index y = 0; y < side; ++y)
    for (Index x = 0; x < side; ++x)
      px[static_cast<std::size_t>(y * side + x)] = per_patch[static_cast<std::size_t>((y / p) * g + x / p)];
  return px;
}

}  // namespace

std::vector<std::uint8_t> probability_map(const ModelDims& dims, const Eigen::RowVectorXd& probs) {
  std::vector<std::uint8_t> per(static_cast<std::size_t>(probs.size()));
  for (Index i = 0; i < probs.size(); ++i)
    per[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(probs(i), 0.0, 1.0)));
  return fill_blocks(dims, per);
}

std::vector<std::uint8_t> mask_overlay(const ModelDims& dims, const MaskSelection& sel) {
  std::vector<std::uint8_t> per(static_cast<std::size_t>(dims.num_patches()), 255);
  for (Index i : sel.masked_idx) per[static_cast<std::size_t>(i)] = 0;
  return fill_blocks(dims, per);
}

RunLock::RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) throw IoError("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

}  // namespace mlomae
