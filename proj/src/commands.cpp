#include "mlomae/commands.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "mlomae/container.hpp"
#include "mlomae/diagnostics.hpp"

namespace fs = std::filesystem;

namespace mlomae {

namespace {

// Maps the library's exception types onto exit codes.
template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "dimension mismatch: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

void apply_seed_override(RunConfig& cfg) {
  const char* env = std::getenv("MLOMAE_SEED");
  if (!env || !*env) return;
  const std::string v = env;
  std::uint64_t seed = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), seed);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError("MLOMAE_SEED: expected an integer, got '" + v + "'");
  cfg.mlo.seed = seed;
  cfg.validate();
}

// Keeps the header and rows with step <= last_step.
void truncate_metrics(const fs::path& path, long last_step) {
  if (!fs::exists(path)) return;
  std::ifstream is(path);
  std::string line, kept;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      if (line != kMetricsHeader) throw FormatError("unexpected metrics header in " + path.string());
      kept += line + "\n";
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stol(line.substr(0, line.find(','))) <= last_step) kept += line + "\n";
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  os << kept;
  if (!os) throw IoError("cannot rewrite " + path.string());
}

DatasetBundle dataset_from_selector(RunConfig cfg, const std::string& selector) {
  if (selector.rfind("bundle:", 0) == 0) return load_bundle(selector.substr(7));
  cfg.dataset = selector;
  cfg.validate();
  return load_dataset(cfg);
}

// Config for commands that start from a checkpoint: the file when given,
// otherwise defaults carrying the checkpoint's dims and seed.
RunConfig config_for(const TrainState& s, std::uint64_t seed, const std::optional<std::string>& path) {
  RunConfig cfg;
  if (path) {
    cfg = load_config(*path);
  } else {
    cfg.dims = s.model.dims;
    cfg.mlo.seed = seed;
  }
  apply_seed_override(cfg);
  if (!(cfg.dims == s.model.dims)) throw DimensionError("checkpoint dims differ from the config dims");
  return cfg;
}

}  // namespace

std::string init_checkpoint_name() { return "checkpoint_init.mlom"; }
std::string final_checkpoint_name() { return "checkpoint_final.mlom"; }
std::string step_checkpoint_name(long step) {
  std::ostringstream os;
  os << "checkpoint_step" << std::setw(6) << std::setfill('0') << step << ".mlom";
  return os.str();
}

double linear_probe(const ModelDims& dims, const ParamSet& encoder, const DatasetBundle& bundle, long epochs,
                    double lr, std::uint64_t seed) {
  if (bundle.d_tr.empty() || bundle.d_val.empty()) throw ConfigError("linear_probe: empty split");
  auto features = [&](const std::vector<LabeledImage>& split, IndexList& labels) {
    Matrix f(static_cast<Index>(split.size()), dims.emb_dim);
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i].pixels.rows() != dims.channels || split[i].pixels.cols() != dims.image_pixels())
        throw DimensionError("linear_probe: image shape " + shape_str(split[i].pixels) + " does not match dims");
      f.row(static_cast<Index>(i)) = pooled_features(dims, encoder, patchify(split[i].pixels, dims));
      labels.push_back(split[i].label);
    }
    return f;
  };
  IndexList y_tr, y_val;
  const Matrix f_tr = features(bundle.d_tr, y_tr), f_val = features(bundle.d_val, y_val);

  Rng rng(seed ^ 0x9b0beULL);
  TensorMap head = {{"w", xavier_uniform(dims.emb_dim, dims.num_classes, rng)},
                    {"b", Matrix::Zero(1, dims.num_classes)}};
  OptState st;
  AdamWParams<double> hp;
  hp.weight_decay = 0.0;
  for (long e = 0; e < epochs; ++e) {
    ad::Tape tape;
    const auto p = tape.params(head);
    const ad::Var logits = ad::add_row(ad::matmul(tape.constant(f_tr), p.at("w")), p.at("b"));
    const ad::Var loss = ad::cross_entropy_logits(logits, y_tr);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite probe loss at epoch " + std::to_string(e));
    adamw_update(head, tape.backward(loss), st, lr, hp);
  }
  const Matrix logits = (f_val * head.at("w")).rowwise() + head.at("b").row(0);
  Index correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg == y_val[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

double informative_sigma_gap(const ModelDims& dims, const ParamSet& masking, const std::vector<Matrix>& images,
                             const IndexList& informative) {
  const Index n = dims.num_patches();
  std::vector<bool> in_s(static_cast<std::size_t>(n), false);
  for (Index i : informative) {
    if (i < 0 || i >= n) throw DimensionError("informative index out of range");
    in_s[static_cast<std::size_t>(i)] = true;
  }
  const auto k = static_cast<double>(informative.size());
  if (k == 0.0 || k == static_cast<double>(n)) throw DimensionError("informative set must be a proper subset");
  double gap = 0.0;
  for (const Matrix& img : images) {
    const Matrix p = masking_probs(dims, masking, patchify(img, dims));
    double s_in = 0.0, s_out = 0.0;
    for (Index j = 0; j < n; ++j) (in_s[static_cast<std::size_t>(j)] ? s_in : s_out) += p(0, j);
    gap += s_in / k - s_out / (static_cast<double>(n) - k);
  }
  return gap / static_cast<double>(images.size());
}

int cmd_train(const TrainOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_config(opt.config_path);
    apply_seed_override(cfg);
    if (opt.strict) Eigen::setNbThreads(1);
    const DatasetBundle bundle = load_dataset(cfg);
    const fs::path dir = cfg.output_dir;
    RunLock lock(dir);
    const std::uint64_t seed = cfg.mlo.seed;

    TrainState s;
    if (opt.resume) {
      std::uint64_t ck_seed = 0;
      s = load_checkpoint(*opt.resume, &ck_seed);
      if (!(s.model.dims == cfg.dims)) throw DimensionError("checkpoint dims differ from the config dims");
      if (ck_seed != seed) throw ConfigError("checkpoint seed " + std::to_string(ck_seed) + " differs from run seed");
      truncate_metrics(dir / "metrics.csv", s.step);
    } else {
      s = init_state(cfg.dims, seed);
      save_checkpoint((dir / init_checkpoint_name()).string(), s, seed);
    }
    {
      std::ofstream cf(dir / "config.txt", std::ios::trunc);
      cf << serialize_config(cfg);
      if (!cf) throw IoError("cannot write resolved config");
    }

    MetricsWriter metrics(dir / "metrics.csv", opt.resume.has_value());
    const Schedule sched = make_schedule(bundle, cfg.mlo);
    out << "training " << (cfg.mlo.mode == Mode::MLO ? "mlo" : "blo") << " for " << sched.total_steps
        << " steps (" << sched.steps_per_epoch << " per epoch), seed " << seed << (opt.strict ? ", strict" : "")
        << "\n";
    MetricsRow last;
    mlo_train(s, bundle, cfg.mlo, [&](const MetricsRow& row) {
      metrics.write(row);
      last = row;
      if (cfg.checkpoint_every > 0 && row.step % cfg.checkpoint_every == 0)
        save_checkpoint((dir / step_checkpoint_name(row.step)).string(), s, seed);
    });
    save_checkpoint((dir / final_checkpoint_name()).string(), s, seed);
    out << "done: step " << s.step;
    if (last.step > 0) out << ", val_accuracy " << last.val_accuracy << ", val_cls_loss " << last.val_cls_loss;
    out << "\n";
    return kExitOk;
  });
}

int cmd_gradcheck(bool flip_c_path_sign, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::vector<std::string> failed;
    auto report = [&](const std::string& name, double value, double tol, bool ok) {
      out << std::left << std::setw(34) << name << " " << std::scientific << std::setprecision(3) << value
          << "  (tol " << tol << ")  " << (ok ? "ok" : "FAIL") << "\n"
          << std::defaultfloat;
      if (!ok) failed.push_back(name);
    };

    out << "# op-level max relative error\n";
    for (const auto& c : diag::op_grad_checks()) report("op " + c.name, c.max_rel_error, 1e-6, c.max_rel_error <= 1e-6);

    out << "# bilevel toy: hypergradient vs closed form t\n";
    for (double t : {-0.5, 0.3, 1.0}) {
      const diag::BilevelToy b = diag::analytic_bilevel_toy(t);
      std::ostringstream name;
      name << "toy t=" << t << " hypergradient=" << std::setprecision(10) << b.hypergradient;
      const double e = std::abs(b.hypergradient - b.closed_form);
      report(name.str(), e, 1e-6, e <= 1e-6);
    }

    out << "# pipeline hypergradient vs finite differences\n";
    out << "# (fda_eps_scale " << diag::oracle_config().fda_eps_scale << ")\n";
    for (std::uint64_t seed : {0, 1, 2}) {
      const diag::PipelineOracle o = diag::pipeline_hypergrad_oracle(seed, flip_c_path_sign);
      const std::string p = "pipeline seed " + std::to_string(seed);
      report(p + " 1-cosine", 1.0 - o.cosine, 1e-2, o.cosine >= 0.99);
      report(p + " rel_l2", o.rel_l2, 5e-2, o.rel_l2 <= 5e-2);
      report(p + " e-path rel_l2", o.rel_l2_e, 5e-2, o.rel_l2_e <= 5e-2);
      report(p + " c-path rel_l2", o.rel_l2_c, 5e-2, o.rel_l2_c <= 5e-2);
    }

    // Not gated: shows the truncation error at the training default.
    {
      const double scale = MloConfig{}.fda_eps_scale;
      const diag::PipelineOracle o = diag::pipeline_hypergrad_oracle(0, flip_c_path_sign, scale);
      out << "info pipeline seed 0 rel_l2 at fda_eps_scale " << scale << ": " << std::scientific
          << std::setprecision(3) << o.rel_l2 << std::defaultfloat << "\n";
    }

    out << "# FDA-JVP vs dense mixed second differences\n";
    const diag::FdaOracle f = diag::fda_vs_double_fd(11);
    report("fda rel_error (" + std::to_string(f.num_params) + " params)", f.rel_error, 1e-3, f.rel_error <= 1e-3);

    if (failed.empty()) {
      out << "all checks passed\n";
      return kExitOk;
    }
    err << failed.size() << " check(s) failed:\n";
    for (const auto& n : failed) err << "  " << n << "\n";
    return kExitOracle;
  });
}

int cmd_probe(const std::string& ckpt, const std::string& data, const std::optional<std::string>& config_path,
              std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::uint64_t seed = 0;
    const TrainState s = load_checkpoint(ckpt, &seed);
    const RunConfig cfg = config_for(s, seed, config_path);
    const DatasetBundle bundle = dataset_from_selector(cfg, data);
    const double acc = linear_probe(s.model.dims, s.model.encoder, bundle, cfg.probe_epochs, cfg.probe_lr, cfg.mlo.seed);
    out << "probe_accuracy " << std::setprecision(17) << acc << "\n";
    return kExitOk;
  });
}

int cmd_visualize(const std::string& ckpt, const std::string& out_dir, const std::optional<std::string>& config_path,
                  std::size_t count, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::uint64_t seed = 0;
    const TrainState s = load_checkpoint(ckpt, &seed);
    const RunConfig cfg = config_for(s, seed, config_path);
    const DatasetBundle bundle = load_dataset(cfg);
    const ModelDims& dims = s.model.dims;
    const double r = mask_ratio_at(s.step, cfg.mlo.ratio_schedule);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
    const std::size_t n = std::min(count, bundle.d_val.size());
    for (std::size_t i = 0; i < n; ++i) {
      const Matrix grid = patchify(bundle.d_val[i].pixels, dims);
      const Eigen::RowVectorXd probs = masking_probs(dims, s.model.masking, grid);
      const MaskSelection sel = select_mask(probs, r);
      std::ostringstream stem;
      stem << "image_" << std::setw(3) << std::setfill('0') << i;
      const fs::path base = fs::path(out_dir) / stem.str();
      write_pgm(base.string() + "_sigma.pgm", dims.image_side, dims.image_side, probability_map(dims, probs));
      write_pgm(base.string() + "_mask.pgm", dims.image_side, dims.image_side, mask_overlay(dims, sel));
    }
    out << "wrote " << 2 * n << " maps to " << out_dir << " (ratio " << r << ")\n";
    return kExitOk;
  });
}

}  // namespace mlomae
