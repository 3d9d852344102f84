#include "mlomae/mlo.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

namespace mlomae {

namespace {

ParamVars bind_params(ad::Tape& tape, const TensorMap& tensors, const std::string& prefix, bool track) {
  ParamVars p;
  for (const auto& [k, v] : tensors) p.emplace(k, track ? tape.param(prefix + k, v) : tape.constant(v));
  return p;
}

GradMap take(const GradMap& all, const std::string& prefix) {
  GradMap out;
  for (const auto& [k, v] : all)
    if (k.compare(0, prefix.size(), prefix) == 0) out.emplace(k.substr(prefix.size()), v);
  return out;
}

void require_finite(double x, const char* what, long step) {
  if (!std::isfinite(x)) {
    std::ostringstream os;
    os << "non-finite " << what << " at step " << step;
    throw NumericError(os.str());
  }
}

Matrix rows_of(const Matrix& grid, const IndexList& idx) {
  Matrix out(static_cast<Index>(idx.size()), grid.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = grid.row(idx[i]);
  return out;
}

Rng step_rng(std::uint64_t seed, long step, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

void inner_update(TensorMap& params, const GradMap& g, OptState& st, double lr, const MloConfig& cfg) {
  if (cfg.oracle_mode) {
    sgd_update(params, g, lr);
  } else {
    adamw_update(params, g, st, lr, cfg.adamw());
  }
}

constexpr std::uint64_t kTrainStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kValStream = 0xc2b2ae3d27d4eb4fULL;

}  // namespace

void MloConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (!(lr_E > 0.0) || !(lr_C > 0.0) || !(lr_T > 0.0)) fail("learning rates must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) fail("betas must lie in (0, 1)");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (unroll_E < 1 || unroll_C < 1) fail("unroll counts must be positive");
  if (t_update_every < 1) fail("t_update_every must be >= 1");
  if (!(fda_eps_scale > 0.0)) fail("fda_eps_scale must be positive");
  if (mode == Mode::BLO && !(gamma > 0.0)) fail("mode=blo requires gamma > 0");
  if (total_epochs < 0) fail("total_epochs must be non-negative");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (min_lr_scale < 0.0 || min_lr_scale > 1.0) fail("min_lr_scale must lie in [0, 1]");
  if (seed >= (1ULL << 53)) fail("seed must be below 2^53");
  mlomae::validate(ratio_schedule);
}

TrainState init_state(const ModelDims& dims, std::uint64_t seed) {
  TrainState s;
  s.model = init_model(dims, seed);
  return s;
}

std::vector<MaskSelection> select_masks(const ModelDims& dims, const TensorMap& T,
                                        const std::vector<Matrix>& grids, double r) {
  ParamSet ps{Role::Masking, T};
  std::vector<MaskSelection> out;
  if (grids.empty()) return out;
  const Matrix probs = masking_probs(dims, ps, grids);
  out.reserve(grids.size());
  for (Index b = 0; b < probs.rows(); ++b) out.push_back(select_mask(probs.row(b), r));
  return out;
}

LossEval recon_eval(const ModelDims& dims, const TensorMap& E, const TensorMap& D, const TensorMap& T,
                    const std::vector<Matrix>& grids, const std::vector<MaskSelection>& sels, Wrt wrt) {
  if (grids.empty()) throw std::invalid_argument("recon_eval: empty batch");
  if (grids.size() != sels.size()) throw std::invalid_argument("recon_eval: one selection per image");
  ad::Tape tape;
  const ParamVars pe = bind_params(tape, E, "E.", wrt.encoder);
  const ParamVars pd = bind_params(tape, D, "D.", wrt.decoder);
  // T enters as constants when it is not differentiated, so the loss is
  // still a function of its current values rather than of sel.probs.
  const ParamVars pt = bind_params(tape, T, "T.", wrt.masking);

  std::vector<Matrix> visible_rows, masked_rows;
  std::vector<IndexList> vis, msk;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    visible_rows.push_back(rows_of(grids[i], sels[i].visible_idx));
    masked_rows.push_back(rows_of(grids[i], sels[i].masked_idx));
    vis.push_back(sels[i].visible_idx);
    msk.push_back(sels[i].masked_idx);
  }
  ad::Var probs = masking_net_forward(dims, pt, tape.constant(stack_rows(grids)));
  ad::Var tokens = encoder_forward(dims, pe, tape.constant(stack_rows(visible_rows)), vis);
  ad::Var pred = decoder_forward(dims, pd, tokens, vis, msk);
  ad::Var total = weighted_recon_loss(sels, probs, pred, stack_rows(masked_rows)).total;

  LossEval ev;
  ev.loss = total.item();
  if (wrt.encoder || wrt.decoder || wrt.masking) {
    const GradMap g = tape.backward(total);
    if (wrt.encoder) ev.grad_E = take(g, "E.");
    if (wrt.decoder) ev.grad_D = take(g, "D.");
    if (wrt.masking) ev.grad_T = take(g, "T.");
  }
  return ev;
}

LossEval cls_eval(const ModelDims& dims, const TensorMap& E, const TensorMap& C, const LabeledBatch& batch,
                  Wrt wrt) {
  if (batch.grids.empty()) throw std::invalid_argument("cls_eval: empty batch");
  ad::Tape tape;
  const ParamVars pe = bind_params(tape, E, "E.", wrt.encoder);
  const ParamVars pc = bind_params(tape, C, "C.", wrt.head);
  const std::vector<IndexList> all(batch.grids.size(), all_indices(dims.num_patches()));
  ad::Var tokens = encoder_forward(dims, pe, tape.constant(stack_rows(batch.grids)), all);
  ad::Var logits = head_forward(dims, pc, tokens, dims.num_patches());
  ad::Var loss = ad::cross_entropy_logits(logits, batch.labels);

  LossEval ev;
  ev.loss = loss.item();
  Index correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg = 0;
    logits.value().row(i).maxCoeff(&arg);
    if (arg == batch.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(logits.rows());
  if (wrt.encoder || wrt.head) {
    const GradMap g = tape.backward(loss);
    if (wrt.encoder) ev.grad_E = take(g, "E.");
    if (wrt.head) ev.grad_C = take(g, "C.");
  }
  return ev;
}

LossEval evaluate(const ModelDims& dims, const TensorMap& E, const TensorMap& C, const LabeledBatch& data) {
  return cls_eval(dims, E, C, data, {});
}

GradMap fda_jvp(const GradFn& grad_fn, const TensorMap& base, const TensorMap& direction, double eps_scale,
                double* eps_used) {
  const double norm = l2_norm(direction);
  if (norm == 0.0) {
    if (eps_used) *eps_used = 0.0;
    return zeros_like(grad_fn(base));
  }
  const double eps = eps_scale / norm;
  if (eps_used) *eps_used = eps;
  TensorMap plus = base;
  axpy(eps, direction, plus);
  TensorMap minus = base;
  axpy(-eps, direction, minus);
  GradMap out = grad_fn(plus);
  axpy(-1.0, grad_fn(minus), out);
  for (auto& [k, v] : out) v /= 2.0 * eps;
  return out;
}

HypergradReport chain_rule_hypergrad(const ChainRuleInputs& in) {
  HypergradReport r;
  r.direct_term = zeros_like(in.masking_like);
  r.e_path_term = scaled(fda_jvp(in.inner_cross, in.inner_base, in.v_E, in.eps_scale, &r.fda_eps_used),
                         -in.inner_lr);
  if (in.head_cross && squared_norm(in.w_C) > 0.0) {
    const double sign = in.flip_c_path_sign ? 1.0 : -1.0;
    const GradMap u = scaled(fda_jvp(in.head_cross, in.head_base, in.w_C, in.eps_scale), sign * in.head_lr);
    r.c_path_term = scaled(fda_jvp(in.inner_cross, in.inner_base, u, in.eps_scale), -in.inner_lr);
  } else {
    r.c_path_term = zeros_like(in.masking_like);
  }
  r.grad_T = r.direct_term;
  axpy(1.0, r.e_path_term, r.grad_T);
  axpy(1.0, r.c_path_term, r.grad_T);
  return r;
}

Stage1Context stage1_update(TrainState& s, const std::vector<Matrix>& grids, const MloConfig& cfg, double r,
                            double lr_E) {
  if (grids.empty()) throw std::invalid_argument("stage1_update: empty batch");
  Model& m = s.model;
  Stage1Context ctx;
  ctx.grids = grids;
  ctx.selections = select_masks(m.dims, m.masking.tensors, grids, r);
  ctx.lr = lr_E;
  for (long it = 0; it < cfg.unroll_E; ++it) {
    ctx.encoder_base = m.encoder.tensors;
    ctx.decoder_base = m.decoder.tensors;
    const LossEval ev = recon_eval(m.dims, m.encoder.tensors, m.decoder.tensors, m.masking.tensors, grids,
                                   ctx.selections, {.encoder = true, .decoder = true});
    require_finite(ev.loss, "recon_loss", s.step);
    ctx.loss = ev.loss;
    inner_update(m.encoder.tensors, ev.grad_E, s.opt_E, lr_E, cfg);
    inner_update(m.decoder.tensors, ev.grad_D, s.opt_D, lr_E, cfg);
  }
  return ctx;
}

Stage2Context stage2_update(TrainState& s, const LabeledBatch& batch, const MloConfig& cfg, double lr_C) {
  Model& m = s.model;
  Stage2Context ctx;
  ctx.batch = batch;
  ctx.encoder_used = m.encoder.tensors;
  ctx.lr = lr_C;
  for (long it = 0; it < cfg.unroll_C; ++it) {
    ctx.head_base = m.head.tensors;
    const LossEval ev = cls_eval(m.dims, m.encoder.tensors, m.head.tensors, batch, {.head = true});
    require_finite(ev.loss, "train_cls_loss", s.step);
    ctx.loss = ev.loss;
    inner_update(m.head.tensors, ev.grad_C, s.opt_C, lr_C, cfg);
  }
  return ctx;
}

HypergradReport stage3_hypergrad(TrainState& s, const LabeledBatch& val, const Stage1Context& ctx1,
                                 const Stage2Context& ctx2, const MloConfig& cfg, double lr_T, long outer_step) {
  if (ctx1.grids.empty() || ctx1.encoder_base.empty() || ctx2.batch.grids.empty() || ctx2.head_base.empty())
    throw StateError("stage3_hypergrad: missing Stage I/II context");
  Model& m = s.model;
  const ModelDims dims = m.dims;
  const LossEval v = cls_eval(dims, m.encoder.tensors, m.head.tensors, val, {.encoder = true, .head = true});
  require_finite(v.loss, "val_cls_loss", s.step);

  const TensorMap& T = m.masking.tensors;
  ChainRuleInputs in;
  in.inner_cross = [&](const TensorMap& E) {
    return recon_eval(dims, E, ctx1.decoder_base, T, ctx1.grids, ctx1.selections, {.masking = true}).grad_T;
  };
  in.inner_base = ctx1.encoder_base;
  in.inner_lr = ctx1.lr;
  in.v_E = v.grad_E;
  in.head_cross = [&](const TensorMap& C) {
    return cls_eval(dims, ctx2.encoder_used, C, ctx2.batch, {.encoder = true}).grad_E;
  };
  in.head_base = ctx2.head_base;
  in.head_lr = ctx2.lr;
  in.w_C = v.grad_C;
  in.masking_like = T;
  in.eps_scale = cfg.fda_eps_scale;
  in.flip_c_path_sign = cfg.flip_c_path_sign;

  HypergradReport r = chain_rule_hypergrad(in);
  r.val_loss = v.loss;
  r.val_accuracy = v.accuracy;
  if (!all_finite(r.grad_T)) throw NumericError("non-finite hypergradient at step " + std::to_string(s.step));
  if (!cfg.freeze_masking && outer_step % cfg.t_update_every == 0) {
    adamw_update(m.masking.tensors, r.grad_T, s.opt_T, lr_T, cfg.adamw());
    r.applied = true;
  }
  return r;
}

BloStepResult blo_step(TrainState& s, const std::vector<Matrix>& unlabeled, const LabeledBatch& train,
                       const LabeledBatch& val, const MloConfig& cfg, double r, double lr_E, double lr_C,
                       double lr_T, long outer_step) {
  if (!(cfg.gamma > 0.0)) throw ConfigError("blo_step requires gamma > 0");
  Model& m = s.model;
  const ModelDims dims = m.dims;
  const std::vector<MaskSelection> sels = select_masks(dims, m.masking.tensors, unlabeled, r);
  const TensorMap E0 = m.encoder.tensors;
  const TensorMap D0 = m.decoder.tensors;

  const LossEval rec = recon_eval(dims, E0, D0, m.masking.tensors, unlabeled, sels,
                                  {.encoder = true, .decoder = true});
  const LossEval cls = cls_eval(dims, E0, m.head.tensors, train, {.encoder = true, .head = true});
  require_finite(rec.loss, "recon_loss", s.step);
  require_finite(cls.loss, "train_cls_loss", s.step);

  GradMap gE = cls.grad_E;
  axpy(cfg.gamma, rec.grad_E, gE);
  const GradMap gD = scaled(rec.grad_D, cfg.gamma);
  inner_update(m.encoder.tensors, gE, s.opt_E, lr_E, cfg);
  inner_update(m.decoder.tensors, gD, s.opt_D, lr_E, cfg);
  inner_update(m.head.tensors, cls.grad_C, s.opt_C, lr_C, cfg);

  BloStepResult out;
  out.recon_loss = rec.loss;
  out.cls_loss = cls.loss;
  if (cfg.freeze_masking || outer_step % cfg.t_update_every != 0) return out;

  const LossEval v = cls_eval(dims, m.encoder.tensors, m.head.tensors, val, {.encoder = true});
  require_finite(v.loss, "val_cls_loss", s.step);
  const TensorMap& T = m.masking.tensors;
  ChainRuleInputs in;
  in.inner_cross = [&](const TensorMap& E) {
    return recon_eval(dims, E, D0, T, unlabeled, sels, {.masking = true}).grad_T;
  };
  in.inner_base = E0;
  in.inner_lr = lr_E * cfg.gamma;
  in.v_E = v.grad_E;
  in.masking_like = T;
  in.eps_scale = cfg.fda_eps_scale;
  out.hyper = chain_rule_hypergrad(in);
  out.hyper.val_loss = v.loss;
  out.hyper.val_accuracy = v.accuracy;
  if (!all_finite(out.hyper.grad_T))
    throw NumericError("non-finite hypergradient at step " + std::to_string(s.step));
  adamw_update(m.masking.tensors, out.hyper.grad_T, s.opt_T, lr_T, cfg.adamw());
  out.hyper.applied = true;
  return out;
}

Schedule make_schedule(const DatasetBundle& bundle, const MloConfig& cfg) {
  Schedule sc;
  const auto n = static_cast<long>(bundle.d_u.size());
  sc.steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  sc.total_steps = sc.steps_per_epoch * cfg.total_epochs;
  return sc;
}

double scheduled_lr(double base, long step, const Schedule& sched, const MloConfig& cfg) {
  if (!cfg.cosine_schedule) return base;
  return cosine_lr(std::min(step, sched.total_steps), sched.total_steps, base, base * cfg.min_lr_scale);
}

PreparedData prepare(const DatasetBundle& bundle, const ModelDims& dims) {
  PreparedData p;
  for (const Matrix& img : bundle.d_u) p.unlabeled.push_back(patchify(img, dims));
  for (const auto& li : bundle.d_tr) {
    p.train.grids.push_back(patchify(li.pixels, dims));
    p.train.labels.push_back(li.label);
  }
  for (const auto& li : bundle.d_val) {
    p.val.grids.push_back(patchify(li.pixels, dims));
    p.val.labels.push_back(li.label);
  }
  return p;
}

void mlo_train(TrainState& s, const DatasetBundle& bundle, const MloConfig& cfg, const MetricsSink& sink,
               std::optional<long> stop_at) {
  cfg.validate();
  if (bundle.d_u.empty() || bundle.d_tr.empty() || bundle.d_val.empty())
    throw ConfigError("mlo_train: dataset splits must be nonempty");
  const ModelDims dims = s.model.dims;
  const Schedule sched = make_schedule(bundle, cfg);
  const PreparedData data = prepare(bundle, dims);
  const bool augmenting = cfg.augmentation.policy != AugmentPolicy::None;
  const auto n_u = static_cast<Index>(data.unlabeled.size());
  const auto n_tr = static_cast<Index>(data.train.grids.size());
  const auto n_val = static_cast<Index>(data.val.grids.size());
  const long val_batches = (n_val + cfg.batch_size - 1) / cfg.batch_size;

  const long end = stop_at ? std::min(*stop_at, sched.total_steps) : sched.total_steps;
  const auto t0 = std::chrono::steady_clock::now();
  while (s.step < end) {
    const long step = s.step;
    const long epoch = step / sched.steps_per_epoch;
    const long b = step % sched.steps_per_epoch;

    const IndexList u_idx = batches(n_u, cfg.batch_size, cfg.seed, epoch)[static_cast<std::size_t>(b)];
    const auto tr_all = batches(n_tr, cfg.batch_size, cfg.seed ^ kTrainStream, epoch);
    const IndexList& tr_idx = tr_all[static_cast<std::size_t>(b) % tr_all.size()];
    const IndexList v_idx = batches(n_val, cfg.batch_size, cfg.seed ^ kValStream,
                                    step / val_batches)[static_cast<std::size_t>(step % val_batches)];

    Rng aug_rng = step_rng(cfg.seed, step, 0xa06);
    std::vector<Matrix> ugrids;
    for (Index i : u_idx) {
      const auto k = static_cast<std::size_t>(i);
      ugrids.push_back(augmenting ? patchify(augment(bundle.d_u[k], dims.image_side, aug_rng, cfg.augmentation), dims)
                                  : data.unlabeled[k]);
    }
    LabeledBatch trb;
    for (Index i : tr_idx) {
      const auto k = static_cast<std::size_t>(i);
      trb.grids.push_back(augmenting
                              ? patchify(augment(bundle.d_tr[k].pixels, dims.image_side, aug_rng, cfg.augmentation), dims)
                              : data.train.grids[k]);
      trb.labels.push_back(data.train.labels[k]);
    }
    LabeledBatch vb;
    for (Index i : v_idx) {
      vb.grids.push_back(data.val.grids[static_cast<std::size_t>(i)]);
      vb.labels.push_back(data.val.labels[static_cast<std::size_t>(i)]);
    }

    MetricsRow row;
    row.mask_ratio = mask_ratio_at(step, cfg.ratio_schedule);
    row.lr_E = scheduled_lr(cfg.lr_E, step, sched, cfg);
    row.lr_C = scheduled_lr(cfg.lr_C, step, sched, cfg);
    row.lr_T = scheduled_lr(cfg.lr_T, step, sched, cfg);

    if (cfg.mode == Mode::MLO) {
      const Stage1Context c1 = stage1_update(s, ugrids, cfg, row.mask_ratio, row.lr_E);
      const Stage2Context c2 = stage2_update(s, trb, cfg, row.lr_C);
      if (!cfg.freeze_masking && step % cfg.t_update_every == 0)
        stage3_hypergrad(s, vb, c1, c2, cfg, row.lr_T, step);
      row.recon_loss = c1.loss;
      row.train_cls_loss = c2.loss;
    } else {
      const BloStepResult r = blo_step(s, ugrids, trb, vb, cfg, row.mask_ratio, row.lr_E, row.lr_C, row.lr_T, step);
      row.recon_loss = r.recon_loss;
      row.train_cls_loss = r.cls_loss;
    }

    const LossEval val = evaluate(dims, s.model.encoder.tensors, s.model.head.tensors, data.val);
    require_finite(val.loss, "val_cls_loss", step);
    ++s.step;
    row.step = s.step;
    row.epoch = epoch;
    row.val_cls_loss = val.loss;
    row.val_accuracy = val.accuracy;
    row.wallclock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (sink) sink(row);
  }
}

}  // namespace mlomae
