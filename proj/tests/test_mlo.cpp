#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "mlomae/diagnostics.hpp"
#include "mlomae/mlo.hpp"

using namespace mlomae;
using testutil::random_matrix;

namespace {

ModelDims small_dims() {
  ModelDims d;
  d.image_side = 8;
  d.patch_size = 4;
  d.emb_dim = 8;
  d.dec_dim = 8;
  d.enc_blocks = 1;
  d.dec_blocks = 1;
  d.heads = 2;
  d.num_classes = 2;
  d.mask_hidden = 8;
  return d;
}

SynthSpec small_spec() {
  SynthSpec s;
  s.side = 8;
  s.patch_size = 4;
  s.num_classes = 2;
  s.informative = {0};
  s.samples_per_class = 10;
  return s;
}

MloConfig small_config() {
  MloConfig c;
  c.lr_E = 1e-3;
  c.lr_C = 1e-2;
  c.lr_T = 1e-3;
  c.unroll_E = 1;
  c.unroll_C = 1;
  c.total_epochs = 2;
  c.batch_size = 8;
  c.ratio_schedule = FixedRatio{0.5};
  return c;
}

struct Batches {
  std::vector<Matrix> unlabeled;
  LabeledBatch train;
  LabeledBatch val;
};

Batches small_batches(const ModelDims& d, std::uint64_t seed) {
  const PreparedData p = prepare(synth_generate(small_spec(), seed), d);
  Batches b;
  b.unlabeled.assign(p.unlabeled.begin(), p.unlabeled.begin() + 6);
  b.train.grids.assign(p.train.grids.begin(), p.train.grids.begin() + 6);
  b.train.labels.assign(p.train.labels.begin(), p.train.labels.begin() + 6);
  b.val = p.val;
  return b;
}

bool same(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [k, v] : a)
    if (!(b.at(k) == v)) return false;
  return true;
}

TensorMap single(const std::string& name, double v) { return {{name, Matrix::Constant(1, 1, v)}}; }

}  // namespace

TEST_CASE("config validation") {
  MloConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr_T = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MloConfig{};
  c.beta2 = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MloConfig{};
  c.t_update_every = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MloConfig{};
  c.mode = Mode::BLO;
  c.gamma = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("stage I with zero learning rate leaves E and D unchanged") {
  const ModelDims d = small_dims();
  const Batches b = small_batches(d, 1);
  TrainState s = init_state(d, 2);
  const Model before = s.model;
  const Stage1Context ctx = stage1_update(s, b.unlabeled, small_config(), 0.5, 0.0);
  CHECK(same(s.model.encoder.tensors, before.encoder.tensors));
  CHECK(same(s.model.decoder.tensors, before.decoder.tensors));
  CHECK(ctx.loss > 0.0);
  CHECK(ctx.selections.size() == b.unlabeled.size());
}

TEST_CASE("stage I descends on a fixed batch with a small step") {
  const ModelDims d = small_dims();
  const Batches b = small_batches(d, 3);
  TrainState s = init_state(d, 4);
  const MloConfig cfg = small_config();
  double prev = stage1_update(s, b.unlabeled, cfg, 0.5, 1e-4).loss;
  for (int i = 0; i < 10; ++i) {
    const double cur = stage1_update(s, b.unlabeled, cfg, 0.5, 1e-4).loss;
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("two unrolled inner steps equal two single-step calls bit-exactly") {
  const ModelDims d = small_dims();
  const Batches b = small_batches(d, 5);
  MloConfig one = small_config(), two = small_config();
  two.unroll_E = 2;
  two.unroll_C = 2;
  TrainState a = init_state(d, 6), c = init_state(d, 6);
  stage1_update(a, b.unlabeled, two, 0.5, 1e-3);
  stage2_update(a, b.train, two, 1e-2);
  for (int i = 0; i < 2; ++i) stage1_update(c, b.unlabeled, one, 0.5, 1e-3);
  for (int i = 0; i < 2; ++i) stage2_update(c, b.train, one, 1e-2);
  CHECK(same(a.model.encoder.tensors, c.model.encoder.tensors));
  CHECK(same(a.model.decoder.tensors, c.model.decoder.tensors));
  CHECK(same(a.model.head.tensors, c.model.head.tensors));
}

TEST_CASE("stage II: zero rate, descent, and separable features") {
  const ModelDims d = small_dims();
  const Batches b = small_batches(d, 7);
  const MloConfig cfg = small_config();
  {
    TrainState s = init_state(d, 8);
    const TensorMap c0 = s.model.head.tensors;
    stage2_update(s, b.train, cfg, 0.0);
    CHECK(same(s.model.head.tensors, c0));
  }
  {
    TrainState s = init_state(d, 8);
    double prev = stage2_update(s, b.train, cfg, 1e-3).loss;
    for (int i = 0; i < 10; ++i) {
      const double cur = stage2_update(s, b.train, cfg, 1e-3).loss;
      CHECK(cur <= prev);
      prev = cur;
    }
  }
  {
    // With no encoder blocks and an identity embedding, pooled features are
    // layer-normed pixel means of the patches; two images whose pixel
    // patterns are mirror images are separable by a linear head.
    ModelDims id = d;
    id.enc_blocks = 0;
    id.emb_dim = 16;
    id.dec_dim = 16;
    TrainState s = init_state(id, 9);
    s.model.encoder.tensors["patch_w"] = Matrix::Identity(16, 16);
    LabeledBatch sep;
    for (int i = 0; i < 8; ++i) {
      Matrix g = random_matrix(4, 16, 200 + static_cast<unsigned>(i), 0, 1);
      const int label = i % 2;
      g.col(label) *= 4.0;  // class mark in a distinct feature
      sep.grids.push_back(g);
      sep.labels.push_back(label);
    }
    double acc = 0.0;
    for (int i = 0; i < 200 && acc < 1.0; ++i) {
      stage2_update(s, sep, cfg, 1e-2);
      acc = cls_eval(id, s.model.encoder.tensors, s.model.head.tensors, sep, {}).accuracy;
    }
    CHECK(acc == 1.0);
  }
}

TEST_CASE("fda_jvp is exact on bilinear and quadratic forms") {
  // f(e, t) = e·t: ∇_t f = e, so the directional derivative in e is v.
  const GradFn bilinear = [](const TensorMap& e) { return single("t", e.at("e")(0, 0)); };
  for (double eps : {1e-6, 1e-2, 1.0}) {
    const GradMap r = fda_jvp(bilinear, single("e", 0.7), single("e", -1.3), eps);
    CHECK(r.at("t")(0, 0) == doctest::Approx(-1.3).epsilon(1e-9));
  }
  // f(e, t) = ½e²t: ∇_t f = ½e², derivative e·v = 1 at e = 1, v = 1.
  const GradFn quad = [](const TensorMap& e) {
    const double x = e.at("e")(0, 0);
    return single("t", 0.5 * x * x);
  };
  for (double eps : {1e-3, 0.1, 0.5}) CHECK(fda_jvp(quad, single("e", 1.0), single("e", 1.0), eps).at("t")(0, 0) ==
                                           doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fda_jvp antisymmetry, zero direction, and restored base") {
  const Matrix w = random_matrix(3, 2, 1);
  const GradFn g = [&](const TensorMap& e) {
    const Matrix& x = e.at("x");
    Matrix out = (x * w).array().tanh().matrix();
    return TensorMap{{"t", out}};
  };
  const TensorMap base{{"x", random_matrix(2, 3, 2)}};
  const TensorMap copy = base;
  const TensorMap v{{"x", random_matrix(2, 3, 3)}};
  const GradMap plus = fda_jvp(g, base, v, 0.01);
  const GradMap minus = fda_jvp(g, base, scaled(v, -1.0), 0.01);
  CHECK((plus.at("t") + minus.at("t")).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(same(base, copy));

  double eps = -1.0;
  const GradMap z = fda_jvp(g, base, zeros_like(v), 0.01, &eps);
  CHECK(z.at("t").cwiseAbs().maxCoeff() == 0.0);
  CHECK(z.at("t").rows() == 2);
  CHECK(eps == 0.0);

  fda_jvp(g, base, v, 0.01, &eps);
  CHECK(eps == doctest::Approx(0.01 / l2_norm(v)).epsilon(1e-15));
}

TEST_CASE("fda_jvp matches a dense mixed-derivative oracle on a small MLP") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    const diag::FdaOracle o = diag::fda_vs_double_fd(seed);
    CAPTURE(seed);
    CHECK(o.num_params <= 50);
    CHECK(o.rel_error <= 1e-3);
  }
}

TEST_CASE("scalar bilevel toy hypergradient") {
  const diag::BilevelToy toy = diag::analytic_bilevel_toy(0.3);
  CHECK(std::abs(toy.hypergradient - 0.3) <= 1e-6);
  CHECK(std::abs(toy.closed_form - 0.3) <= 1e-15);
  CHECK(std::abs(toy.brute_force - 0.3) <= 1e-6);
}

TEST_CASE("whole-pipeline hypergradient matches finite differences on three seeds") {
  for (std::uint64_t seed : {0ULL, 1ULL, 2ULL}) {
    const diag::PipelineOracle o = diag::pipeline_hypergrad_oracle(seed);
    CAPTURE(seed);
    CHECK(o.cosine >= 0.99);
    CHECK(o.rel_l2 <= 5e-2);
    CHECK(o.rel_l2_e <= 5e-2);
    CHECK(o.rel_l2_c <= 5e-2);
  }
  // A wrong C-path sign is detected.
  const diag::PipelineOracle bad = diag::pipeline_hypergrad_oracle(0, true);
  CHECK(bad.rel_l2_c > 5e-2);
}

TEST_CASE("hypergradient report invariants") {
  const ModelDims d = diag::oracle_dims();
  MloConfig cfg = diag::oracle_config();
  cfg.freeze_masking = false;
  Rng rng(3);
  LabeledBatch u, tr, val;
  for (Index i = 0; i < 4; ++i) {
    u.grids.push_back(random_matrix(4, 4, 300 + static_cast<unsigned>(i), 0, 1));
    tr.grids.push_back(random_matrix(4, 4, 400 + static_cast<unsigned>(i), 0, 1));
    tr.labels.push_back(i % 3);
    val.grids.push_back(random_matrix(4, 4, 500 + static_cast<unsigned>(i), 0, 1));
    val.labels.push_back((i + 1) % 3);
  }
  TrainState s = init_state(d, 11);
  const TensorMap t0 = s.model.masking.tensors;
  const Stage1Context c1 = stage1_update(s, u.grids, cfg, 0.5, cfg.lr_E);
  const Stage2Context c2 = stage2_update(s, tr, cfg, cfg.lr_C);
  const HypergradReport r = stage3_hypergrad(s, val, c1, c2, cfg, cfg.lr_T, 0);
  for (const auto& [k, g] : r.grad_T) {
    CAPTURE(k);
    CHECK(r.direct_term.at(k).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g == r.direct_term.at(k) + r.e_path_term.at(k) + r.c_path_term.at(k));
  }
  CHECK(r.applied);
  CHECK(!same(s.model.masking.tensors, t0));
  CHECK(r.fda_eps_used > 0.0);

  // Updates are skipped off the t_update_every cadence.
  cfg.t_update_every = 5;
  const TensorMap t1 = s.model.masking.tensors;
  const HypergradReport skipped = stage3_hypergrad(s, val, c1, c2, cfg, cfg.lr_T, 3);
  CHECK(!skipped.applied);
  CHECK(same(s.model.masking.tensors, t1));

  CHECK_THROWS_AS(stage3_hypergrad(s, val, Stage1Context{}, c2, cfg, cfg.lr_T, 0), StateError);
  CHECK_THROWS_AS(stage3_hypergrad(s, val, c1, Stage2Context{}, cfg, cfg.lr_T, 0), StateError);
}

TEST_CASE("e-path term vanishes as the encoder rate goes to zero") {
  const ModelDims d = diag::oracle_dims();
  const MloConfig cfg = diag::oracle_config();
  LabeledBatch u, tr, val;
  for (Index i = 0; i < 3; ++i) {
    u.grids.push_back(random_matrix(4, 4, 600 + static_cast<unsigned>(i), 0, 1));
    tr.grids.push_back(random_matrix(4, 4, 700 + static_cast<unsigned>(i), 0, 1));
    tr.labels.push_back(i);
    val.grids.push_back(random_matrix(4, 4, 800 + static_cast<unsigned>(i), 0, 1));
    val.labels.push_back(i);
  }
  auto e_norm = [&](double lr_E) {
    TrainState s = init_state(d, 12);
    const Stage1Context c1 = stage1_update(s, u.grids, cfg, 0.5, lr_E);
    const Stage2Context c2 = stage2_update(s, tr, cfg, cfg.lr_C);
    return l2_norm(stage3_hypergrad(s, val, c1, c2, cfg, cfg.lr_T, 0).e_path_term);
  };
  const double big = e_norm(0.1), tiny = e_norm(1e-9);
  CHECK(big > 0.0);
  CHECK(tiny <= 1e-6 * big);
}

TEST_CASE("argmax invariance under positive scaling of the pre-sigmoid scores") {
  const ModelDims d = small_dims();
  const Batches b = small_batches(d, 13);
  const TrainState s = init_state(d, 14);
  TensorMap scaled_t = s.model.masking.tensors;
  scaled_t["fc2_w"] *= 3.5;
  scaled_t["fc2_b"] *= 3.5;
  const auto a = select_masks(d, s.model.masking.tensors, b.unlabeled, 0.5);
  const auto c = select_masks(d, scaled_t, b.unlabeled, 0.5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].masked_idx == c[i].masked_idx);
    CHECK(!(a[i].probs == c[i].probs));
  }
}

TEST_CASE("BLO step: gamma errors, determinism, and the tradeoff extremes") {
  const ModelDims d = small_dims();
  const Batches b = small_batches(d, 15);
  MloConfig cfg = small_config();
  cfg.mode = Mode::BLO;
  cfg.weight_decay = 0.0;

  {
    MloConfig bad = cfg;
    bad.gamma = 0.0;
    TrainState s = init_state(d, 16);
    CHECK_THROWS_AS(blo_step(s, b.unlabeled, b.train, b.val, bad, 0.5, 1e-3, 1e-2, 1e-3, 0), ConfigError);
    bad.gamma = -1.0;
    CHECK_THROWS_AS(blo_step(s, b.unlabeled, b.train, b.val, bad, 0.5, 1e-3, 1e-2, 1e-3, 0), ConfigError);
  }

  struct Run {
    std::vector<double> recon, cls;
    TrainState state;
  };
  auto run = [&](double gamma, int steps, bool freeze = false) {
    MloConfig c = cfg;
    c.gamma = gamma;
    c.freeze_masking = freeze;
    Run r{{}, {}, init_state(d, 17)};
    for (int i = 0; i < steps; ++i) {
      const BloStepResult out = blo_step(r.state, b.unlabeled, b.train, b.val, c, 0.5, 3e-3, 1e-2, 1e-3, i);
      r.recon.push_back(out.recon_loss);
      r.cls.push_back(out.cls_loss);
    }
    return r;
  };

  const Run one = run(1.0, 40), again = run(1.0, 40);
  CHECK(one.recon == again.recon);
  CHECK(one.cls == again.cls);
  CHECK(same(one.state.model.masking.tensors, again.state.model.masking.tensors));

  // A vanishing γ removes the reconstruction objective: the decoder never
  // learns, and what drift remains comes from the classification updates of
  // the shared encoder, a small fraction of the γ=1 descent. T is frozen here
  // because shrinking σ lowers the weighted loss by itself.
  const Run on = run(1.0, 40, true), off = run(1e-12, 40, true);
  CHECK(on.recon.back() < 0.5 * on.recon.front());
  CHECK(off.recon.front() - off.recon.back() < 0.3 * (on.recon.front() - on.recon.back()));
  CHECK(off.recon.back() > 5.0 * on.recon.back());

  // A huge γ lets reconstruction dominate the shared encoder.
  const Run heavy = run(1e6, 40);
  CHECK(heavy.cls.back() > one.cls.back());
}

TEST_CASE("training loop: zero epochs, frozen masking, determinism, schedule") {
  const ModelDims d = small_dims();
  const DatasetBundle bundle = synth_generate(small_spec(), 18);
  MloConfig cfg = small_config();

  {
    MloConfig zero = cfg;
    zero.total_epochs = 0;
    TrainState s = init_state(d, 19);
    const Model init = s.model;
    int rows = 0;
    mlo_train(s, bundle, zero, [&](const MetricsRow&) { ++rows; });
    CHECK(rows == 0);
    CHECK(same(s.model.encoder.tensors, init.encoder.tensors));
    CHECK(same(s.model.masking.tensors, init.masking.tensors));
  }

  {
    MloConfig frozen = cfg;
    frozen.freeze_masking = true;
    TrainState s = init_state(d, 20);
    const TensorMap t0 = s.model.masking.tensors;
    mlo_train(s, bundle, frozen, [](const MetricsRow&) {});
    CHECK(same(s.model.masking.tensors, t0));
    CHECK(!same(s.model.encoder.tensors, init_state(d, 20).model.encoder.tensors));

    MloConfig rare = cfg;
    rare.t_update_every = 1000000;  // step 0 is still on the cadence
    TrainState r = init_state(d, 20);
    std::vector<TensorMap> seen;
    mlo_train(r, bundle, rare, [&](const MetricsRow&) { seen.push_back(r.model.masking.tensors); });
    for (std::size_t i = 1; i < seen.size(); ++i) CHECK(same(seen[i], seen[0]));
  }

  {
    std::vector<MetricsRow> a, b;
    TrainState s1 = init_state(d, 21), s2 = init_state(d, 21);
    mlo_train(s1, bundle, cfg, [&](const MetricsRow& r) { a.push_back(r); });
    mlo_train(s2, bundle, cfg, [&](const MetricsRow& r) { b.push_back(r); });
    const Schedule sched = make_schedule(bundle, cfg);
    CHECK(sched.steps_per_epoch == 2);  // 16 unlabeled images, batch 8
    REQUIRE(static_cast<long>(a.size()) == sched.total_steps);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].step == static_cast<long>(i) + 1);
      CHECK(a[i].recon_loss == b[i].recon_loss);
      CHECK(a[i].val_cls_loss == b[i].val_cls_loss);
      CHECK(a[i].val_accuracy == b[i].val_accuracy);
      CHECK(a[i].lr_E == doctest::Approx(scheduled_lr(cfg.lr_E, static_cast<long>(i), sched, cfg)));
    }
    CHECK(same(s1.model.masking.tensors, s2.model.masking.tensors));
    CHECK(a.front().lr_E == cfg.lr_E);
  }

  {
    // Stopping early and continuing matches one uninterrupted run.
    TrainState whole = init_state(d, 22), parts = init_state(d, 22);
    mlo_train(whole, bundle, cfg, [](const MetricsRow&) {});
    mlo_train(parts, bundle, cfg, [](const MetricsRow&) {}, 1);
    CHECK(parts.step == 1);
    mlo_train(parts, bundle, cfg, [](const MetricsRow&) {});
    CHECK(same(whole.model.masking.tensors, parts.model.masking.tensors));
    CHECK(same(whole.model.encoder.tensors, parts.model.encoder.tensors));
  }
}
