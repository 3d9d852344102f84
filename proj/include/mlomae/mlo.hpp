#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "mlomae/data.hpp"
#include "mlomae/masking.hpp"
#include "mlomae/nn.hpp"
#include "mlomae/optim.hpp"

namespace mlomae {

enum class Mode { MLO, BLO };

struct MloConfig {
  double lr_E = 1e-4;
  double lr_C = 4e-5;
  double lr_T = 4e-5;
  long unroll_E = 2;
  long unroll_C = 2;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  RatioSchedule ratio_schedule = FixedRatio{0.75};
  double fda_eps_scale = 0.01;
  long t_update_every = 1;
  Mode mode = Mode::MLO;
  double gamma = 1.0;
  long total_epochs = 200;
  Index batch_size = 256;
  std::uint64_t seed = 0;

  // Cosine annealing of all three learning rates down to min_lr_scale·base.
  bool cosine_schedule = true;
  double min_lr_scale = 0.0;
  // Plain SGD inner steps without decay, matching the one-step derivation.
  bool oracle_mode = false;
  // Keeps T at its initialization (fixed-masking control runs).
  bool freeze_masking = false;
  Augmentation augmentation;
  // Test hook: negates the C-path pullback.
  bool flip_c_path_sign = false;

  void validate() const;
  AdamWParams<double> adamw() const { return {beta1, beta2, weight_decay, 1e-8}; }
};

struct TrainState {
  Model model;
  OptState opt_E, opt_D, opt_C, opt_T;
  long step = 0;  // completed outer steps
};

TrainState init_state(const ModelDims& dims, std::uint64_t seed);

struct LabeledBatch {
  std::vector<Matrix> grids;
  IndexList labels;
};

// --- loss evaluations ----------------------------------------------------

struct Wrt {
  bool encoder = false;
  bool decoder = false;
  bool head = false;
  bool masking = false;
};

struct LossEval {
  double loss = 0.0;
  double accuracy = 0.0;
  GradMap grad_E, grad_D, grad_C, grad_T;
};

std::vector<MaskSelection> select_masks(const ModelDims& dims, const TensorMap& T,
                                        const std::vector<Matrix>& grids, double r);

// Batch mean of the σ-weighted reconstruction loss under fixed selections.
LossEval recon_eval(const ModelDims& dims, const TensorMap& E, const TensorMap& D, const TensorMap& T,
                    const std::vector<Matrix>& grids, const std::vector<MaskSelection>& sels, Wrt wrt);

// Batch mean cross-entropy of head(encoder(all patches)).
LossEval cls_eval(const ModelDims& dims, const TensorMap& E, const TensorMap& C, const LabeledBatch& batch,
                  Wrt wrt);

// --- hypergradients ------------------------------------------------------

using GradFn = std::function<GradMap(const TensorMap&)>;

// Central-difference Jacobian-vector product of a gradient map:
// [f(base + ε·v) − f(base − ε·v)] / (2ε), ε = eps_scale / ‖v‖₂.
// A zero direction returns zeros shaped like f's output at base.
GradMap fda_jvp(const GradFn& grad_fn, const TensorMap& base, const TensorMap& direction,
                double eps_scale, double* eps_used = nullptr);

struct HypergradReport {
  GradMap grad_T;
  GradMap direct_term;
  GradMap e_path_term;
  GradMap c_path_term;
  double fda_eps_used = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  bool applied = false;
};

// One-step-unrolled chain rule for three levels. The inner level moved
// E by −inner_lr·∇_E L_in(E, T); the head level moved C by
// −head_lr·∇_C L_head(E′, C). Given the outer cotangents v_E and w_C:
//   u      = −head_lr · J(C ↦ ∇_E L_head)·w_C
//   e_path = −inner_lr · J(E ↦ ∇_T L_in)·v_E
//   c_path = −inner_lr · J(E ↦ ∇_T L_in)·u
struct ChainRuleInputs {
  GradFn inner_cross;  // E ↦ ∇_T L_in(E)
  TensorMap inner_base;
  double inner_lr = 0.0;
  GradMap v_E;
  GradFn head_cross;  // C ↦ ∇_E L_head(E′, C); empty when there is no head level
  TensorMap head_base;
  double head_lr = 0.0;
  GradMap w_C;
  TensorMap masking_like;
  double eps_scale = 0.01;
  bool flip_c_path_sign = false;
};

HypergradReport chain_rule_hypergrad(const ChainRuleInputs& in);

// --- stages --------------------------------------------------------------

// What Stage III needs to re-evaluate the last inner step.
struct Stage1Context {
  std::vector<Matrix> grids;
  std::vector<MaskSelection> selections;
  TensorMap encoder_base;  // E before the last inner step
  TensorMap decoder_base;
  double lr = 0.0;         // lr applied in the last inner step
  double loss = 0.0;       // loss at the last inner step, before its update
};

struct Stage2Context {
  LabeledBatch batch;
  TensorMap encoder_used;  // E′ the head was trained against
  TensorMap head_base;     // C before the last inner step
  double lr = 0.0;
  double loss = 0.0;
};

Stage1Context stage1_update(TrainState& s, const std::vector<Matrix>& grids, const MloConfig& cfg, double r,
                            double lr_E);
Stage2Context stage2_update(TrainState& s, const LabeledBatch& batch, const MloConfig& cfg, double lr_C);
// Computes the T hypergradient; applies an AdamW step to T when
// outer_step % t_update_every == 0 and masking is not frozen.
HypergradReport stage3_hypergrad(TrainState& s, const LabeledBatch& val, const Stage1Context& ctx1,
                                 const Stage2Context& ctx2, const MloConfig& cfg, double lr_T, long outer_step);

struct BloStepResult {
  double recon_loss = 0.0;
  double cls_loss = 0.0;
  HypergradReport hyper;
};

// Joint lower-level update of (E, D, C) on L_cls + γ·L_rec, then the T update.
BloStepResult blo_step(TrainState& s, const std::vector<Matrix>& unlabeled, const LabeledBatch& train,
                       const LabeledBatch& val, const MloConfig& cfg, double r, double lr_E, double lr_C,
                       double lr_T, long outer_step);

// --- training loop -------------------------------------------------------

struct MetricsRow {
  long step = 0;
  long epoch = 0;
  double recon_loss = 0.0;
  double train_cls_loss = 0.0;
  double val_cls_loss = 0.0;
  double val_accuracy = 0.0;
  double mask_ratio = 0.0;
  double lr_E = 0.0;
  double lr_C = 0.0;
  double lr_T = 0.0;
  double wallclock_ms = 0.0;
};

using MetricsSink = std::function<void(const MetricsRow&)>;

struct Schedule {
  long steps_per_epoch = 0;
  long total_steps = 0;
};

Schedule make_schedule(const DatasetBundle& bundle, const MloConfig& cfg);

// Learning rate actually applied at `step`.
double scheduled_lr(double base, long step, const Schedule& sched, const MloConfig& cfg);

// Pre-patchified views of a bundle.
struct PreparedData {
  std::vector<Matrix> unlabeled;
  LabeledBatch train;
  LabeledBatch val;
};

PreparedData prepare(const DatasetBundle& bundle, const ModelDims& dims);

// Runs outer steps from s.step until the schedule ends, or until
// s.step == stop_at when given. Throws NumericError on non-finite losses.
void mlo_train(TrainState& s, const DatasetBundle& bundle, const MloConfig& cfg, const MetricsSink& sink,
               std::optional<long> stop_at = std::nullopt);

// Full-split evaluation.
LossEval evaluate(const ModelDims& dims, const TensorMap& E, const TensorMap& C, const LabeledBatch& data);

}  // namespace mlomae
