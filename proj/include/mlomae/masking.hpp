#pragma once

#include <variant>
#include <vector>

#include "mlomae/autodiff.hpp"
#include "mlomae/types.hpp"

namespace mlomae {

// Hard top-k selection. Both index lists are ascending.
struct MaskSelection {
  Eigen::RowVectorXd probs;
  IndexList masked_idx;
  IndexList visible_idx;
  double ratio_used = 0.0;
};

// Number of visible patches for N patches at ratio r: floor(N·(1−r)).
Index visible_count(Index n, double r);

// Ranks patches by probability (descending, ties to the lower index) and
// masks the first N − floor(N·(1−r)). Carries no gradient: the probabilities
// reach the loss only through the weights in weighted_recon_loss.
MaskSelection select_mask(const Eigen::Ref<const Eigen::RowVectorXd>& probs, double r);

struct ReconLossParts {
  ad::Var total;
  Eigen::VectorXd per_patch_loss;
  Eigen::VectorXd weights;
};

// total = (1/|M|) Σ_j σ_j · mean_pixels((pred_j − target_j)²), with σ taken
// live from `probs` ([1×N]) at the masked positions.
ReconLossParts weighted_recon_loss(const MaskSelection& sel, ad::Var probs, ad::Var predicted,
                                   const Matrix& target);
// Batch form: probs [B×N], predicted and target [B·m × patch_pixels] stacked
// per image in masked_idx order. total is the mean of the per-image losses.
ReconLossParts weighted_recon_loss(const std::vector<MaskSelection>& sels, ad::Var probs, ad::Var predicted,
                                   const Matrix& target);

struct FixedRatio {
  double r = 0.75;
};
struct LinearRatio {
  double start = 0.5;
  double end = 0.9;
  long total_steps = 100;
};
using RatioSchedule = std::variant<FixedRatio, LinearRatio>;

double mask_ratio_at(long step, const RatioSchedule& schedule);
void validate(const RatioSchedule& schedule);

}  // namespace mlomae
