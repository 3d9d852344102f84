#include "mlomae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mlomae {

Index visible_count(Index n, double r) {
  // The slack absorbs representation error such as 10·(1−0.9) = 0.99999….
  return static_cast<Index>(std::floor(static_cast<double>(n) * (1.0 - r) + 1e-9));
}

MaskSelection select_mask(const Eigen::Ref<const Eigen::RowVectorXd>& probs, double r) {
  const Index n = probs.size();
  if (!(r > 0.0 && r < 1.0)) throw ConfigError("mask ratio must lie in (0, 1), got " + std::to_string(r));
  const Index keep = visible_count(n, r);
  if (keep < 1 || n - keep < 1)
    throw ConfigError("mask ratio " + std::to_string(r) + " leaves no visible or no masked patch for N=" +
                      std::to_string(n));

  IndexList order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return probs(a) > probs(b); });

  MaskSelection sel;
  sel.probs = probs;
  sel.ratio_used = r;
  const auto split = order.begin() + (n - keep);
  sel.masked_idx.assign(order.begin(), split);
  sel.visible_idx.assign(split, order.end());
  std::sort(sel.masked_idx.begin(), sel.masked_idx.end());
  std::sort(sel.visible_idx.begin(), sel.visible_idx.end());
  return sel;
}

ReconLossParts weighted_recon_loss(const std::vector<MaskSelection>& sels, ad::Var probs, ad::Var predicted,
                                   const Matrix& target) {
  if (sels.empty()) throw std::invalid_argument("weighted_recon_loss: empty batch");
  const auto batch = static_cast<Index>(sels.size());
  const Index n = probs.cols();
  const auto m = static_cast<Index>(sels.front().masked_idx.size());
  if (m == 0) throw std::invalid_argument("weighted_recon_loss: no masked patches");
  IndexList rows;
  rows.reserve(static_cast<std::size_t>(batch * m));
  for (Index b = 0; b < batch; ++b) {
    const MaskSelection& sel = sels[static_cast<std::size_t>(b)];
    if (static_cast<Index>(sel.masked_idx.size()) != m)
      throw DimensionError("weighted_recon_loss: every image needs the same masked count");
    if (sel.probs.size() != n) throw DimensionError("weighted_recon_loss: probability vector length mismatch");
    for (Index j : sel.masked_idx) rows.push_back(b * n + j);
  }
  if (probs.rows() != batch || predicted.rows() != batch * m || target.rows() != batch * m ||
      predicted.cols() != target.cols())
    throw DimensionError("weighted_recon_loss: predicted " + shape_str(predicted.value()) + ", target " +
                         shape_str(target) + ", probs " + shape_str(probs.value()) + ", masked " +
                         std::to_string(m) + " per image");

  ad::Tape& tape = *predicted.tape;
  ad::Var diff = ad::sub(predicted, tape.constant(target));
  ad::Var per_patch = ad::mean(ad::mul(diff, diff), 1);
  ad::Var column = ad::reshape(probs, batch * n, 1);
  ad::Var weights = ad::gather_rows(column, rows);

  ReconLossParts parts;
  // Equal masked counts make the mean over all rows the mean of per-image means.
  parts.total = ad::mean(ad::mul(weights, per_patch));
  parts.per_patch_loss = per_patch.value().col(0);
  parts.weights = weights.value().col(0);
  return parts;
}

ReconLossParts weighted_recon_loss(const MaskSelection& sel, ad::Var probs, ad::Var predicted,
                                   const Matrix& target) {
  if (probs.value().size() != sel.probs.size())
    throw DimensionError("weighted_recon_loss: probability vector length mismatch");
  return weighted_recon_loss(std::vector<MaskSelection>{sel}, ad::reshape(probs, 1, probs.value().size()),
                             predicted, target);
}

double mask_ratio_at(long step, const RatioSchedule& schedule) {
  validate(schedule);
  if (const auto* f = std::get_if<FixedRatio>(&schedule)) return f->r;
  const auto& l = std::get<LinearRatio>(schedule);
  const double frac = static_cast<double>(std::clamp(step, 0L, l.total_steps)) /
                      static_cast<double>(l.total_steps);
  return l.start + (l.end - l.start) * frac;
}

void validate(const RatioSchedule& schedule) {
  auto in_range = [](double r) { return r > 0.0 && r < 1.0; };
  if (const auto* f = std::get_if<FixedRatio>(&schedule)) {
    if (!in_range(f->r)) throw ConfigError("mask ratio must lie in (0, 1)");
    return;
  }
  const auto& l = std::get<LinearRatio>(schedule);
  if (!in_range(l.start) || !in_range(l.end)) throw ConfigError("mask ratio must lie in (0, 1)");
  if (l.total_steps < 1) throw ConfigError("linear ratio schedule needs total_steps >= 1");
}

}  // namespace mlomae
