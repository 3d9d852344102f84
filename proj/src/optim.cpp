#include "mlomae/optim.hpp"

namespace mlomae {

void adamw_update(TensorMap& params, const GradMap& grads, OptState& state, double lr,
                  const AdamWParams<double>& hp) {
  ++state.step;
  for (auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) continue;
    adamw_step(p, g->second, state.moments[name], state.step, lr, hp);
  }
}

void sgd_update(TensorMap& params, const GradMap& grads, double lr) {
  for (auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) continue;
    if (g->second.rows() != p.rows() || g->second.cols() != p.cols())
      throw DimensionError("sgd_update: grad shape does not match " + name);
    p -= lr * g->second;
  }
}

}  // namespace mlomae
