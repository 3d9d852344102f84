#pragma once

#include <random>
#include <string>

#include "mlomae/autodiff.hpp"
#include "mlomae/nn.hpp"

namespace testutil {

inline mlomae::Matrix random_matrix(mlomae::Index r, mlomae::Index c, std::uint64_t seed, double lo = -1.0,
                                    double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  mlomae::Matrix m(r, c);
  for (mlomae::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Registers every tensor on the tape, as parameters or constants.
inline mlomae::ParamVars bind_tensors(mlomae::ad::Tape& tape, const mlomae::TensorMap& tensors, bool track,
                              const std::string& prefix = "") {
  mlomae::ParamVars out;
  for (const auto& [name, value] : tensors)
    out.emplace(name, track ? tape.param(prefix + name, value) : tape.constant(value));
  return out;
}

// Same as bind, but only `only` is a parameter and it takes `value`.
inline mlomae::ParamVars bind_one(mlomae::ad::Tape& tape, const mlomae::TensorMap& tensors, const std::string& only,
                                  mlomae::ad::Var value) {
  mlomae::ParamVars out;
  for (const auto& [name, v] : tensors) out.emplace(name, name == only ? value : tape.constant(v));
  return out;
}

inline mlomae::ModelDims tiny_dims() {
  mlomae::ModelDims d;
  d.image_side = 4;
  d.patch_size = 2;
  d.emb_dim = 4;
  d.dec_dim = 4;
  d.enc_blocks = 1;
  d.dec_blocks = 1;
  d.heads = 2;
  d.num_classes = 3;
  d.mask_hidden = 6;
  return d;
}

}  // namespace testutil
