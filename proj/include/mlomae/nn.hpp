#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mlomae/autodiff.hpp"
#include "mlomae/types.hpp"

namespace mlomae {

struct ModelDims {
  Index image_side = 16;
  Index channels = 1;
  Index patch_size = 4;
  Index emb_dim = 32;
  Index dec_dim = 16;
  Index enc_blocks = 2;
  Index dec_blocks = 1;
  Index heads = 2;
  Index num_classes = 4;
  Index mask_hidden = 64;
  Index mlp_ratio = 2;

  Index grid_side() const { return image_side / patch_size; }
  Index num_patches() const { return grid_side() * grid_side(); }
  Index patch_pixels() const { return patch_size * patch_size * channels; }
  Index image_pixels() const { return image_side * image_side; }

  // Throws ConfigError naming the first violated constraint.
  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

enum class Role { Encoder, Decoder, Head, Masking };

std::string role_name(Role r);

struct ParamSet {
  Role role = Role::Encoder;
  TensorMap tensors;

  const Matrix& at(const std::string& name) const { return tensors.at(name); }
};

// E, D, C and T for one run.
struct Model {
  ModelDims dims;
  ParamSet encoder{Role::Encoder, {}};
  ParamSet decoder{Role::Decoder, {}};
  ParamSet head{Role::Head, {}};
  ParamSet masking{Role::Masking, {}};
};

using Rng = std::mt19937_64;

// Uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out)); rows are fan_in.
Matrix xavier_uniform(Index fan_in, Index fan_out, Rng& rng);

ParamSet init_encoder(const ModelDims& dims, Rng& rng);
ParamSet init_decoder(const ModelDims& dims, Rng& rng);
ParamSet init_head(const ModelDims& dims, Rng& rng);
ParamSet init_masking(const ModelDims& dims, Rng& rng);
Model init_model(const ModelDims& dims, std::uint64_t seed);

// Images are [channels × side²] with row-major pixels per channel.
// Patches are [N × patch_pixels], patch rows in row-major grid order, each row
// channel-major then row-major within the patch.
Matrix patchify(const Matrix& image, const ModelDims& dims);
Matrix unpatchify(const Matrix& grid, const ModelDims& dims);

using ParamVars = std::map<std::string, ad::Var>;

// Batched forwards stack B images row-wise: image b owns a contiguous block
// of rows. Every image in a batch has the same visible and masked counts.

// Probabilities [B×N] for grids stacked as [B·N × patch_pixels].
ad::Var masking_net_forward(const ModelDims& dims, const ParamVars& T, ad::Var grids);
// Tokens [B·k × emb_dim] for k visible patches per image. Each visible list
// must be ascending.
ad::Var encoder_forward(const ModelDims& dims, const ParamVars& E, ad::Var visible_patches,
                        const std::vector<IndexList>& visible);
ad::Var encoder_forward(const ModelDims& dims, const ParamVars& E, ad::Var visible_patches,
                        const IndexList& visible_idx);
// Predicted pixels [B·m × patch_pixels], image-major, rows in masked order.
ad::Var decoder_forward(const ModelDims& dims, const ParamVars& D, ad::Var enc_tokens,
                        const std::vector<IndexList>& visible, const std::vector<IndexList>& masked);
ad::Var decoder_forward(const ModelDims& dims, const ParamVars& D, ad::Var enc_tokens,
                        const IndexList& visible_idx, const IndexList& masked_idx);
// Logits [B × num_classes] from tokens mean-pooled per image.
ad::Var head_forward(const ModelDims& dims, const ParamVars& C, ad::Var tokens, Index tokens_per_image);
ad::Var head_forward(const ModelDims& dims, const ParamVars& C, ad::Var tokens);

Matrix stack_rows(const std::vector<Matrix>& parts);

// Value-only conveniences.
Matrix masking_probs(const ModelDims& dims, const ParamSet& T, const Matrix& grid);
Matrix masking_probs(const ModelDims& dims, const ParamSet& T, const std::vector<Matrix>& grids);
// Mean-pooled encoder features [B×emb_dim] with every patch visible.
Matrix pooled_features(const ModelDims& dims, const ParamSet& E, const Matrix& grid);
Matrix pooled_features(const ModelDims& dims, const ParamSet& E, const std::vector<Matrix>& grids);
IndexList all_indices(Index n);

}  // namespace mlomae
