#include "mlomae/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mlomae {

namespace {

constexpr double kLayerNormEps = 1e-5;

const ad::Var& get(const ParamVars& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::out_of_range("missing parameter " + name);
  return it->second;
}

ad::Var linear(ad::Var x, const ParamVars& p, const std::string& w, const std::string& b) {
  return ad::add_row(ad::matmul(x, get(p, w)), get(p, b));
}

std::string blk(Index i) { return "blk" + std::to_string(i) + "."; }

void add_block_params(TensorMap& t, Index width, Index blocks, Index mlp_ratio, Rng& rng) {
  const Index hidden = width * mlp_ratio;
  for (Index i = 0; i < blocks; ++i) {
    const std::string p = blk(i);
    t[p + "ln1_g"] = Matrix::Ones(1, width);
    t[p + "ln1_b"] = Matrix::Zero(1, width);
    t[p + "wq"] = xavier_uniform(width, width, rng);
    t[p + "bq"] = Matrix::Zero(1, width);
    t[p + "wk"] = xavier_uniform(width, width, rng);
    t[p + "bk"] = Matrix::Zero(1, width);
    t[p + "wv"] = xavier_uniform(width, width, rng);
    t[p + "bv"] = Matrix::Zero(1, width);
    t[p + "wo"] = xavier_uniform(width, width, rng);
    t[p + "bo"] = Matrix::Zero(1, width);
    t[p + "ln2_g"] = Matrix::Ones(1, width);
    t[p + "ln2_b"] = Matrix::Zero(1, width);
    t[p + "mlp_w1"] = xavier_uniform(width, hidden, rng);
    t[p + "mlp_b1"] = Matrix::Zero(1, hidden);
    t[p + "mlp_w2"] = xavier_uniform(hidden, width, rng);
    t[p + "mlp_b2"] = Matrix::Zero(1, width);
  }
}

ad::Var attention(ad::Var x, const ParamVars& p, const std::string& pre, Index heads, Index group) {
  ad::Var q = linear(x, p, pre + "wq", pre + "bq");
  ad::Var k = linear(x, p, pre + "wk", pre + "bk");
  ad::Var v = linear(x, p, pre + "wv", pre + "bv");
  return linear(ad::grouped_attention(q, k, v, group, heads), p, pre + "wo", pre + "bo");
}

// Pre-LN block: x + attn(ln(x)), then x + mlp(ln(x)). Rows of x are stacked
// per image in groups of `group` tokens.
ad::Var transformer_block(ad::Var x, const ParamVars& p, Index i, Index heads, Index group) {
  const std::string pre = blk(i);
  ad::Var h = ad::layer_norm(x, get(p, pre + "ln1_g"), get(p, pre + "ln1_b"), kLayerNormEps);
  x = ad::add(x, attention(h, p, pre, heads, group));
  h = ad::layer_norm(x, get(p, pre + "ln2_g"), get(p, pre + "ln2_b"), kLayerNormEps);
  h = ad::relu(linear(h, p, pre + "mlp_w1", pre + "mlp_b1"));
  return ad::add(x, linear(h, p, pre + "mlp_w2", pre + "mlp_b2"));
}

Index common_size(const std::vector<IndexList>& lists, const char* what) {
  if (lists.empty()) throw std::invalid_argument(std::string(what) + ": empty batch");
  const std::size_t n = lists.front().size();
  for (const auto& l : lists)
    if (l.size() != n) throw DimensionError(std::string(what) + ": every image needs the same count");
  return static_cast<Index>(n);
}

}  // namespace

void ModelDims::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model dims: " + m); };
  if (image_side < 1 || channels < 1 || patch_size < 1) fail("sizes must be positive");
  if (image_side % patch_size != 0) fail("image_side must be divisible by patch_size");
  if (num_patches() < 2) fail("need at least 2 patches");
  if (emb_dim < 1 || dec_dim < 1 || heads < 1) fail("widths must be positive");
  if (emb_dim % heads != 0 || dec_dim % heads != 0) fail("emb_dim and dec_dim must divide by heads");
  if (enc_blocks < 0 || dec_blocks < 0) fail("block counts must be non-negative");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (mask_hidden < 1 || mlp_ratio < 1) fail("mask_hidden and mlp_ratio must be positive");
}

std::string role_name(Role r) {
  switch (r) {
    case Role::Encoder: return "E";
    case Role::Decoder: return "D";
    case Role::Head: return "C";
    case Role::Masking: return "T";
  }
  return "?";
}

Matrix xavier_uniform(Index fan_in, Index fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(fan_in, fan_out);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

ParamSet init_encoder(const ModelDims& dims, Rng& rng) {
  ParamSet ps{Role::Encoder, {}};
  auto& t = ps.tensors;
  t["patch_w"] = xavier_uniform(dims.patch_pixels(), dims.emb_dim, rng);
  t["patch_b"] = Matrix::Zero(1, dims.emb_dim);
  t["pos"] = Matrix::Zero(dims.num_patches(), dims.emb_dim);
  add_block_params(t, dims.emb_dim, dims.enc_blocks, dims.mlp_ratio, rng);
  t["norm_g"] = Matrix::Ones(1, dims.emb_dim);
  t["norm_b"] = Matrix::Zero(1, dims.emb_dim);
  return ps;
}

ParamSet init_decoder(const ModelDims& dims, Rng& rng) {
  ParamSet ps{Role::Decoder, {}};
  auto& t = ps.tensors;
  t["embed_w"] = xavier_uniform(dims.emb_dim, dims.dec_dim, rng);
  t["embed_b"] = Matrix::Zero(1, dims.dec_dim);
  t["mask_token"] = xavier_uniform(1, dims.dec_dim, rng);
  t["pos"] = Matrix::Zero(dims.num_patches(), dims.dec_dim);
  add_block_params(t, dims.dec_dim, dims.dec_blocks, dims.mlp_ratio, rng);
  t["norm_g"] = Matrix::Ones(1, dims.dec_dim);
  t["norm_b"] = Matrix::Zero(1, dims.dec_dim);
  t["pred_w"] = xavier_uniform(dims.dec_dim, dims.patch_pixels(), rng);
  t["pred_b"] = Matrix::Zero(1, dims.patch_pixels());
  return ps;
}

ParamSet init_head(const ModelDims& dims, Rng& rng) {
  ParamSet ps{Role::Head, {}};
  ps.tensors["w"] = xavier_uniform(dims.emb_dim, dims.num_classes, rng);
  ps.tensors["b"] = Matrix::Zero(1, dims.num_classes);
  return ps;
}

ParamSet init_masking(const ModelDims& dims, Rng& rng) {
  ParamSet ps{Role::Masking, {}};
  auto& t = ps.tensors;
  const Index n = dims.num_patches();
  t["patch_w"] = xavier_uniform(dims.patch_pixels(), dims.emb_dim, rng);
  t["patch_b"] = Matrix::Zero(1, dims.emb_dim);
  t["fc1_w"] = xavier_uniform(n * dims.emb_dim, dims.mask_hidden, rng);
  t["fc1_b"] = Matrix::Zero(1, dims.mask_hidden);
  t["fc2_w"] = xavier_uniform(dims.mask_hidden, n, rng);
  t["fc2_b"] = Matrix::Zero(1, n);
  return ps;
}

Model init_model(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  Rng rng(seed);
  Model m;
  m.dims = dims;
  m.encoder = init_encoder(dims, rng);
  m.decoder = init_decoder(dims, rng);
  m.head = init_head(dims, rng);
  m.masking = init_masking(dims, rng);
  return m;
}

Matrix patchify(const Matrix& image, const ModelDims& dims) {
  const Index side = dims.image_side, p = dims.patch_size, g = dims.grid_side();
  if (image.rows() != dims.channels || image.cols() != side * side)
    throw DimensionError("patchify: image " + shape_str(image) + " does not match [" +
                         std::to_string(dims.channels) + "x" + std::to_string(side * side) + "]");
  Matrix grid(dims.num_patches(), dims.patch_pixels());
  for (Index gr = 0; gr < g; ++gr)
    for (Index gc = 0; gc < g; ++gc) {
      const Index row = gr * g + gc;
      Index col = 0;
      for (Index c = 0; c < dims.channels; ++c)
        for (Index y = 0; y < p; ++y)
          for (Index x = 0; x < p; ++x)
            grid(row, col++) = image(c, (gr * p + y) * side + gc * p + x);
    }
  return grid;
}

Matrix unpatchify(const Matrix& grid, const ModelDims& dims) {
  const Index side = dims.image_side, p = dims.patch_size, g = dims.grid_side();
  if (grid.rows() != dims.num_patches() || grid.cols() != dims.patch_pixels())
    throw DimensionError("unpatchify: grid " + shape_str(grid) + " does not match dims");
  Matrix image(dims.channels, side * side);
  for (Index gr = 0; gr < g; ++gr)
    for (Index gc = 0; gc < g; ++gc) {
      const Index row = gr * g + gc;
      Index col = 0;
      for (Index c = 0; c < dims.channels; ++c)
        for (Index y = 0; y < p; ++y)
          for (Index x = 0; x < p; ++x)
            image(c, (gr * p + y) * side + gc * p + x) = grid(row, col++);
    }
  return image;
}

ad::Var masking_net_forward(const ModelDims& dims, const ParamVars& T, ad::Var grids) {
  const Index n = dims.num_patches();
  if (grids.rows() < n || grids.rows() % n != 0 || grids.cols() != dims.patch_pixels())
    throw DimensionError("masking_net_forward: grids " + shape_str(grids.value()));
  const Index batch = grids.rows() / n;
  ad::Var emb = linear(grids, T, "patch_w", "patch_b");
  // Row-major storage makes this one flattened embedding per image.
  ad::Var flat = ad::reshape(emb, batch, n * dims.emb_dim);
  ad::Var h = ad::relu(linear(flat, T, "fc1_w", "fc1_b"));
  // Saturated logits would round to exactly 0 or 1; keep probabilities open.
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  return ad::clamp(ad::sigmoid(linear(h, T, "fc2_w", "fc2_b")), lo, hi);
}

ad::Var encoder_forward(const ModelDims& dims, const ParamVars& E, ad::Var visible_patches,
                        const std::vector<IndexList>& visible) {
  const Index k = common_size(visible, "encoder_forward");
  if (k == 0) throw std::invalid_argument("encoder_forward: empty visible set");
  IndexList pos_rows;
  pos_rows.reserve(visible.size() * static_cast<std::size_t>(k));
  for (const auto& v : visible) {
    if (!std::is_sorted(v.begin(), v.end()))
      throw std::invalid_argument("encoder_forward: visible_idx must be ascending");
    for (Index i : v) {
      if (i < 0 || i >= dims.num_patches()) throw std::invalid_argument("encoder_forward: index out of range");
      pos_rows.push_back(i);
    }
  }
  if (visible_patches.rows() != static_cast<Index>(pos_rows.size()))
    throw DimensionError("encoder_forward: patch rows do not match visible_idx");
  ad::Var x = linear(visible_patches, E, "patch_w", "patch_b");
  x = ad::add(x, ad::gather_rows(get(E, "pos"), pos_rows));
  for (Index i = 0; i < dims.enc_blocks; ++i) x = transformer_block(x, E, i, dims.heads, k);
  return ad::layer_norm(x, get(E, "norm_g"), get(E, "norm_b"), kLayerNormEps);
}

ad::Var encoder_forward(const ModelDims& dims, const ParamVars& E, ad::Var visible_patches,
                        const IndexList& visible_idx) {
  return encoder_forward(dims, E, visible_patches, std::vector<IndexList>{visible_idx});
}

ad::Var decoder_forward(const ModelDims& dims, const ParamVars& D, ad::Var enc_tokens,
                        const std::vector<IndexList>& visible, const std::vector<IndexList>& masked) {
  const Index n = dims.num_patches();
  const Index k = common_size(visible, "decoder_forward");
  const Index m = common_size(masked, "decoder_forward");
  const auto batch = static_cast<Index>(visible.size());
  if (static_cast<Index>(masked.size()) != batch) throw DimensionError("decoder_forward: batch size mismatch");
  if (m == 0) throw std::invalid_argument("decoder_forward: empty masked set");
  if (enc_tokens.rows() != batch * k) throw DimensionError("decoder_forward: token rows do not match visible_idx");

  ad::Var proj = linear(enc_tokens, D, "embed_w", "embed_b");
  // Row batch·k of the stacked source is the mask token.
  ad::Var source = ad::concat_rows({proj, get(D, "mask_token")});
  IndexList order(static_cast<std::size_t>(batch * n), batch * k);
  IndexList pos_rows(static_cast<std::size_t>(batch * n));
  IndexList out_rows;
  out_rows.reserve(static_cast<std::size_t>(batch * m));
  std::vector<int> seen(static_cast<std::size_t>(n));
  for (Index b = 0; b < batch; ++b) {
    const auto& vis = visible[static_cast<std::size_t>(b)];
    const auto& msk = masked[static_cast<std::size_t>(b)];
    std::fill(seen.begin(), seen.end(), 0);
    for (Index i : vis) {
      if (i < 0 || i >= n) throw std::invalid_argument("decoder_forward: index out of range");
      ++seen[static_cast<std::size_t>(i)];
    }
    for (Index i : msk) {
      if (i < 0 || i >= n) throw std::invalid_argument("decoder_forward: index out of range");
      ++seen[static_cast<std::size_t>(i)];
    }
    if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; }))
      throw std::invalid_argument("decoder_forward: visible and masked sets must partition 0..N-1");
    for (std::size_t j = 0; j < vis.size(); ++j)
      order[static_cast<std::size_t>(b * n + vis[j])] = b * k + static_cast<Index>(j);
    for (Index j = 0; j < n; ++j) pos_rows[static_cast<std::size_t>(b * n + j)] = j;
    for (Index i : msk) out_rows.push_back(b * n + i);
  }
  ad::Var x = ad::add(ad::gather_rows(source, order), ad::gather_rows(get(D, "pos"), pos_rows));
  for (Index i = 0; i < dims.dec_blocks; ++i) x = transformer_block(x, D, i, dims.heads, n);
  x = ad::layer_norm(x, get(D, "norm_g"), get(D, "norm_b"), kLayerNormEps);
  return linear(ad::gather_rows(x, out_rows), D, "pred_w", "pred_b");
}

ad::Var decoder_forward(const ModelDims& dims, const ParamVars& D, ad::Var enc_tokens,
                        const IndexList& visible_idx, const IndexList& masked_idx) {
  return decoder_forward(dims, D, enc_tokens, std::vector<IndexList>{visible_idx},
                         std::vector<IndexList>{masked_idx});
}

ad::Var head_forward(const ModelDims&, const ParamVars& C, ad::Var tokens, Index tokens_per_image) {
  if (tokens.rows() < 1) throw std::invalid_argument("head_forward: no tokens");
  return linear(ad::group_mean(tokens, tokens_per_image), C, "w", "b");
}

ad::Var head_forward(const ModelDims& dims, const ParamVars& C, ad::Var tokens) {
  return head_forward(dims, C, tokens, tokens.rows());
}

Matrix stack_rows(const std::vector<Matrix>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_rows: no parts");
  Index rows = 0;
  for (const Matrix& p : parts) {
    if (p.cols() != parts.front().cols()) throw DimensionError("stack_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, parts.front().cols());
  Index r = 0;
  for (const Matrix& p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
}

namespace {

ParamVars constants(ad::Tape& tape, const ParamSet& ps) {
  ParamVars p;
  for (const auto& [k, v] : ps.tensors) p.emplace(k, tape.constant(v));
  return p;
}

}  // namespace

Matrix masking_probs(const ModelDims& dims, const ParamSet& T, const Matrix& grid) {
  return masking_probs(dims, T, std::vector<Matrix>{grid});
}

Matrix masking_probs(const ModelDims& dims, const ParamSet& T, const std::vector<Matrix>& grids) {
  ad::Tape tape;
  return masking_net_forward(dims, constants(tape, T), tape.constant(stack_rows(grids))).value();
}

Matrix pooled_features(const ModelDims& dims, const ParamSet& E, const Matrix& grid) {
  return pooled_features(dims, E, std::vector<Matrix>{grid});
}

Matrix pooled_features(const ModelDims& dims, const ParamSet& E, const std::vector<Matrix>& grids) {
  ad::Tape tape;
  const IndexList all = all_indices(dims.num_patches());
  const std::vector<IndexList> vis(grids.size(), all);
  ad::Var tokens = encoder_forward(dims, constants(tape, E), tape.constant(stack_rows(grids)), vis);
  return ad::group_mean(tokens, dims.num_patches()).value();
}

IndexList all_indices(Index n) {
  IndexList idx(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  return idx;
}

}  // namespace mlomae
