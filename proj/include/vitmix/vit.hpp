#pragma once

// A small pre-norm Vision Transformer with a recorded forward pass and a
// hand-derived reverse pass.
//
// Layout: image [S x S x 3] (HWC) -> g*g patches of P*P*3 values ->
// linear patch embedding, CLS token prepended, learned position embedding ->
// `depth` blocks of
//     h  = LN1(x);  x' = x + MHSA(h) Wo + bo
//     h2 = LN2(x'); x'' = x' + GELU(h2 W1 + b1) W2 + b2
// -> final LN on the CLS row -> linear head.
//
// Weights multiply on the right (y = x W + b), so a weight has shape [in x out].

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "vitmix/errors.hpp"
#include "vitmix/rng.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 16;
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 2;
  std::size_t num_classes = 4;
  std::uint64_t seed = 0;

  std::size_t grid() const noexcept { return image_size / patch_size; }
  std::size_t patch_count() const noexcept { return grid() * grid(); }
  std::size_t tokens() const noexcept { return patch_count() + 1; }
  std::size_t head_dim() const noexcept { return embed_dim / heads; }
  std::size_t mlp_dim() const noexcept { return embed_dim * mlp_ratio; }
  std::size_t patch_dim() const noexcept { return patch_size * patch_size * 3; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(embed_dim, "embed_dim");
    positive(depth, "depth");
    positive(heads, "heads");
    positive(mlp_ratio, "mlp_ratio");
    positive(num_classes, "num_classes");
    if (image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                        std::to_string(patch_size));
    if (embed_dim % heads != 0)
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                        std::to_string(heads));
  }

  bool operator==(const ViTConfig&) const = default;
};

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1, w2, b2;

  bool operator==(const BlockParams&) const = default;
};

struct ViTParams {
  ViTConfig config;
  Tensor patch_weight, patch_bias;
  Tensor cls_token;
  Tensor pos_embed;
  std::vector<BlockParams> blocks;
  Tensor norm_gamma, norm_beta;
  Tensor head_weight, head_bias;

  bool operator==(const ViTParams&) const = default;

  // Visits every parameter tensor with a stable dotted name
  // ("patch_weight", "blocks.0.wq", ...).
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  ViTParams zeros_like() const {
    ViTParams out = *this;
    out.for_each([](const std::string&, Tensor& t) {
      for (double& v : t.values()) v = 0.0;
    });
    return out;
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn(std::string("patch_weight"), self.patch_weight);
    fn(std::string("patch_bias"), self.patch_bias);
    fn(std::string("cls_token"), self.cls_token);
    fn(std::string("pos_embed"), self.pos_embed);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      auto& b = self.blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      fn(p + "ln1_gamma", b.ln1_gamma);
      fn(p + "ln1_beta", b.ln1_beta);
      fn(p + "wq", b.wq);
      fn(p + "bq", b.bq);
      fn(p + "wk", b.wk);
      fn(p + "bk", b.bk);
      fn(p + "wv", b.wv);
      fn(p + "bv", b.bv);
      fn(p + "wo", b.wo);
      fn(p + "bo", b.bo);
      fn(p + "ln2_gamma", b.ln2_gamma);
      fn(p + "ln2_beta", b.ln2_beta);
      fn(p + "w1", b.w1);
      fn(p + "b1", b.b1);
      fn(p + "w2", b.w2);
      fn(p + "b2", b.b2);
    }
    fn(std::string("norm_gamma"), self.norm_gamma);
    fn(std::string("norm_beta"), self.norm_beta);
    fn(std::string("head_weight"), self.head_weight);
    fn(std::string("head_bias"), self.head_bias);
  }
};

inline constexpr double kInitStddev = 0.02;

inline ViTParams init_params(const ViTConfig& config) {
  config.validate();
  SeededRng rng(config.seed);
  const std::size_t d = config.embed_dim;
  auto weight = [&](Shape s) { return rng.truncated_normal_tensor(std::move(s), kInitStddev); };
  ViTParams p;
  p.config = config;
  p.patch_weight = weight({config.patch_dim(), d});
  p.patch_bias = Tensor({d});
  p.cls_token = weight({d});
  p.pos_embed = weight({config.tokens(), d});
  for (std::size_t l = 0; l < config.depth; ++l) {
    BlockParams b;
    b.ln1_gamma = Tensor({d}, 1.0);
    b.ln1_beta = Tensor({d});
    b.wq = weight({d, d});
    b.bq = Tensor({d});
    b.wk = weight({d, d});
    b.bk = Tensor({d});
    b.wv = weight({d, d});
    b.bv = Tensor({d});
    b.wo = weight({d, d});
    b.bo = Tensor({d});
    b.ln2_gamma = Tensor({d}, 1.0);
    b.ln2_beta = Tensor({d});
    b.w1 = weight({d, config.mlp_dim()});
    b.b1 = Tensor({config.mlp_dim()});
    b.w2 = weight({config.mlp_dim(), d});
    b.b2 = Tensor({d});
    p.blocks.push_back(std::move(b));
  }
  p.norm_gamma = Tensor({d}, 1.0);
  p.norm_beta = Tensor({d});
  p.head_weight = weight({d, config.num_classes});
  p.head_bias = Tensor({config.num_classes});
  return p;
}

// Cached intermediates of one encoder block.
struct BlockCache {
  Tensor input;      // x            [T x d]
  Tensor ln1;        // LN1(x)       [T x d]
  Tensor q, k, v;    //              [T x d]
  Tensor context;    // concat_h A_h V_h   [T x d]
  Tensor mid;        // x + attn out [T x d]
  Tensor ln2;        // LN2(mid)     [T x d]
  Tensor hidden;     // pre-GELU     [T x mlp]
  Tensor activated;  // GELU(hidden) [T x mlp]
  Tensor output;     // block output [T x d]
};

struct ForwardTrace {
  Tensor image;              // [S x S x 3]
  Tensor patches;            // [g^2 x P*P*3]
  Tensor attn;               // [L x H x T x T], post-softmax
  std::vector<BlockCache> blocks;
  Tensor cls_normed;         // final LN of the CLS row [d]
  Tensor last_block_tokens;  // LN1 output of the last block [T x d]
  Tensor logits;             // [num_classes]
  Tensor probs;              // [num_classes]
};

struct BackwardTrace {
  std::size_t class_index = 0;
  Tensor input_grad;              // [S x S x 3]
  Tensor attn_grad;               // [L x H x T x T]
  Tensor last_block_tokens_grad;  // [T x d]
};

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// Columns [h*dh, (h+1)*dh) of a [T x d] tensor.
inline Tensor head_columns(const Tensor& x, std::size_t h, std::size_t dh) {
  Tensor out({x.dim(0), dh});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < dh; ++j) out.at(i, j) = x.at(i, h * dh + j);
  return out;
}

inline void add_head_columns(Tensor& x, const Tensor& part, std::size_t h, std::size_t dh) {
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < dh; ++j) x.at(i, h * dh + j) += part.at(i, j);
}

// Gradient of layer_norm w.r.t. its input, row by row. Accumulates gamma/beta
// gradients when the pointers are non-null.
inline Tensor layer_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& dy, Tensor* dgamma,
                                  Tensor* dbeta, double eps = kLayerNormEps) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor dx(x.shape());
  std::vector<double> xhat(d), dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[base + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[base + j] - mean) * (x[base + j] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (x[base + j] - mean) * rstd;
      dxhat[j] = dy[base + j] * gamma[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
      if (dgamma) (*dgamma)[j] += dy[base + j] * xhat[j];
      if (dbeta) (*dbeta)[j] += dy[base + j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx[base + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
  }
  return dx;
}

inline Tensor extract_patches(const Tensor& image, const ViTConfig& c) {
  const std::size_t g = c.grid(), ps = c.patch_size;
  Tensor patches({c.patch_count(), c.patch_dim()});
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px) {
      auto row = patches.row(py * g + px);
      for (std::size_t dy = 0; dy < ps; ++dy)
        for (std::size_t dx = 0; dx < ps; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch)
            row[(dy * ps + dx) * 3 + ch] = image.at(py * ps + dy, px * ps + dx, ch);
    }
  return patches;
}

}  // namespace detail

inline ForwardTrace forward(const ViTParams& params, const Tensor& image) {
  const ViTConfig& c = params.config;
  require_shape(image, {c.image_size, c.image_size, 3}, "forward image");
  const std::size_t T = c.tokens(), d = c.embed_dim, H = c.heads, dh = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardTrace tr;
  tr.image = image;
  tr.patches = detail::extract_patches(image, c);
  tr.attn = Tensor({c.depth, H, T, T});

  const Tensor embedded = add_bias(matmul(tr.patches, params.patch_weight), params.patch_bias);
  Tensor x({T, d});
  for (std::size_t j = 0; j < d; ++j) x.at(0, j) = params.cls_token[j] + params.pos_embed.at(0, j);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) x.at(t, j) = embedded.at(t - 1, j) + params.pos_embed.at(t, j);

  for (std::size_t l = 0; l < c.depth; ++l) {
    const BlockParams& b = params.blocks[l];
    BlockCache bc;
    bc.input = x;
    bc.ln1 = layer_norm(x, b.ln1_gamma, b.ln1_beta);
    bc.q = add_bias(matmul(bc.ln1, b.wq), b.bq);
    bc.k = add_bias(matmul(bc.ln1, b.wk), b.bk);
    bc.v = add_bias(matmul(bc.ln1, b.wv), b.bv);
    bc.context = Tensor({T, d});
    for (std::size_t h = 0; h < H; ++h) {
      const Tensor qh = detail::head_columns(bc.q, h, dh);
      const Tensor kh = detail::head_columns(bc.k, h, dh);
      const Tensor vh = detail::head_columns(bc.v, h, dh);
      const Tensor a = softmax_rows(scaled(matmul_nt(qh, kh), scale));
      std::copy(a.values().begin(), a.values().end(),
                tr.attn.values().begin() + static_cast<std::ptrdiff_t>((l * H + h) * T * T));
      detail::add_head_columns(bc.context, matmul(a, vh), h, dh);
    }
    bc.mid = x + add_bias(matmul(bc.context, b.wo), b.bo);
    bc.ln2 = layer_norm(bc.mid, b.ln2_gamma, b.ln2_beta);
    bc.hidden = add_bias(matmul(bc.ln2, b.w1), b.b1);
    bc.activated = map(bc.hidden, detail::gelu);
    bc.output = bc.mid + add_bias(matmul(bc.activated, b.w2), b.b2);
    x = bc.output;
    tr.blocks.push_back(std::move(bc));
  }
  tr.last_block_tokens = tr.blocks.back().ln1;

  Tensor cls({1, d});
  for (std::size_t j = 0; j < d; ++j) cls[j] = x.at(0, j);
  tr.cls_normed = layer_norm(cls, params.norm_gamma, params.norm_beta).reshaped({d});
  tr.logits = add_bias(matmul(tr.cls_normed.reshaped({1, d}), params.head_weight), params.head_bias)
                  .reshaped({c.num_classes});
  tr.probs = softmax_rows(tr.logits);
  return tr;
}

inline std::vector<ForwardTrace> forward_batch(const ViTParams& params, std::span<const Tensor> images) {
  std::vector<ForwardTrace> out;
  out.reserve(images.size());
  for (const Tensor& img : images) out.push_back(forward(params, img));
  return out;
}

// Exact reverse-mode gradients of logits[class_index]. When `param_grads` is
// non-null it receives the gradient w.r.t. every parameter (same layout as
// `params`).
inline BackwardTrace backward(const ViTParams& params, const ForwardTrace& trace, std::size_t class_index,
                              ViTParams* param_grads = nullptr) {
  const ViTConfig& c = params.config;
  if (class_index >= c.num_classes)
    throw ArgumentError("class_index " + std::to_string(class_index) + " out of range for " +
                        std::to_string(c.num_classes) + " classes");
  if (trace.blocks.size() != c.depth) throw ArgumentError("trace does not match model depth");
  const std::size_t T = c.tokens(), d = c.embed_dim, H = c.heads, dh = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  ViTParams* pg = param_grads;
  if (pg) *pg = params.zeros_like();

  BackwardTrace bt;
  bt.class_index = class_index;
  bt.attn_grad = Tensor({c.depth, H, T, T});

  // Head: logit_c = cls_normed . head_weight[:, c] + head_bias[c].
  Tensor d_cls_normed({1, d});
  for (std::size_t j = 0; j < d; ++j) {
    d_cls_normed[j] = params.head_weight.at(j, class_index);
    if (pg) pg->head_weight.at(j, class_index) += trace.cls_normed[j];
  }
  if (pg) pg->head_bias[class_index] += 1.0;

  Tensor cls({1, d});
  for (std::size_t j = 0; j < d; ++j) cls[j] = trace.blocks.back().output.at(0, j);
  const Tensor d_cls = detail::layer_norm_backward(cls, params.norm_gamma, d_cls_normed,
                                                   pg ? &pg->norm_gamma : nullptr, pg ? &pg->norm_beta : nullptr);
  Tensor dx({T, d});
  for (std::size_t j = 0; j < d; ++j) dx.at(0, j) = d_cls[j];

  for (std::size_t li = c.depth; li-- > 0;) {
    const BlockParams& b = params.blocks[li];
    const BlockCache& bc = trace.blocks[li];
    BlockParams* gb = pg ? &pg->blocks[li] : nullptr;

    // MLP branch.
    const Tensor& d_mlp_out = dx;
    const Tensor d_act = matmul_nt(d_mlp_out, b.w2);
    Tensor d_hidden = d_act;
    for (std::size_t i = 0; i < d_hidden.size(); ++i) d_hidden[i] *= detail::gelu_grad(bc.hidden[i]);
    const Tensor d_ln2 = matmul_nt(d_hidden, b.w1);
    if (gb) {
      gb->w2 = gb->w2 + matmul_tn(bc.activated, d_mlp_out);
      gb->b2 = gb->b2 + column_sums(d_mlp_out);
      gb->w1 = gb->w1 + matmul_tn(bc.ln2, d_hidden);
      gb->b1 = gb->b1 + column_sums(d_hidden);
    }
    const Tensor d_mid = dx + detail::layer_norm_backward(bc.mid, b.ln2_gamma, d_ln2, gb ? &gb->ln2_gamma : nullptr,
                                                          gb ? &gb->ln2_beta : nullptr);

    // Attention branch.
    const Tensor d_context = matmul_nt(d_mid, b.wo);
    if (gb) {
      gb->wo = gb->wo + matmul_tn(bc.context, d_mid);
      gb->bo = gb->bo + column_sums(d_mid);
    }
    Tensor dq({T, d}), dk({T, d}), dv({T, d});
    for (std::size_t h = 0; h < H; ++h) {
      const Tensor a = trace.attn.slice(li).slice(h);
      const Tensor qh = detail::head_columns(bc.q, h, dh);
      const Tensor kh = detail::head_columns(bc.k, h, dh);
      const Tensor vh = detail::head_columns(bc.v, h, dh);
      const Tensor d_ctx_h = detail::head_columns(d_context, h, dh);
      const Tensor d_a = matmul_nt(d_ctx_h, vh);
      std::copy(d_a.values().begin(), d_a.values().end(),
                bt.attn_grad.values().begin() + static_cast<std::ptrdiff_t>((li * H + h) * T * T));
      detail::add_head_columns(dv, matmul_tn(a, d_ctx_h), h, dh);
      // Softmax backward: dS = A * (dA - rowsum(dA * A)).
      Tensor d_scores({T, T});
      for (std::size_t i = 0; i < T; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < T; ++j) dot += d_a.at(i, j) * a.at(i, j);
        for (std::size_t j = 0; j < T; ++j) d_scores.at(i, j) = a.at(i, j) * (d_a.at(i, j) - dot) * scale;
      }
      detail::add_head_columns(dq, matmul(d_scores, kh), h, dh);
      detail::add_head_columns(dk, matmul_tn(d_scores, qh), h, dh);
    }
    const Tensor d_ln1 = matmul_nt(dq, b.wq) + matmul_nt(dk, b.wk) + matmul_nt(dv, b.wv);
    if (gb) {
      gb->wq = gb->wq + matmul_tn(bc.ln1, dq);
      gb->bq = gb->bq + column_sums(dq);
      gb->wk = gb->wk + matmul_tn(bc.ln1, dk);
      gb->bk = gb->bk + column_sums(dk);
      gb->wv = gb->wv + matmul_tn(bc.ln1, dv);
      gb->bv = gb->bv + column_sums(dv);
    }
    if (li + 1 == c.depth) bt.last_block_tokens_grad = d_ln1;
    dx = d_mid + detail::layer_norm_backward(bc.input, b.ln1_gamma, d_ln1, gb ? &gb->ln1_gamma : nullptr,
                                             gb ? &gb->ln1_beta : nullptr);
  }

  // Embedding.
  Tensor d_embedded({c.patch_count(), d});
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) d_embedded.at(t - 1, j) = dx.at(t, j);
  if (pg) {
    pg->pos_embed = pg->pos_embed + dx;
    for (std::size_t j = 0; j < d; ++j) pg->cls_token[j] += dx.at(0, j);
    pg->patch_weight = pg->patch_weight + matmul_tn(trace.patches, d_embedded);
    pg->patch_bias = pg->patch_bias + column_sums(d_embedded);
  }
  const Tensor d_patches = matmul_nt(d_embedded, params.patch_weight);
  bt.input_grad = Tensor({c.image_size, c.image_size, 3});
  const std::size_t g = c.grid(), ps = c.patch_size;
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px) {
      const auto row = d_patches.row(py * g + px);
      for (std::size_t dy = 0; dy < ps; ++dy)
        for (std::size_t dxp = 0; dxp < ps; ++dxp)
          for (std::size_t ch = 0; ch < 3; ++ch)
            bt.input_grad.at(py * ps + dy, px * ps + dxp, ch) = row[(dy * ps + dxp) * 3 + ch];
    }
  return bt;
}

struct Prediction {
  std::size_t class_index = 0;
  double confidence = 0.0;
};

// Argmax of the class probabilities; ties go to the lowest index.
inline Prediction predict(const ForwardTrace& trace) {
  Prediction p;
  for (std::size_t i = 0; i < trace.probs.size(); ++i)
    if (i == 0 || trace.probs[i] > p.confidence) p = {i, trace.probs[i]};
  return p;
}

}  // namespace vitmix
