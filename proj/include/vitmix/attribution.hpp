#pragma once

// The four base explainability methods. Each one reduces a forward/backward
// trace to a min-max normalized AttributionMap on the g x g patch grid.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vitmix/attribution_map.hpp"
#include "vitmix/errors.hpp"
#include "vitmix/tensor.hpp"
#include "vitmix/vit.hpp"

namespace vitmix {

namespace detail {

inline std::size_t grid_side_for_tokens(std::size_t tokens) {
  if (tokens < 2) throw DimensionError("need at least one patch token besides CLS");
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens - 1))));
  if (g * g != tokens - 1)
    throw DimensionError("token count " + std::to_string(tokens) + " is not a square patch grid plus CLS");
  return g;
}

// CLS row of a [T x T] token matrix restricted to patch columns, as g x g.
inline Tensor cls_patch_row(const Tensor& m) {
  const std::size_t T = m.dim(0);
  const std::size_t g = grid_side_for_tokens(T);
  Tensor grid({g, g});
  for (std::size_t p = 0; p + 1 < T; ++p) grid[p] = m.at(0, p + 1);
  return grid;
}

inline void require_attention_stack(const Tensor& attn, const char* what) {
  if (attn.rank() != 4 || attn.dim(2) != attn.dim(3))
    throw DimensionError(std::string(what) + ": expected [L x H x T x T], got " + shape_string(attn.shape()));
}

// Head-averaged attention of layer l.
inline Tensor head_mean(const Tensor& stack, std::size_t l) {
  const std::size_t H = stack.dim(1), T = stack.dim(2);
  Tensor out({T, T});
  const auto vals = stack.values();
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t base = (l * H + h) * T * T;
    for (std::size_t i = 0; i < T * T; ++i) out[i] += vals[base + i];
  }
  return scaled(out, 1.0 / static_cast<double>(H));
}

}  // namespace detail

// ---------------------------------------------------------------- rollout

// Identity-mixed, row-renormalized, head-averaged attention of one layer.
inline Tensor rollout_factor(const Tensor& attn, std::size_t layer) {
  Tensor a = detail::head_mean(attn, layer);
  const std::size_t T = a.dim(0);
  for (std::size_t i = 0; i < T; ++i) {
    double row_sum = 0.0;
    for (std::size_t j = 0; j < T; ++j) {
      a.at(i, j) = 0.5 * a.at(i, j) + (i == j ? 0.5 : 0.0);
      row_sum += a.at(i, j);
    }
    for (std::size_t j = 0; j < T; ++j) a.at(i, j) /= row_sum;
  }
  return a;
}

// R = F(L-1) * ... * F(start); each F is row-stochastic, so R is too.
inline Tensor rollout_matrix(const Tensor& attn, std::size_t start_layer) {
  detail::require_attention_stack(attn, "attention_rollout");
  const std::size_t L = attn.dim(0);
  if (start_layer >= L)
    throw ArgumentError("rollout start_layer " + std::to_string(start_layer) + " >= depth " + std::to_string(L));
  Tensor r = Tensor::identity(attn.dim(2));
  for (std::size_t l = start_layer; l < L; ++l) r = matmul(rollout_factor(attn, l), r);
  return r;
}

inline AttributionMap attention_rollout(const Tensor& attn, std::size_t start_layer) {
  return AttributionMap::from_raw(detail::cls_patch_row(rollout_matrix(attn, start_layer)), {MethodId::Rollout});
}

// ---------------------------------------------------------------- saliency

// Per-pixel max_c |grad|, mean-pooled over (s/g) x (s/g) blocks. Not normalized.
inline Tensor saliency_pooled(const Tensor& input_grad, std::size_t g) {
  if (input_grad.rank() != 3 || input_grad.dim(0) != input_grad.dim(1) || input_grad.dim(2) == 0)
    throw DimensionError("saliency_map: expected [s x s x C] gradient, got " + shape_string(input_grad.shape()));
  const std::size_t s = input_grad.dim(0), channels = input_grad.dim(2);
  if (g == 0 || s % g != 0)
    throw DimensionError("saliency_map: image side " + std::to_string(s) + " not divisible by grid " +
                         std::to_string(g));
  const std::size_t block = s / g;
  Tensor pooled({g, g});
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      double mag = 0.0;
      for (std::size_t c = 0; c < channels; ++c) mag = std::max(mag, std::abs(input_grad.at(y, x, c)));
      pooled.at(y / block, x / block) += mag;
    }
  return scaled(pooled, 1.0 / static_cast<double>(block * block));
}

inline AttributionMap saliency_map(const Tensor& input_grad, std::size_t g) {
  return AttributionMap::from_raw(saliency_pooled(input_grad, g), {MethodId::Saliency});
}

// ---------------------------------------------------------------- Grad-CAM

// ReLU(sum_c w_c * act[token, c]) over patch tokens, with w_c the patch-token
// mean of the gradient. Not normalized.
inline Tensor grad_cam_scores(const Tensor& act, const Tensor& grad, std::size_t g) {
  require_rank(act, 2, "grad_cam_vit activations");
  require_shape(grad, act.shape(), "grad_cam_vit gradient");
  const std::size_t T = act.dim(0), d = act.dim(1);
  if (T != g * g + 1)
    throw DimensionError("grad_cam_vit: " + std::to_string(T) + " tokens do not match a " + std::to_string(g) +
                         "x" + std::to_string(g) + " grid plus CLS");
  std::vector<double> weights(d, 0.0);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t c = 0; c < d; ++c) weights[c] += grad.at(t, c);
  for (double& w : weights) w /= static_cast<double>(T - 1);
  Tensor scores({g, g});
  for (std::size_t t = 1; t < T; ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += weights[c] * act.at(t, c);
    scores[t - 1] = std::max(s, 0.0);
  }
  return scores;
}

inline AttributionMap grad_cam_vit(const Tensor& last_block_tokens, const Tensor& last_block_tokens_grad,
                                   std::size_t g) {
  return AttributionMap::from_raw(grad_cam_scores(last_block_tokens, last_block_tokens_grad, g),
                                  {MethodId::GradCAM});
}

// ---------------------------------------------------------------- LRP

inline constexpr double kLrpEpsilon = 1e-6;

// Relevance totals on both sides of one propagation step.
struct ConservationRecord {
  enum class Kind { Affine, Matmul, Residual };
  std::string layer;
  Kind kind = Kind::Affine;
  double relevance_out = 0.0;
  double relevance_in = 0.0;

  double relative_drift() const {
    const double denom = std::abs(relevance_out);
    return denom > 0.0 ? std::abs(relevance_in - relevance_out) / denom : std::abs(relevance_in);
  }
};

struct LrpResult {
  Tensor attn_relevance;  // [L x H x T x T], relevance arriving at each attention map
  std::vector<ConservationRecord> conservation;
};

namespace lrp {

// Denominators at least eps in magnitude divide exactly. Below that the
// quotient is unusable, so the cell's relevance is instead shared out by
// |contribution| (uniformly if every contribution is zero). Either way a
// bias-free layer conserves relevance up to rounding.
inline bool guarded(double z, double eps) { return !(std::abs(z) >= eps); }

// R / z with guarded cells zeroed; they are handled by the caller.
inline Tensor ratio(const Tensor& relevance, const Tensor& z, double eps) {
  return zip(relevance, z, [eps](double r, double zz) { return guarded(zz, eps) ? 0.0 : r / zz; });
}

// Fallback shares for one guarded cell whose contributions are c_0..c_{n-1}.
inline void share_out(std::vector<double>& c, double relevance) {
  double total = 0.0;
  for (double v : c) total += std::abs(v);
  for (double& v : c) v = total > 0.0 ? relevance * std::abs(v) / total : relevance / static_cast<double>(c.size());
}

// epsilon rule for y = x W + b. Returns relevance on x.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& relevance, double eps,
                     const std::string& name, std::vector<ConservationRecord>& log) {
  const Tensor z = add_bias(matmul(x, w), b);
  Tensor r_in = hadamard(x, matmul_nt(ratio(relevance, z, eps), w));
  const std::size_t rows = x.dim(0), in = x.dim(1), out = w.dim(1);
  std::vector<double> c(in);
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t j = 0; j < out; ++j) {
      if (!guarded(z.at(t, j), eps)) continue;
      for (std::size_t i = 0; i < in; ++i) c[i] = x.at(t, i) * w.at(i, j);
      share_out(c, relevance.at(t, j));
      for (std::size_t i = 0; i < in; ++i) r_in.at(t, i) += c[i];
    }
  log.push_back({name, ConservationRecord::Kind::Affine, sum(relevance), sum(r_in)});
  return r_in;
}

// z = a b with both operands data-dependent: epsilon rule per operand, halved
// so the two shares together carry the incoming relevance.
inline std::pair<Tensor, Tensor> matmul2(const Tensor& a, const Tensor& b, const Tensor& relevance, double eps,
                                         const std::string& name, std::vector<ConservationRecord>& log) {
  const Tensor z = matmul(a, b);
  const Tensor s = ratio(relevance, z, eps);
  Tensor r_a = scaled(hadamard(a, matmul_nt(s, b)), 0.5);
  Tensor r_b = scaled(hadamard(b, matmul_tn(a, s)), 0.5);
  const std::size_t rows = a.dim(0), inner = a.dim(1), cols = b.dim(1);
  std::vector<double> c(inner);
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t n = 0; n < cols; ++n) {
      if (!guarded(z.at(t, n), eps)) continue;
      for (std::size_t k = 0; k < inner; ++k) c[k] = a.at(t, k) * b.at(k, n);
      share_out(c, relevance.at(t, n));
      for (std::size_t k = 0; k < inner; ++k) {
        r_a.at(t, k) += 0.5 * c[k];
        r_b.at(k, n) += 0.5 * c[k];
      }
    }
  log.push_back({name, ConservationRecord::Kind::Matmul, sum(relevance), sum(r_a) + sum(r_b)});
  return {std::move(r_a), std::move(r_b)};
}

// out = u + v: each operand keeps its proportional share.
inline std::pair<Tensor, Tensor> residual(const Tensor& u, const Tensor& v, const Tensor& relevance, double eps,
                                          const std::string& name, std::vector<ConservationRecord>& log) {
  const Tensor z = u + v;
  const Tensor s = ratio(relevance, z, eps);
  Tensor r_u = hadamard(u, s);
  Tensor r_v = hadamard(v, s);
  std::vector<double> c(2);
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!guarded(z[i], eps)) continue;
    c = {u[i], v[i]};
    share_out(c, relevance[i]);
    r_u[i] += c[0];
    r_v[i] += c[1];
  }
  log.push_back({name, ConservationRecord::Kind::Residual, sum(relevance), sum(r_u) + sum(r_v)});
  return {std::move(r_u), std::move(r_v)};
}

}  // namespace lrp

// Relevance propagation from the one-hot target logit down to every
// attention map. Softmax, GELU and layer norms pass relevance through
// unchanged.
inline LrpResult lrp_propagate(const ViTParams& params, const ForwardTrace& trace, std::size_t class_index,
                               double eps = kLrpEpsilon) {
  const ViTConfig& c = params.config;
  if (class_index >= c.num_classes) throw ArgumentError("lrp: class_index out of range");
  if (trace.blocks.size() != c.depth || trace.attn.shape() != Shape{c.depth, c.heads, c.tokens(), c.tokens()})
    throw ArgumentError("lrp: forward trace does not match the model");
  const std::size_t T = c.tokens(), d = c.embed_dim, H = c.heads, dh = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  LrpResult out;
  out.attn_relevance = Tensor({c.depth, H, T, T});
  auto& log = out.conservation;

  Tensor one_hot({1, c.num_classes});
  one_hot[class_index] = 1.0;
  const Tensor r_cls = lrp::affine(trace.cls_normed.reshaped({1, d}), params.head_weight, params.head_bias, one_hot,
                                   eps, "head", log);
  Tensor r({T, d});
  for (std::size_t j = 0; j < d; ++j) r.at(0, j) = r_cls[j];

  for (std::size_t li = c.depth; li-- > 0;) {
    const BlockParams& b = params.blocks[li];
    const BlockCache& bc = trace.blocks[li];
    const std::string p = "blocks." + std::to_string(li) + ".";

    const Tensor mlp_out = add_bias(matmul(bc.activated, b.w2), b.b2);
    auto [r_mid, r_mlp] = lrp::residual(bc.mid, mlp_out, r, eps, p + "residual2", log);
    const Tensor r_act = lrp::affine(bc.activated, b.w2, b.b2, r_mlp, eps, p + "w2", log);
    const Tensor r_ln2 = lrp::affine(bc.ln2, b.w1, b.b1, r_act, eps, p + "w1", log);
    r_mid = r_mid + r_ln2;

    const Tensor attn_out = add_bias(matmul(bc.context, b.wo), b.bo);
    auto [r_in, r_attn] = lrp::residual(bc.input, attn_out, r_mid, eps, p + "residual1", log);
    const Tensor r_context = lrp::affine(bc.context, b.wo, b.bo, r_attn, eps, p + "wo", log);

    Tensor r_q({T, d}), r_k({T, d}), r_v({T, d});
    for (std::size_t h = 0; h < H; ++h) {
      const std::string hp = p + "head" + std::to_string(h) + ".";
      const Tensor a = trace.attn.slice(li).slice(h);
      const Tensor vh = detail::head_columns(bc.v, h, dh);
      auto [r_a, r_vh] = lrp::matmul2(a, vh, detail::head_columns(r_context, h, dh), eps, hp + "attn_v", log);
      std::copy(r_a.values().begin(), r_a.values().end(),
                out.attn_relevance.values().begin() + static_cast<std::ptrdiff_t>((li * H + h) * T * T));
      detail::add_head_columns(r_v, r_vh, h, dh);
      // Softmax passes relevance through; scores = (scale q) k^T.
      const Tensor qh = scaled(detail::head_columns(bc.q, h, dh), scale);
      const Tensor kt = transpose(detail::head_columns(bc.k, h, dh));
      auto [r_qh, r_kt] = lrp::matmul2(qh, kt, r_a, eps, hp + "q_k", log);
      detail::add_head_columns(r_q, r_qh, h, dh);
      detail::add_head_columns(r_k, transpose(r_kt), h, dh);
    }
    const Tensor r_ln1 = lrp::affine(bc.ln1, b.wq, b.bq, r_q, eps, p + "wq", log) +
                         lrp::affine(bc.ln1, b.wk, b.bk, r_k, eps, p + "wk", log) +
                         lrp::affine(bc.ln1, b.wv, b.bv, r_v, eps, p + "wv", log);
    r = r_in + r_ln1;
  }
  return out;
}

// C = I; for l in [start, L): C <- C + E(l) C, where
// E(l) = mean_h (grad_A(l) * R_A(l))^+.
inline Tensor lrp_aggregate(const Tensor& attn_grad, const Tensor& attn_relevance, std::size_t start_layer) {
  detail::require_attention_stack(attn_grad, "lrp attention gradient");
  require_shape(attn_relevance, attn_grad.shape(), "lrp attention relevance");
  const std::size_t L = attn_grad.dim(0), H = attn_grad.dim(1), T = attn_grad.dim(2);
  if (start_layer >= L)
    throw ArgumentError("lrp start_layer " + std::to_string(start_layer) + " >= depth " + std::to_string(L));
  Tensor acc = Tensor::identity(T);
  const auto g = attn_grad.values();
  const auto rel = attn_relevance.values();
  for (std::size_t l = start_layer; l < L; ++l) {
    Tensor e({T, T});
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t base = (l * H + h) * T * T;
      for (std::size_t i = 0; i < T * T; ++i) e[i] += std::max(g[base + i] * rel[base + i], 0.0);
    }
    e = scaled(e, 1.0 / static_cast<double>(H));
    acc = acc + matmul(e, acc);
  }
  return acc;
}

inline AttributionMap lrp_relevance(const ForwardTrace& trace, const BackwardTrace& back, const ViTParams& params,
                                    std::size_t class_index, std::size_t start_layer = 0) {
  if (back.class_index != class_index)
    throw ArgumentError("lrp: backward trace was taken for class " + std::to_string(back.class_index) +
                        ", not " + std::to_string(class_index));
  if (back.attn_grad.shape() != trace.attn.shape())
    throw ArgumentError("lrp: backward trace " + shape_string(back.attn_grad.shape()) +
                        " does not match forward trace " + shape_string(trace.attn.shape()));
  const LrpResult res = lrp_propagate(params, trace, class_index);
  return AttributionMap::from_raw(detail::cls_patch_row(lrp_aggregate(back.attn_grad, res.attn_relevance, start_layer)),
                                  {MethodId::LRP});
}

}  // namespace vitmix
