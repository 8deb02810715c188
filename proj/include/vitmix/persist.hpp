#pragma once

// Mapping of model parameters, attribution maps and trace dumps onto named
// tensors in the interchange format.

#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>

#include "vitmix/attribution.hpp"
#include "vitmix/attribution_map.hpp"
#include "vitmix/errors.hpp"
#include "vitmix/interchange.hpp"
#include "vitmix/vit.hpp"

namespace vitmix {

namespace detail {

inline const Tensor& require_tensor(const TensorMap& m, const std::string& name, const std::string& what) {
  const auto it = m.find(name);
  if (it == m.end()) throw FormatError(what + ": missing tensor '" + name + "'");
  return it->second;
}

inline std::size_t as_count(double v, const char* what) {
  if (!(v >= 0.0) || v != std::floor(v) || v > 1e15) throw FormatError(std::string(what) + " is not a count");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

// ------------------------------------------------------------ model params

// The "config" tensor holds image_size, patch_size, embed_dim, depth, heads,
// mlp_ratio, num_classes. The seed is not stored; the weights are.
inline TensorMap params_to_tensors(const ViTParams& params) {
  TensorMap out;
  const ViTConfig& c = params.config;
  out.emplace("config", Tensor({7}, {static_cast<double>(c.image_size), static_cast<double>(c.patch_size),
                                     static_cast<double>(c.embed_dim), static_cast<double>(c.depth),
                                     static_cast<double>(c.heads), static_cast<double>(c.mlp_ratio),
                                     static_cast<double>(c.num_classes)}));
  params.for_each([&](const std::string& name, const Tensor& t) { out.emplace(name, t); });
  return out;
}

inline ViTParams params_from_tensors(const TensorMap& tensors) {
  const Tensor& cfg = detail::require_tensor(tensors, "config", "model file");
  if (cfg.size() != 7) throw FormatError("model file: config tensor must hold 7 values");
  ViTConfig c;
  c.image_size = detail::as_count(cfg[0], "image_size");
  c.patch_size = detail::as_count(cfg[1], "patch_size");
  c.embed_dim = detail::as_count(cfg[2], "embed_dim");
  c.depth = detail::as_count(cfg[3], "depth");
  c.heads = detail::as_count(cfg[4], "heads");
  c.mlp_ratio = detail::as_count(cfg[5], "mlp_ratio");
  c.num_classes = detail::as_count(cfg[6], "num_classes");
  c.validate();
  // Shapes come from a freshly initialized model of the same config.
  ViTParams p = init_params(c);
  p.for_each([&](const std::string& name, Tensor& t) {
    const Tensor& stored = detail::require_tensor(tensors, name, "model file");
    if (stored.shape() != t.shape())
      throw FormatError("model file: tensor '" + name + "' has shape " + shape_string(stored.shape()) +
                        ", expected " + shape_string(t.shape()));
    t = stored;
  });
  return p;
}

inline void save_params(const std::filesystem::path& path, const ViTParams& params) {
  write_tensor_file(path, params_to_tensors(params));
}

inline ViTParams load_params(const std::filesystem::path& path) {
  const TensorMap tensors = read_tensor_file(path);
  try {
    return params_from_tensors(tensors);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ------------------------------------------------------------ attribution maps

inline TensorMap map_to_tensors(const AttributionMap& m) {
  TensorMap out;
  out.emplace("grid", m.grid);
  Tensor methods({m.methods.size()});
  for (std::size_t i = 0; i < m.methods.size(); ++i) methods[i] = static_cast<double>(m.methods[i]);
  out.emplace("methods", std::move(methods));
  out.emplace("fusion_op", Tensor({1}, m.fusion_op ? static_cast<double>(*m.fusion_op) : -1.0));
  out.emplace("degenerate", Tensor({1}, m.degenerate ? 1.0 : 0.0));
  return out;
}

inline AttributionMap map_from_tensors(const TensorMap& tensors) {
  AttributionMap m;
  m.grid = detail::require_tensor(tensors, "grid", "map file");
  require_rank(m.grid, 2, "map file grid");
  for (double v : detail::require_tensor(tensors, "methods", "map file").values()) {
    const std::size_t id = detail::as_count(v, "method id");
    if (id >= kAllMethods.size()) throw FormatError("map file: unknown method id " + std::to_string(id));
    m.methods.push_back(static_cast<MethodId>(id));
  }
  const double op = detail::require_tensor(tensors, "fusion_op", "map file")[0];
  if (op >= 0.0) {
    const std::size_t id = detail::as_count(op, "fusion op");
    if (id >= kAllFusionOps.size()) throw FormatError("map file: unknown fusion op " + std::to_string(id));
    m.fusion_op = static_cast<FusionOp>(id);
  }
  m.degenerate = detail::require_tensor(tensors, "degenerate", "map file")[0] != 0.0;
  return m;
}

inline void save_map(const std::filesystem::path& path, const AttributionMap& m) {
  write_tensor_file(path, map_to_tensors(m));
}

inline AttributionMap load_map(const std::filesystem::path& path) {
  const TensorMap tensors = read_tensor_file(path);
  try {
    return map_from_tensors(tensors);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ------------------------------------------------------------ trace dumps

// Everything the attribution methods need for one image. A dump written by an
// external exporter has no access to this engine's LRP pass; it may carry an
// "attn_relevance" tensor, otherwise the attention maps stand in for it.
struct TraceDump {
  Tensor image;          // [S x S x 3]
  Tensor logits;         // [C]
  Tensor attn;           // [L x H x T x T]
  Tensor attn_grad;      // [L x H x T x T]
  Tensor input_grad;     // [S x S x 3]
  Tensor last_act;       // [T x d]
  Tensor last_act_grad;  // [T x d]
  std::optional<Tensor> attn_relevance;
};

inline constexpr std::array<const char*, 7> kTraceDumpRequired = {
    "image", "logits", "attn", "attn_grad", "input_grad", "last_act", "last_act_grad"};

inline TraceDump make_trace_dump(const ViTParams& params, const ForwardTrace& fwd, const BackwardTrace& back) {
  TraceDump d;
  d.image = fwd.image;
  d.logits = fwd.logits;
  d.attn = fwd.attn;
  d.attn_grad = back.attn_grad;
  d.input_grad = back.input_grad;
  d.last_act = fwd.last_block_tokens;
  d.last_act_grad = back.last_block_tokens_grad;
  d.attn_relevance = lrp_propagate(params, fwd, back.class_index).attn_relevance;
  return d;
}

inline TensorMap dump_to_tensors(const TraceDump& d) {
  TensorMap out{{"image", d.image},           {"logits", d.logits},         {"attn", d.attn},
                {"attn_grad", d.attn_grad},   {"input_grad", d.input_grad}, {"last_act", d.last_act},
                {"last_act_grad", d.last_act_grad}};
  if (d.attn_relevance) out.emplace("attn_relevance", *d.attn_relevance);
  return out;
}

inline TraceDump dump_from_tensors(const TensorMap& t) {
  TraceDump d;
  d.image = detail::require_tensor(t, "image", "trace dump");
  d.logits = detail::require_tensor(t, "logits", "trace dump");
  d.attn = detail::require_tensor(t, "attn", "trace dump");
  d.attn_grad = detail::require_tensor(t, "attn_grad", "trace dump");
  d.input_grad = detail::require_tensor(t, "input_grad", "trace dump");
  d.last_act = detail::require_tensor(t, "last_act", "trace dump");
  d.last_act_grad = detail::require_tensor(t, "last_act_grad", "trace dump");
  if (auto it = t.find("attn_relevance"); it != t.end()) d.attn_relevance = it->second;

  auto fail = [](const std::string& msg) { throw FormatError("trace dump: " + msg); };
  if (d.attn.rank() != 4 || d.attn.dim(2) != d.attn.dim(3)) fail("attn must be [L x H x T x T]");
  if (d.attn_grad.shape() != d.attn.shape()) fail("attn_grad shape differs from attn");
  if (d.attn_relevance && d.attn_relevance->shape() != d.attn.shape()) fail("attn_relevance shape differs from attn");
  if (d.image.rank() != 3 || d.image.dim(2) != 3 || d.image.dim(0) != d.image.dim(1))
    fail("image must be [S x S x 3]");
  if (d.input_grad.shape() != d.image.shape()) fail("input_grad shape differs from image");
  if (d.last_act.rank() != 2 || d.last_act.dim(0) != d.attn.dim(2)) fail("last_act must be [T x d]");
  if (d.last_act_grad.shape() != d.last_act.shape()) fail("last_act_grad shape differs from last_act");
  if (d.logits.rank() != 1) fail("logits must be a vector");
  return d;
}

inline void save_trace_dump(const std::filesystem::path& path, const TraceDump& d, DType dtype = DType::F64) {
  write_tensor_file(path, dump_to_tensors(d), dtype);
}

inline TraceDump load_trace_dump(const std::filesystem::path& path) {
  const TensorMap tensors = read_tensor_file(path);
  try {
    return dump_from_tensors(tensors);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace vitmix
