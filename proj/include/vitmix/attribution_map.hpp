#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vitmix/errors.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

enum class MethodId : std::uint8_t { Rollout = 0, Saliency = 1, GradCAM = 2, LRP = 3 };

inline constexpr std::array<MethodId, 4> kAllMethods = {MethodId::Rollout, MethodId::Saliency, MethodId::GradCAM,
                                                        MethodId::LRP};

inline std::string_view method_name(MethodId m) {
  switch (m) {
    case MethodId::Rollout: return "rollout";
    case MethodId::Saliency: return "saliency";
    case MethodId::GradCAM: return "gradcam";
    case MethodId::LRP: return "lrp";
  }
  return "?";
}

inline std::optional<MethodId> parse_method(std::string_view name) {
  for (MethodId m : kAllMethods)
    if (method_name(m) == name) return m;
  return std::nullopt;
}

enum class FusionOp : std::uint8_t { Multiply = 0, GeometricMean = 1, Average = 2 };

inline constexpr std::array<FusionOp, 3> kAllFusionOps = {FusionOp::Multiply, FusionOp::GeometricMean,
                                                          FusionOp::Average};

inline std::string_view fusion_op_name(FusionOp op) {
  switch (op) {
    case FusionOp::Multiply: return "multiply";
    case FusionOp::GeometricMean: return "geomean";
    case FusionOp::Average: return "average";
  }
  return "?";
}

inline std::optional<FusionOp> parse_fusion_op(std::string_view name) {
  for (FusionOp op : kAllFusionOps)
    if (fusion_op_name(op) == name) return op;
  return std::nullopt;
}

// Non-negative heat values on the g x g patch grid, normalized to [0, 1].
// `degenerate` marks maps whose raw values were constant; their grid is all
// zeros and downstream consumers treat them as "claims nothing".
struct AttributionMap {
  Tensor grid;
  std::vector<MethodId> methods;  // sorted, unique, non-empty
  std::optional<FusionOp> fusion_op;
  bool degenerate = false;

  static AttributionMap from_raw(const Tensor& raw, std::vector<MethodId> methods,
                                 std::optional<FusionOp> op = std::nullopt) {
    require_rank(raw, 2, "attribution grid");
    if (!all_finite(raw)) throw ArgumentError("attribution grid contains non-finite values");
    std::sort(methods.begin(), methods.end());
    methods.erase(std::unique(methods.begin(), methods.end()), methods.end());
    if (methods.empty()) throw ArgumentError("attribution map needs at least one method");
    AttributionMap m;
    m.degenerate = !(max_value(raw) > min_value(raw));
    m.grid = minmax_normalize(raw);
    m.methods = std::move(methods);
    m.fusion_op = op;
    return m;
  }

  std::size_t side() const { return grid.dim(0); }

  // "rollout+lrp" style key, methods in canonical order.
  std::string combo_name() const {
    std::string out;
    for (MethodId mid : methods) {
      if (!out.empty()) out += "+";
      out += method_name(mid);
    }
    return out;
  }
};

}  // namespace vitmix
