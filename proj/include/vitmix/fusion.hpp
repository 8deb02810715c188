#pragma once

// Mixing operators over attribution maps and the k-way combination sweep.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "vitmix/attribution_map.hpp"
#include "vitmix/errors.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

struct MethodCombo {
  std::vector<MethodId> methods;  // canonical order, 1..4 distinct
  FusionOp op = FusionOp::GeometricMean;

  std::string name() const {
    std::string out;
    for (MethodId m : methods) {
      if (!out.empty()) out += "+";
      out += method_name(m);
    }
    return out;
  }

  bool operator==(const MethodCombo&) const = default;
};

// Elementwise fusion before re-normalization. Inputs are clamped to [0, 1].
// Each cell's operands are sorted before reducing, so the result is bitwise
// independent of input order.
inline Tensor fuse_raw(std::span<const Tensor> grids, FusionOp op) {
  if (grids.empty()) throw ArgumentError("fusion needs at least one map");
  for (const Tensor& g : grids)
    if (g.shape() != grids.front().shape())
      throw DimensionError("fusion shape mismatch: " + shape_string(grids.front().shape()) + " vs " +
                           shape_string(g.shape()));
  const std::size_t n = grids.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor out(grids.front().shape());
  std::vector<double> cell(n);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < n; ++k) cell[k] = std::clamp(grids[k][i], 0.0, 1.0);
    std::sort(cell.begin(), cell.end());
    double acc = 0.0;
    switch (op) {
      case FusionOp::Multiply:
      case FusionOp::GeometricMean:
        acc = 1.0;
        for (double v : cell) acc *= v;
        if (op == FusionOp::GeometricMean) {
          if (n == 2)
            acc = std::sqrt(acc);
          else if (n == 3)
            acc = std::cbrt(acc);
          else if (n > 1)
            acc = std::pow(acc, inv_n);
        }
        break;
      case FusionOp::Average:
        for (double v : cell) acc += v;
        acc *= inv_n;
        break;
    }
    out[i] = acc;
  }
  return out;
}

inline Tensor fuse_raw(std::initializer_list<Tensor> grids, FusionOp op) {
  return fuse_raw(std::span<const Tensor>(grids.begin(), grids.size()), op);
}

inline AttributionMap mix(std::span<const AttributionMap> maps, FusionOp op) {
  if (maps.empty()) throw ArgumentError("mix: empty map list");
  if (maps.size() == 1) return maps.front();
  std::vector<Tensor> grids;
  std::vector<MethodId> methods;
  for (const AttributionMap& m : maps) {
    grids.push_back(m.grid);
    methods.insert(methods.end(), m.methods.begin(), m.methods.end());
  }
  return AttributionMap::from_raw(fuse_raw(grids, op), std::move(methods), op);
}

namespace detail {

inline void combinations(std::size_t n, std::size_t k, std::size_t first, std::vector<std::size_t>& current,
                         std::vector<std::vector<std::size_t>>& out) {
  if (current.size() == k) {
    out.push_back(current);
    return;
  }
  for (std::size_t i = first; i < n; ++i) {
    current.push_back(i);
    combinations(n, k, i + 1, current, out);
    current.pop_back();
  }
}

}  // namespace detail

// For each op (in the given order), every k in ascending order, and every
// k-subset of the four methods in lexicographic order.
inline std::vector<MethodCombo> enumerate_combos(std::span<const std::size_t> k_values,
                                                 std::span<const FusionOp> ops) {
  std::vector<std::size_t> ks(k_values.begin(), k_values.end());
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  for (std::size_t k : ks)
    if (k < 1 || k > kAllMethods.size())
      throw ArgumentError("combination size " + std::to_string(k) + " outside 1..4");
  std::vector<MethodCombo> out;
  for (FusionOp op : ops)
    for (std::size_t k : ks) {
      std::vector<std::vector<std::size_t>> subsets;
      std::vector<std::size_t> current;
      detail::combinations(kAllMethods.size(), k, 0, current, subsets);
      for (const auto& subset : subsets) {
        MethodCombo combo{{}, op};
        for (std::size_t i : subset) combo.methods.push_back(kAllMethods[i]);
        out.push_back(std::move(combo));
      }
    }
  return out;
}

inline std::vector<MethodCombo> enumerate_combos(std::initializer_list<std::size_t> k_values,
                                                 std::initializer_list<FusionOp> ops) {
  return enumerate_combos(std::span<const std::size_t>(k_values.begin(), k_values.size()),
                          std::span<const FusionOp>(ops.begin(), ops.size()));
}

}  // namespace vitmix
