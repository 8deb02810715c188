#pragma once

// Otsu binarization of heatmaps and the Jaccard / F1 / pixel-accuracy scores.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vitmix/attribution_map.hpp"
#include "vitmix/errors.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t height, std::size_t width, bool fill = false)
      : height_(height), width_(width), pixels_(height * width, fill ? 1 : 0) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return pixels_.size(); }

  bool at(std::size_t y, std::size_t x) const noexcept { return pixels_[y * width_ + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v) noexcept { pixels_[y * width_ + x] = v ? 1 : 0; }
  bool operator[](std::size_t i) const noexcept { return pixels_[i] != 0; }
  void set(std::size_t i, bool v) noexcept { pixels_[i] = v ? 1 : 0; }

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(pixels_.begin(), pixels_.end(), std::uint8_t{1}));
  }

  bool same_shape(const BinaryMask& o) const noexcept { return height_ == o.height_ && width_ == o.width_; }
  bool operator==(const BinaryMask&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> pixels_;
};

struct SegmentationScores {
  double jaccard = 0.0;
  double f1 = 0.0;
  double pixel_accuracy = 0.0;
};

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline constexpr std::size_t kDefaultOtsuBins = 256;

// Equal-width histogram of [0, 1]; out-of-range values are clamped.
inline std::vector<std::uint64_t> unit_histogram(std::span<const double> values, std::size_t bins) {
  if (bins < 2) throw ArgumentError("histogram needs at least 2 bins");
  std::vector<std::uint64_t> counts(bins, 0);
  for (double v : values) {
    const double c = std::clamp(v, 0.0, 1.0);
    const auto b = std::min(static_cast<std::size_t>(c * static_cast<double>(bins)), bins - 1);
    ++counts[b];
  }
  return counts;
}

// Bin edge k (1..bins-1) splitting the histogram into [0, k) and [k, bins)
// with maximal between-class variance; the lowest k wins ties. nullopt when
// no split leaves both classes populated.
//
// With n0/n1 the class counts, s0 the index-weighted count of the lower class
// and N, S the totals, N^2 * sigma_b^2 = (s0 N - S n0)^2 / (n0 n1). The
// numerator terms are exact integers.
inline std::optional<std::size_t> otsu_bin_edge(std::span<const std::uint64_t> counts) {
  using i128 = __int128;
  i128 total = 0, weighted = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    total += counts[i];
    weighted += static_cast<i128>(counts[i]) * static_cast<i128>(i);
  }
  std::optional<std::size_t> best;
  long double best_score = -1.0L;
  i128 n0 = 0, s0 = 0;
  for (std::size_t k = 1; k < counts.size(); ++k) {
    n0 += counts[k - 1];
    s0 += static_cast<i128>(counts[k - 1]) * static_cast<i128>(k - 1);
    const i128 n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const auto diff = static_cast<long double>(s0 * total - weighted * n0);
    const long double score = diff * diff / (static_cast<long double>(n0) * static_cast<long double>(n1));
    if (score > best_score) {
      best_score = score;
      best = k;
    }
  }
  return best;
}

// Threshold value k / bins; nullopt for degenerate (single-bin) input.
inline std::optional<double> otsu_threshold(std::span<const double> values, std::size_t bins = kDefaultOtsuBins) {
  const auto hist = unit_histogram(values, bins);
  const auto edge = otsu_bin_edge(hist);
  if (!edge) return std::nullopt;
  return static_cast<double>(*edge) / static_cast<double>(bins);
}

inline std::optional<double> otsu_threshold(const Tensor& values, std::size_t bins = kDefaultOtsuBins) {
  return otsu_threshold(values.values(), bins);
}

// Upsample to pixel resolution, Otsu at pixel level, foreground = value >= t.
// Degenerate maps (flagged, or a single populated histogram bin) give an
// empty mask.
inline BinaryMask binarize(const AttributionMap& map, std::size_t out_h, std::size_t out_w,
                           std::size_t bins = kDefaultOtsuBins) {
  BinaryMask mask(out_h, out_w);
  if (map.degenerate) return mask;
  const Tensor pixels = bilinear_upsample(map.grid, out_h, out_w);
  const auto t = otsu_threshold(pixels, bins);
  if (!t) return mask;
  for (std::size_t i = 0; i < pixels.size(); ++i) mask.set(i, pixels[i] >= *t);
  return mask;
}

inline ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& truth) {
  if (!pred.same_shape(truth))
    throw DimensionError("mask shape mismatch: " + std::to_string(pred.height()) + "x" +
                         std::to_string(pred.width()) + " vs " + std::to_string(truth.height()) + "x" +
                         std::to_string(truth.width()));
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i], t = truth[i];
    if (p && t)
      ++c.tp;
    else if (p)
      ++c.fp;
    else if (t)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

// Both masks empty counts as a perfect match for jaccard and f1.
inline SegmentationScores score(const BinaryMask& pred, const BinaryMask& truth) {
  const ConfusionCounts c = confusion(pred, truth);
  SegmentationScores s;
  const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn),
             tn = static_cast<double>(c.tn);
  const double uni = tp + fp + fn;
  s.jaccard = uni > 0.0 ? tp / uni : 1.0;
  s.f1 = uni > 0.0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 1.0;
  const double total = tp + fp + fn + tn;
  s.pixel_accuracy = total > 0.0 ? (tp + tn) / total : 1.0;
  return s;
}

}  // namespace vitmix
