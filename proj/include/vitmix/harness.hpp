#pragma once

// End-to-end pipeline: dataset ingestion, per-image attribution, fusion
// sweeps, Otsu scoring, leaderboard tables and heatmap rendering.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vitmix/attribution.hpp"
#include "vitmix/errors.hpp"
#include "vitmix/fusion.hpp"
#include "vitmix/persist.hpp"
#include "vitmix/png_io.hpp"
#include "vitmix/segmentation.hpp"
#include "vitmix/vit.hpp"

namespace vitmix {

// ------------------------------------------------------------ configuration

enum class TargetPolicy { Predicted, Label };

struct HarnessConfig {
  ViTConfig model;
  double confidence_min = 0.85;
  std::vector<std::size_t> k_values{1, 2, 3};
  std::vector<FusionOp> ops{FusionOp::GeometricMean};
  std::size_t rollout_start = 1;
  std::size_t lrp_start = 0;
  std::size_t otsu_bins = kDefaultOtsuBins;
  TargetPolicy target = TargetPolicy::Predicted;

  void validate() const {
    model.validate();
    if (!(confidence_min >= 0.0 && confidence_min <= 1.0)) throw ConfigError("confidence_min must lie in [0, 1]");
    if (rollout_start >= model.depth) throw ConfigError("rollout_start must be below depth");
    if (lrp_start >= model.depth) throw ConfigError("lrp_start must be below depth");
    if (otsu_bins < 2) throw ConfigError("otsu_bins must be at least 2");
    if (ops.empty()) throw ConfigError("at least one fusion op is required");
    if (k_values.empty()) throw ConfigError("at least one combination size is required");
    for (std::size_t k : k_values)
      if (k < 1 || k > 4) throw ConfigError("combination sizes must lie in 1..4");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end)
    throw ConfigError("invalid value '" + std::string(value) + "' for '" + std::string(key) + "'");
  return out;
}

}  // namespace detail

inline void apply_setting(HarnessConfig& cfg, std::string_view key, std::string_view raw) {
  const std::string value = detail::trim(raw);
  auto count = [&] { return detail::parse_number<std::size_t>(key, value); };
  if (key == "image_size") cfg.model.image_size = count();
  else if (key == "patch_size") cfg.model.patch_size = count();
  else if (key == "embed_dim") cfg.model.embed_dim = count();
  else if (key == "depth") cfg.model.depth = count();
  else if (key == "heads") cfg.model.heads = count();
  else if (key == "mlp_ratio") cfg.model.mlp_ratio = count();
  else if (key == "num_classes") cfg.model.num_classes = count();
  else if (key == "seed") cfg.model.seed = detail::parse_number<std::uint64_t>(key, value);
  else if (key == "confidence_min") cfg.confidence_min = detail::parse_number<double>(key, value);
  else if (key == "rollout_start") cfg.rollout_start = count();
  else if (key == "lrp_start") cfg.lrp_start = count();
  else if (key == "otsu_bins") cfg.otsu_bins = count();
  else if (key == "target") {
    if (value == "predicted") cfg.target = TargetPolicy::Predicted;
    else if (value == "label") cfg.target = TargetPolicy::Label;
    else throw ConfigError("target must be 'predicted' or 'label'");
  } else if (key == "ops") {
    cfg.ops.clear();
    for (const std::string& name : detail::split(value, ',')) {
      const auto op = parse_fusion_op(name);
      if (!op) throw ConfigError("unknown fusion op '" + name + "'");
      cfg.ops.push_back(*op);
    }
  } else if (key == "k") {
    cfg.k_values.clear();
    for (const std::string& k : detail::split(value, ',')) cfg.k_values.push_back(detail::parse_number<std::size_t>(key, k));
  } else {
    throw ConfigError("unknown setting '" + std::string(key) + "'");
  }
}

// Flat `key = value` lines; `#` starts a comment.
inline std::map<std::string, std::string> read_settings_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::map<std::string, std::string> out;
  std::string line;
  for (std::size_t n = 1; std::getline(f, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key = value");
    out[detail::trim(std::string_view(line).substr(0, eq))] = detail::trim(std::string_view(line).substr(eq + 1));
  }
  return out;
}

inline HarnessConfig config_from_settings(const std::map<std::string, std::string>& settings) {
  HarnessConfig cfg;
  for (const auto& [k, v] : settings) apply_setting(cfg, k, v);
  cfg.validate();
  return cfg;
}

// ------------------------------------------------------------ dataset

struct ManifestEntry {
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
  std::size_t label = 0;
  std::string stem;
  Tensor image;  // [S x S x 3] in [0, 1], resized to the model input
  BinaryMask mask;  // S x S
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
};

// Reads root/manifest.csv (header image,mask,label), decodes and resizes every
// image and mask to image_size x image_size.
inline DatasetManifest ingest(const std::filesystem::path& root, std::size_t image_size) {
  const auto manifest_path = root / "manifest.csv";
  std::ifstream f(manifest_path);
  if (!f) throw IngestionError("missing manifest '" + manifest_path.string() + "'");
  DatasetManifest m;
  m.root = root;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (detail::trim(line).empty()) continue;
    const auto cols = detail::split(line, ',');
    if (n == 1 && cols.size() >= 1 && cols[0] == "image") continue;
    if (cols.size() != 3)
      throw IngestionError(manifest_path.string() + ":" + std::to_string(n) + ": expected image,mask,label");
    ManifestEntry e;
    e.image_path = cols[0];
    e.mask_path = cols[1];
    try {
      e.label = detail::parse_number<std::size_t>("label", cols[2]);
    } catch (const ConfigError&) {
      throw IngestionError(manifest_path.string() + ":" + std::to_string(n) + ": bad label '" + cols[2] + "'");
    }
    e.stem = std::filesystem::path(e.image_path).stem().string();
    const auto image_file = root / e.image_path;
    const auto mask_file = root / e.mask_path;
    if (!std::filesystem::exists(image_file)) throw IngestionError("missing image file '" + image_file.string() + "'");
    if (!std::filesystem::exists(mask_file)) throw IngestionError("missing mask file '" + mask_file.string() + "'");
    const Image8 img = read_png(image_file, 3);
    const Image8 mask = read_png(mask_file, 1);
    if (img.width != mask.width || img.height != mask.height)
      throw IngestionError("mask '" + mask_file.string() + "' does not match image size");
    e.image = resize_image(image_to_tensor(img), image_size, image_size);
    e.mask = resize_mask(image_to_mask(mask), image_size, image_size);
    m.entries.push_back(std::move(e));
  }
  return m;
}

// n images of one bright axis-aligned rectangle on dark noise. The mask is
// the exact rectangle; the label is the quadrant of its centre
// (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
inline void synth_dataset(const std::filesystem::path& dir, std::size_t n, std::uint64_t seed,
                          std::size_t image_size = 32) {
  if (n == 0) throw ArgumentError("synth_dataset: n must be at least 1");
  if (image_size < 8) throw ArgumentError("synth_dataset: image_size must be at least 8");
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  SeededRng rng(seed);
  std::ostringstream manifest;
  manifest << "image,mask,label\n";
  const std::size_t s = image_size;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t rw = s / 4 + rng.below(s / 4 + 1);
    const std::size_t rh = s / 4 + rng.below(s / 4 + 1);
    const std::size_t x0 = rng.below(s - rw + 1);
    const std::size_t y0 = rng.below(s - rh + 1);
    std::array<double, 3> color{};
    for (double& c : color) c = 0.75 + 0.25 * rng.uniform();

    Image8 img{s, s, 3, std::vector<std::uint8_t>(s * s * 3)};
    BinaryMask mask(s, s);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const bool inside = y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw;
        mask.set(y, x, inside);
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = inside ? color[c] : 0.25 * rng.uniform();
          img.pixels[(y * s + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
      }
    const bool right = 2 * x0 + rw >= s;
    const bool bottom = 2 * y0 + rh >= s;
    const std::size_t label = (bottom ? 2 : 0) + (right ? 1 : 0);

    char name[32];
    std::snprintf(name, sizeof name, "img_%04zu.png", i);
    write_png(dir / "images" / name, img);
    write_png(dir / "masks" / name, mask_to_image(mask));
    manifest << "images/" << name << ",masks/" << name << "," << label << "\n";
  }
  std::ofstream f(dir / "manifest.csv", std::ios::trunc);
  if (!f) throw IoError("cannot write manifest in '" + dir.string() + "'");
  f << manifest.str();
}

// ------------------------------------------------------------ attribution

struct BaseMaps {
  std::array<AttributionMap, 4> maps;  // indexed by MethodId
  Prediction prediction;
  std::size_t class_index = 0;

  const AttributionMap& get(MethodId m) const { return maps[static_cast<std::size_t>(m)]; }
};

inline BaseMaps compute_base_maps(const ViTParams& params, const ForwardTrace& fwd, const BackwardTrace& back,
                                  const HarnessConfig& cfg) {
  const std::size_t g = params.config.grid();
  BaseMaps out;
  out.prediction = predict(fwd);
  out.class_index = back.class_index;
  out.maps[static_cast<std::size_t>(MethodId::Rollout)] = attention_rollout(fwd.attn, cfg.rollout_start);
  out.maps[static_cast<std::size_t>(MethodId::Saliency)] = saliency_map(back.input_grad, g);
  out.maps[static_cast<std::size_t>(MethodId::GradCAM)] =
      grad_cam_vit(fwd.last_block_tokens, back.last_block_tokens_grad, g);
  out.maps[static_cast<std::size_t>(MethodId::LRP)] =
      lrp_relevance(fwd, back, params, back.class_index, cfg.lrp_start);
  return out;
}

inline BaseMaps compute_base_maps(const ViTParams& params, const Tensor& image, std::optional<std::size_t> target,
                                  const HarnessConfig& cfg) {
  const ForwardTrace fwd = forward(params, image);
  const std::size_t cls = target ? *target : predict(fwd).class_index;
  return compute_base_maps(params, fwd, backward(params, fwd, cls), cfg);
}

// Maps from an exported trace dump. Without "attn_relevance" the LRP map
// weights attention gradients by the attention maps themselves.
inline BaseMaps compute_base_maps(const TraceDump& dump, const HarnessConfig& cfg) {
  const std::size_t T = dump.attn.dim(2);
  const std::size_t g = detail::grid_side_for_tokens(T);
  const std::size_t L = dump.attn.dim(0);
  if (cfg.rollout_start >= L || cfg.lrp_start >= L) throw ConfigError("start layer beyond dump depth");
  BaseMaps out;
  ForwardTrace probe;
  probe.probs = softmax_rows(dump.logits);
  out.prediction = predict(probe);
  out.class_index = out.prediction.class_index;
  out.maps[static_cast<std::size_t>(MethodId::Rollout)] = attention_rollout(dump.attn, cfg.rollout_start);
  out.maps[static_cast<std::size_t>(MethodId::Saliency)] = saliency_map(dump.input_grad, g);
  out.maps[static_cast<std::size_t>(MethodId::GradCAM)] = grad_cam_vit(dump.last_act, dump.last_act_grad, g);
  const Tensor& relevance = dump.attn_relevance ? *dump.attn_relevance : dump.attn;
  out.maps[static_cast<std::size_t>(MethodId::LRP)] = AttributionMap::from_raw(
      detail::cls_patch_row(lrp_aggregate(dump.attn_grad, relevance, cfg.lrp_start)), {MethodId::LRP});
  return out;
}

inline AttributionMap combine(const BaseMaps& base, const MethodCombo& combo) {
  std::vector<AttributionMap> parts;
  for (MethodId m : combo.methods) parts.push_back(base.get(m));
  return mix(parts, combo.op);
}

// ------------------------------------------------------------ rendering

// Piecewise-linear "jet": 0 -> (0, 0, 0.5) dark blue, 0.5 -> green-ish,
// 1 -> (0.5, 0, 0) dark red.
inline std::array<double, 3> jet_color(double v) {
  const double t = std::clamp(v, 0.0, 1.0);
  auto ch = [t](double centre) { return std::clamp(1.5 - std::abs(4.0 * t - centre), 0.0, 1.0); };
  return {ch(3.0), ch(2.0), ch(1.0)};
}

inline constexpr double kHeatmapAlpha = 0.5;

// Heat upsampled to the image size, colour-mapped, alpha-blended 50/50 over
// the image and written as RGB PNG.
inline Image8 render_heatmap(const AttributionMap& map, const Tensor& image, const std::filesystem::path& out_path) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("render_heatmap expects an [H x W x 3] image");
  const std::size_t h = image.dim(0), w = image.dim(1);
  const Tensor heat = bilinear_upsample(map.grid, h, w);
  Tensor blended({h, w, 3});
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto rgb = jet_color(heat[i]);
    for (std::size_t c = 0; c < 3; ++c)
      blended[i * 3 + c] = kHeatmapAlpha * rgb[c] + (1.0 - kHeatmapAlpha) * image[i * 3 + c];
  }
  Image8 out = tensor_to_image(blended);
  write_png(out_path, out);
  return out;
}

inline std::string heatmap_file_name(const std::string& stem, const MethodCombo& combo) {
  return stem + "." + combo.name() + "." + std::string(fusion_op_name(combo.op)) + ".png";
}

// ------------------------------------------------------------ leaderboard

struct ModelSource {
  std::optional<ViTParams> toy;
  std::optional<std::filesystem::path> dump_dir;  // <dir>/<image-stem>.vmix

  static ModelSource from_params(ViTParams p) { return {std::move(p), std::nullopt}; }
  static ModelSource from_dumps(std::filesystem::path dir) { return {std::nullopt, std::move(dir)}; }
};

struct ImageResult {
  std::string stem;
  std::size_t class_index = 0;
  double confidence = 0.0;
  bool scored = false;
  std::vector<SegmentationScores> scores;  // one per combo, when scored
};

struct LeaderboardRow {
  MethodCombo combo;
  double mean_jaccard = 0.0;  // percentages
  double mean_f1 = 0.0;
  double mean_pixel_accuracy = 0.0;
  std::size_t images_scored = 0;
};

struct LeaderboardResult {
  std::vector<LeaderboardRow> rows;
  std::vector<ImageResult> images;  // manifest order
};

// Singles first, then 2-way, then 3-way (per op), lexicographic within each.
inline std::vector<MethodCombo> leaderboard_combos(const HarnessConfig& cfg) {
  return enumerate_combos(cfg.k_values, cfg.ops);
}

inline LeaderboardResult run_leaderboard(const DatasetManifest& manifest, const ModelSource& source,
                                         std::span<const MethodCombo> combos, const HarnessConfig& cfg,
                                         const std::optional<std::filesystem::path>& render_dir = std::nullopt) {
  if (!source.toy && !source.dump_dir) throw ConfigError("no model source given");
  if (render_dir) std::filesystem::create_directories(*render_dir);
  LeaderboardResult result;
  std::vector<std::array<double, 3>> totals(combos.size(), {0.0, 0.0, 0.0});
  std::size_t scored = 0;

  for (const ManifestEntry& entry : manifest.entries) {
    BaseMaps base;
    if (source.toy) {
      std::optional<std::size_t> target;
      if (cfg.target == TargetPolicy::Label) {
        if (entry.label >= source.toy->config.num_classes)
          throw IngestionError("label " + std::to_string(entry.label) + " of '" + entry.image_path +
                               "' exceeds the model's classes");
        target = entry.label;
      }
      base = compute_base_maps(*source.toy, entry.image, target, cfg);
    } else {
      base = compute_base_maps(load_trace_dump(*source.dump_dir / (entry.stem + ".vmix")), cfg);
    }
    ImageResult ir;
    ir.stem = entry.stem;
    ir.class_index = base.class_index;
    ir.confidence = base.prediction.confidence;
    ir.scored = base.prediction.confidence >= cfg.confidence_min;
    if (ir.scored) {
      ++scored;
      for (std::size_t c = 0; c < combos.size(); ++c) {
        const AttributionMap fused = combine(base, combos[c]);
        const BinaryMask pred = binarize(fused, entry.mask.height(), entry.mask.width(), cfg.otsu_bins);
        const SegmentationScores s = score(pred, entry.mask);
        ir.scores.push_back(s);
        totals[c][0] += s.jaccard;
        totals[c][1] += s.f1;
        totals[c][2] += s.pixel_accuracy;
        if (render_dir) render_heatmap(fused, entry.image, *render_dir / heatmap_file_name(entry.stem, combos[c]));
      }
    }
    result.images.push_back(std::move(ir));
  }
  if (scored == 0)
    throw EmptyAfterFilterError("no qualifying images: none of " + std::to_string(manifest.entries.size()) +
                                " reached confidence " + std::to_string(cfg.confidence_min));
  for (std::size_t c = 0; c < combos.size(); ++c) {
    const double n = static_cast<double>(scored);
    result.rows.push_back(
        {combos[c], 100.0 * totals[c][0] / n, 100.0 * totals[c][1] / n, 100.0 * totals[c][2] / n, scored});
  }
  return result;
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// combo,op,jaccard,f1,pixel_accuracy,images_scored (percentages, 6 decimals).
inline std::string leaderboard_csv(std::span<const LeaderboardRow> rows) {
  std::string out = "combo,op,jaccard,f1,pixel_accuracy,images_scored\n";
  for (const LeaderboardRow& r : rows) {
    out += r.combo.name() + "," + std::string(fusion_op_name(r.combo.op)) + "," + format_fixed(r.mean_jaccard, 6) +
           "," + format_fixed(r.mean_f1, 6) + "," + format_fixed(r.mean_pixel_accuracy, 6) + "," +
           std::to_string(r.images_scored) + "\n";
  }
  return out;
}

// One table per fusion op, grouped into single / two-way / three-way /
// four-way sections.
inline std::string leaderboard_markdown(std::span<const LeaderboardRow> rows) {
  static constexpr std::array<const char*, 5> kSection = {"", "Single Methods", "Two-way Methods",
                                                          "Three-way Methods", "Four-way Methods"};
  std::string out;
  std::optional<FusionOp> current_op;
  std::size_t current_k = 0;
  for (const LeaderboardRow& r : rows) {
    if (!current_op || *current_op != r.combo.op) {
      if (current_op) out += "\n";
      out += "### " + std::string(fusion_op_name(r.combo.op)) + "\n\n";
      out += "| Method | Jaccard Index (IoU) | F1 Score | Pixel Accuracy |\n";
      out += "|:--|--:|--:|--:|\n";
      current_op = r.combo.op;
      current_k = 0;
    }
    const std::size_t k = r.combo.methods.size();
    if (k != current_k) {
      out += "| **" + std::string(kSection[std::min<std::size_t>(k, 4)]) + "** | | | |\n";
      current_k = k;
    }
    std::string name;
    for (MethodId m : r.combo.methods) name += (name.empty() ? "" : " + ") + std::string(method_name(m));
    out += "| " + name + " | " + format_fixed(r.mean_jaccard, 2) + " | " + format_fixed(r.mean_f1, 2) + " | " +
           format_fixed(r.mean_pixel_accuracy, 2) + " |\n";
  }
  return out;
}

// Per-image scores in manifest order: image,combo,op,jaccard,f1,pixel_accuracy.
inline std::string per_image_csv(const LeaderboardResult& result, std::span<const MethodCombo> combos) {
  std::string out = "image,class,confidence,combo,op,jaccard,f1,pixel_accuracy\n";
  for (const ImageResult& ir : result.images) {
    if (!ir.scored) continue;
    for (std::size_t c = 0; c < combos.size(); ++c)
      out += ir.stem + "," + std::to_string(ir.class_index) + "," + format_fixed(ir.confidence, 6) + "," +
             combos[c].name() + "," + std::string(fusion_op_name(combos[c].op)) + "," +
             format_fixed(ir.scores[c].jaccard, 9) + "," + format_fixed(ir.scores[c].f1, 9) + "," +
             format_fixed(ir.scores[c].pixel_accuracy, 9) + "\n";
  }
  return out;
}

// combo,pairs,distinct,collision_ratio
inline std::string gain_csv_header() { return "combo,pairs,distinct,collision_ratio\n"; }

inline std::string gain_csv_row(const std::string& combo, std::uint64_t pairs, std::uint64_t distinct,
                                double collision_ratio) {
  return combo + "," + std::to_string(pairs) + "," + std::to_string(distinct) + "," +
         format_fixed(collision_ratio, 9) + "\n";
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace vitmix
