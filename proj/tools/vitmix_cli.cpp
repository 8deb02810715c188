// vitmix command line: toy models, synthetic data, per-image attribution,
// fusion, scoring, leaderboards, heatmaps and collision gains.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vitmix/vitmix.hpp"

namespace fs = std::filesystem;
using namespace vitmix;

namespace {

struct Globals {
  std::string config_file;
  std::vector<std::string> sets;
};

HarnessConfig build_config(const Globals& g, const std::map<std::string, std::string>& flag_settings) {
  std::map<std::string, std::string> settings;
  if (!g.config_file.empty()) settings = read_settings_file(g.config_file);
  for (const std::string& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    settings[detail::trim(std::string_view(kv).substr(0, eq))] = detail::trim(std::string_view(kv).substr(eq + 1));
  }
  for (const auto& [k, v] : flag_settings) settings[k] = v;
  return config_from_settings(settings);
}

std::vector<MethodId> parse_methods(const std::vector<std::string>& names) {
  if (names.empty() || (names.size() == 1 && names[0] == "all")) return {kAllMethods.begin(), kAllMethods.end()};
  std::vector<MethodId> out;
  for (const std::string& n : names) {
    const auto m = parse_method(n);
    if (!m) throw ConfigError("unknown method '" + n + "'");
    out.push_back(*m);
  }
  return out;
}

FusionOp parse_op_or_throw(const std::string& name) {
  const auto op = parse_fusion_op(name);
  if (!op) throw ConfigError("unknown fusion op '" + name + "'");
  return *op;
}

Tensor load_image(const fs::path& path, std::size_t size) {
  return resize_image(image_to_tensor(read_png(path, 3)), size, size);
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-")
    std::cout << text;
  else
    write_text_file(path, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribution fusion toolkit for vision transformers"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_file, "Flat key = value settings file");
  app.add_option("--set", g.sets, "Override one setting (key=value), repeatable");

  std::map<std::string, std::string> flag_settings;
  auto setting_flag = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(
        flag, [&flag_settings, key](const std::string& v) { flag_settings[key] = v; }, help);
  };

  // gen-toy
  auto* gen = app.add_subcommand("gen-toy", "Initialize a seeded toy ViT and save its weights");
  std::string gen_out;
  gen->add_option("--out", gen_out, "Model file")->required();
  setting_flag(gen, "--seed", "seed", "Model seed");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Generate the rectangle dataset");
  std::string synth_out;
  std::size_t synth_n = 16;
  std::uint64_t synth_seed = 0;
  std::size_t synth_size = 32;
  synth->add_option("--out", synth_out, "Dataset directory")->required();
  synth->add_option("-n,--count", synth_n, "Number of images")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Dataset seed")->capture_default_str();
  synth->add_option("--size", synth_size, "Image side in pixels")->capture_default_str();

  // attribute
  auto* attr = app.add_subcommand("attribute", "Compute base attribution maps for one image");
  std::string attr_model, attr_dump, attr_image, attr_out, attr_save_dump;
  std::optional<std::size_t> attr_class;
  std::vector<std::string> attr_methods;
  auto* attr_model_opt = attr->add_option("--model", attr_model, "Model file");
  auto* attr_dump_opt = attr->add_option("--dump", attr_dump, "Trace dump instead of a model");
  attr_model_opt->excludes(attr_dump_opt);
  attr->add_option("--image", attr_image, "Input PNG (with --model)");
  attr->add_option("--class", attr_class, "Target class (default: predicted)");
  attr->add_option("--method", attr_methods, "rollout|saliency|gradcam|lrp|all, repeatable");
  attr->add_option("--out-dir", attr_out, "Directory for <stem>.<method>.vmix maps")->required();
  attr->add_option("--save-dump", attr_save_dump, "Also write the trace dump (with --model)");

  // fuse
  auto* fuse = app.add_subcommand("fuse", "Fuse attribution maps");
  std::vector<std::string> fuse_maps;
  std::string fuse_op = "geomean", fuse_out;
  fuse->add_option("--map", fuse_maps, "Map file, repeatable")->required();
  fuse->add_option("--op", fuse_op, "multiply|geomean|average")->capture_default_str();
  fuse->add_option("--out", fuse_out, "Fused map file")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Binarize a map with Otsu and score it against a mask");
  std::string eval_map, eval_mask;
  eval->add_option("--map", eval_map, "Map file")->required();
  eval->add_option("--mask", eval_mask, "Ground-truth mask PNG")->required();
  setting_flag(eval, "--bins", "otsu_bins", "Otsu histogram bins");

  // leaderboard
  auto* board = app.add_subcommand("leaderboard", "Score every method combination over a dataset");
  std::string board_data, board_model, board_dumps, board_csv, board_md, board_render, board_per_image;
  board->add_option("--data", board_data, "Dataset directory")->required();
  auto* board_model_opt = board->add_option("--model", board_model, "Model file");
  auto* board_dumps_opt = board->add_option("--dumps", board_dumps, "Directory of <stem>.vmix trace dumps");
  board_model_opt->excludes(board_dumps_opt);
  board->add_option("--csv", board_csv, "CSV output (default stdout)");
  board->add_option("--markdown", board_md, "Markdown table output");
  board->add_option("--per-image", board_per_image, "Per-image score CSV");
  board->add_option("--render-dir", board_render, "Write heatmaps for every scored image and combo");
  setting_flag(board, "--confidence-min", "confidence_min", "Confidence filter");
  setting_flag(board, "--ops", "ops", "Comma-separated fusion ops");
  setting_flag(board, "--k", "k", "Comma-separated combination sizes");

  // render
  auto* render = app.add_subcommand("render", "Blend a map over its image as a PNG heatmap");
  std::string render_map, render_image, render_out;
  render->add_option("--map", render_map, "Map file")->required();
  render->add_option("--image", render_image, "Input PNG")->required();
  render->add_option("--out", render_out, "Output PNG")->required();

  // gain
  auto* gain = app.add_subcommand("gain", "Collision counts of pairwise geometric means");
  std::vector<std::string> gain_maps;
  std::string gain_model, gain_image, gain_out;
  std::size_t gain_q = kDefaultQuantization;
  std::uint64_t gain_seed = 0;
  auto* gain_maps_opt = gain->add_option("--maps", gain_maps, "Two map files")->expected(2);
  auto* gain_model_opt = gain->add_option("--model", gain_model, "Model file (all method pairs)");
  gain_maps_opt->excludes(gain_model_opt);
  gain->add_option("--image", gain_image, "Input PNG (with --model)");
  gain->add_option("--q", gain_q, "Quantization levels")->capture_default_str();
  gain->add_option("--sample-seed", gain_seed, "Seed for sampled pairs on large grids")->capture_default_str();
  gain->add_option("--out", gain_out, "CSV output (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? exit_codes::kOk : exit_codes::kConfig;
  }

  try {
    const HarnessConfig cfg = build_config(g, flag_settings);

    if (*gen) {
      save_params(gen_out, init_params(cfg.model));
      std::cout << "wrote " << gen_out << "\n";

    } else if (*synth) {
      synth_dataset(synth_out, synth_n, synth_seed, synth_size);
      std::cout << "wrote " << synth_n << " images to " << synth_out << "\n";

    } else if (*attr) {
      const std::vector<MethodId> methods = parse_methods(attr_methods);
      fs::create_directories(attr_out);
      BaseMaps base;
      std::string stem;
      if (!attr_dump.empty()) {
        if (attr_class) throw ConfigError("--class cannot be used with --dump");
        base = compute_base_maps(load_trace_dump(attr_dump), cfg);
        stem = fs::path(attr_dump).stem().string();
      } else {
        if (attr_model.empty() || attr_image.empty()) throw ConfigError("attribute needs --model and --image, or --dump");
        const ViTParams params = load_params(attr_model);
        const Tensor image = load_image(attr_image, params.config.image_size);
        const ForwardTrace fwd = forward(params, image);
        const std::size_t cls = attr_class ? *attr_class : predict(fwd).class_index;
        if (cls >= params.config.num_classes) throw ConfigError("--class exceeds the model's classes");
        const BackwardTrace back = backward(params, fwd, cls);
        base = compute_base_maps(params, fwd, back, cfg);
        if (!attr_save_dump.empty()) save_trace_dump(attr_save_dump, make_trace_dump(params, fwd, back));
        stem = fs::path(attr_image).stem().string();
      }
      std::cout << "class " << base.class_index << " predicted " << base.prediction.class_index << " confidence "
                << format_fixed(base.prediction.confidence, 6) << "\n";
      for (MethodId m : methods) {
        const fs::path out = fs::path(attr_out) / (stem + "." + std::string(method_name(m)) + ".vmix");
        save_map(out, base.get(m));
        std::cout << "wrote " << out.string() << (base.get(m).degenerate ? " (degenerate)" : "") << "\n";
      }

    } else if (*fuse) {
      const FusionOp op = parse_op_or_throw(fuse_op);
      std::vector<AttributionMap> maps;
      for (const std::string& p : fuse_maps) maps.push_back(load_map(p));
      const AttributionMap fused = mix(maps, op);
      save_map(fuse_out, fused);
      std::cout << "wrote " << fuse_out << " (" << fused.combo_name() << ")\n";

    } else if (*eval) {
      const AttributionMap map = load_map(eval_map);
      const BinaryMask truth = image_to_mask(read_png(eval_mask, 1));
      const SegmentationScores s = score(binarize(map, truth.height(), truth.width(), cfg.otsu_bins), truth);
      std::cout << "jaccard,f1,pixel_accuracy\n"
                << format_fixed(s.jaccard, 9) << "," << format_fixed(s.f1, 9) << ","
                << format_fixed(s.pixel_accuracy, 9) << "\n";

    } else if (*board) {
      if (board_model.empty() == board_dumps.empty()) throw ConfigError("leaderboard needs exactly one of --model, --dumps");
      std::optional<ModelSource> source;
      std::size_t image_size = cfg.model.image_size;
      if (!board_model.empty()) {
        ViTParams params = load_params(board_model);
        image_size = params.config.image_size;
        source = ModelSource::from_params(std::move(params));
      } else {
        source = ModelSource::from_dumps(board_dumps);
      }
      const DatasetManifest manifest = ingest(board_data, image_size);
      const auto combos = leaderboard_combos(cfg);
      std::optional<fs::path> render_dir;
      if (!board_render.empty()) render_dir = fs::path(board_render);
      const LeaderboardResult result = run_leaderboard(manifest, *source, combos, cfg, render_dir);
      write_or_print(board_csv, leaderboard_csv(result.rows));
      if (!board_md.empty()) write_text_file(board_md, leaderboard_markdown(result.rows));
      if (!board_per_image.empty()) write_text_file(board_per_image, per_image_csv(result, combos));
      std::cerr << result.rows.front().images_scored << " of " << manifest.entries.size() << " images scored\n";

    } else if (*render) {
      const AttributionMap map = load_map(render_map);
      render_heatmap(map, image_to_tensor(read_png(render_image, 3)), render_out);
      std::cout << "wrote " << render_out << "\n";

    } else if (*gain) {
      std::string csv = gain_csv_header();
      if (!gain_maps.empty()) {
        const AttributionMap a = load_map(gain_maps[0]);
        const AttributionMap b = load_map(gain_maps[1]);
        const GainReport r = collision_gain(a, b, gain_q, gain_seed);
        csv += gain_csv_row(a.combo_name() + "+" + b.combo_name(), r.pairs, r.distinct, r.collision_ratio);
      } else {
        if (gain_model.empty() || gain_image.empty()) throw ConfigError("gain needs --maps A B, or --model and --image");
        const ViTParams params = load_params(gain_model);
        const BaseMaps base =
            compute_base_maps(params, load_image(gain_image, params.config.image_size), std::nullopt, cfg);
        for (const MethodCombo& c : enumerate_combos({2}, {FusionOp::GeometricMean})) {
          const GainReport r = collision_gain(base.get(c.methods[0]), base.get(c.methods[1]), gain_q, gain_seed);
          csv += gain_csv_row(c.name(), r.pairs, r.distinct, r.collision_ratio);
        }
      }
      write_or_print(gain_out, csv);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_codes::kIngestion;
  }
  return exit_codes::kOk;
}
