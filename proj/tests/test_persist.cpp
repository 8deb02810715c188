#include <gtest/gtest.h>

#include <string>

#include "test_util.hpp"
#include "vitmix/harness.hpp"
#include "vitmix/persist.hpp"

using namespace vitmix;
using vitmix::testing::random_image;
using vitmix::testing::scratch_dir;

TEST(PersistParams, RoundTripIsBitwise) {
  ViTConfig c;
  c.seed = 3;
  c.depth = 3;
  const ViTParams p = init_params(c);
  const auto dir = scratch_dir("params_rt");
  save_params(dir / "m.vmix", p);
  ViTParams back = load_params(dir / "m.vmix");
  back.config.seed = c.seed;  // not stored
  EXPECT_EQ(back, p);
  const Tensor img = random_image(c, 1);
  EXPECT_EQ(forward(back, img).logits, forward(p, img).logits);
}

TEST(PersistParams, MissingAndMisshapenTensorsRejected) {
  const ViTParams p = init_params(ViTConfig{});
  TensorMap t = params_to_tensors(p);
  t.erase("blocks.1.w2");
  EXPECT_THROW(params_from_tensors(t), FormatError);
  t = params_to_tensors(p);
  t.at("head_bias") = Tensor({5});
  EXPECT_THROW(params_from_tensors(t), FormatError);
  t = params_to_tensors(p);
  t.at("config")[1] = 7;  // patch size no longer divides the image
  EXPECT_THROW(params_from_tensors(t), ConfigError);
  t.at("config")[1] = 2.5;
  EXPECT_THROW(params_from_tensors(t), FormatError);
}

TEST(PersistParams, ErrorsNameTheFile) {
  const auto dir = scratch_dir("params_err");
  write_tensor_file(dir / "bad.vmix", TensorMap{{"x", Tensor::vector({1})}});
  try {
    load_params(dir / "bad.vmix");
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bad.vmix"), std::string::npos);
    EXPECT_NE(msg.find("'config'"), std::string::npos);
  }
}

TEST(PersistMap, RoundTrip) {
  const AttributionMap plain =
      AttributionMap::from_raw(Tensor::matrix({{0, 2}, {1, 4}}), {MethodId::GradCAM});
  const std::vector<AttributionMap> parts{
      plain, AttributionMap::from_raw(Tensor::matrix({{1, 1}, {0, 3}}), {MethodId::Rollout})};
  const AttributionMap fused = mix(parts, FusionOp::Multiply);
  const auto dir = scratch_dir("map_rt");
  for (const AttributionMap& m : {plain, fused}) {
    save_map(dir / "m.vmix", m);
    const AttributionMap back = load_map(dir / "m.vmix");
    EXPECT_EQ(back.grid, m.grid);
    EXPECT_EQ(back.methods, m.methods);
    EXPECT_EQ(back.fusion_op, m.fusion_op);
    EXPECT_EQ(back.degenerate, m.degenerate);
  }
}

TEST(PersistMap, UnknownIdsRejected) {
  TensorMap t = map_to_tensors(AttributionMap::from_raw(Tensor::matrix({{0, 1}}), {MethodId::LRP}));
  t.at("methods")[0] = 9;
  EXPECT_THROW(map_from_tensors(t), FormatError);
  t = map_to_tensors(AttributionMap::from_raw(Tensor::matrix({{0, 1}}), {MethodId::LRP}));
  t.at("fusion_op")[0] = 3;
  EXPECT_THROW(map_from_tensors(t), FormatError);
}

TEST(TraceDump, RoundTripReproducesBaseMaps) {
  const ViTParams p = vitmix::testing::sharpened_model(ViTConfig{}, 5.0);
  const ForwardTrace fwd = forward(p, random_image(p.config, 2));
  const std::size_t cls = predict(fwd).class_index;
  const BackwardTrace back = backward(p, fwd, cls);
  const auto dir = scratch_dir("dump_rt");
  save_trace_dump(dir / "d.vmix", make_trace_dump(p, fwd, back));
  const TraceDump d = load_trace_dump(dir / "d.vmix");
  ASSERT_TRUE(d.attn_relevance.has_value());

  HarnessConfig cfg;
  const BaseMaps from_model = compute_base_maps(p, fwd, back, cfg);
  const BaseMaps from_dump = compute_base_maps(d, cfg);
  EXPECT_EQ(from_dump.class_index, cls);
  for (MethodId m : kAllMethods) EXPECT_EQ(from_dump.get(m).grid, from_model.get(m).grid) << method_name(m);
}

TEST(TraceDump, Float32DumpStaysClose) {
  const ViTParams p = init_params(ViTConfig{});
  const ForwardTrace fwd = forward(p, random_image(p.config, 5));
  const BackwardTrace back = backward(p, fwd, 0);
  const auto dir = scratch_dir("dump_f32");
  save_trace_dump(dir / "d.vmix", make_trace_dump(p, fwd, back), DType::F32);
  const TraceDump d = load_trace_dump(dir / "d.vmix");
  for (std::size_t i = 0; i < d.attn.size(); ++i) EXPECT_NEAR(d.attn[i], fwd.attn[i], 1e-7);
}

TEST(TraceDump, WithoutRelevanceFallsBackToAttention) {
  const ViTParams p = init_params(ViTConfig{});
  const ForwardTrace fwd = forward(p, random_image(p.config, 5));
  const BackwardTrace back = backward(p, fwd, 1);
  TraceDump d = make_trace_dump(p, fwd, back);
  d.attn_relevance.reset();
  const TraceDump back_d = dump_from_tensors(dump_to_tensors(d));
  EXPECT_FALSE(back_d.attn_relevance.has_value());
  const AttributionMap lrp = compute_base_maps(back_d, HarnessConfig{}).get(MethodId::LRP);
  const AttributionMap expected =
      AttributionMap::from_raw(detail::cls_patch_row(lrp_aggregate(back.attn_grad, fwd.attn, 0)), {MethodId::LRP});
  EXPECT_EQ(lrp.grid, expected.grid);
}

TEST(TraceDump, MissingOrInconsistentTensorsRejected) {
  const ViTParams p = init_params(ViTConfig{});
  const ForwardTrace fwd = forward(p, random_image(p.config, 5));
  const TensorMap good = dump_to_tensors(make_trace_dump(p, fwd, backward(p, fwd, 0)));
  for (const char* name : kTraceDumpRequired) {
    TensorMap t = good;
    t.erase(name);
    EXPECT_THROW(dump_from_tensors(t), FormatError) << name;
  }
  TensorMap t = good;
  t.at("attn_grad") = Tensor({2, 2, 17, 16});
  EXPECT_THROW(dump_from_tensors(t), FormatError);
  t = good;
  t.at("last_act") = Tensor({16, 16});
  EXPECT_THROW(dump_from_tensors(t), FormatError);
}
