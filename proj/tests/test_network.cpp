#include <cmath>

#include <gtest/gtest.h>

#include "checks.hpp"
#include "vialguard/errors.hpp"
#include "vialguard/network.hpp"

using namespace vialguard;

namespace {

nn::Tensor images(const DenseSSDConfig& cfg, int batch, double fill = 0.0) {
  const auto s = static_cast<std::size_t>(cfg.input_size);
  return nn::Tensor({static_cast<std::size_t>(batch), static_cast<std::size_t>(cfg.input_channels), s, s}, fill);
}

}  // namespace

TEST(Counters, ToyConvolutionParameters) {
  nn::ParameterStore store;
  const nn::Conv2d conv = nn::make_conv(store, "c", 3, 8, 3, 1, 1);
  EXPECT_EQ(conv.parameter_count(), 224);
  EXPECT_EQ(static_cast<std::int64_t>(store[conv.weight].value.size() + store[conv.bias].value.size()), 224);
}

TEST(Counters, ToyConvolutionMacs) {
  nn::ParameterStore store;
  const nn::Conv2d conv = nn::make_conv(store, "c", 4, 4, 1, 1, 0);
  EXPECT_EQ(conv.macs(10, 10), 1600);
}

TEST(Counters, NormalizationAndPoolingCostNoMacs) {
  const Model m = build_model(DenseSSDConfig::micro(), 0);
  int norms = 0;
  std::int64_t total = 0;
  for (const auto& l : m.layer_counts(64)) {
    if (l.macs == 0) {
      ++norms;
      EXPECT_EQ(l.parameters % 2, 0) << l.path;
    }
    total += l.macs;
  }
  // stem and heads aside, each conv is preceded by a batch norm except the reductions
  EXPECT_GT(norms, 0);
  EXPECT_EQ(total, m.count_macs(64));
  EXPECT_EQ(total, checks::analytic_macs(DenseSSDConfig::micro()));
}

TEST(Counters, WholeModelsMatchHandCounts) {
  for (const auto& cfg : {DenseSSDConfig::micro(), DenseSSDConfig::tiny(), DenseSSDConfig{}}) {
    const Model m = build_model(cfg, 0);
    EXPECT_EQ(count_parameters(m), checks::analytic_parameters(cfg)) << cfg.input_size;
    EXPECT_EQ(count_macs(m, cfg.input_size), checks::analytic_macs(cfg)) << cfg.input_size;
  }
}

TEST(Config, ZeroLayerBlockIsRejected) {
  DenseSSDConfig cfg = DenseSSDConfig::micro();
  cfg.db_layer_counts = {1, 0, 1, 1};
  EXPECT_THROW(build_model(cfg, 0), ConfigError);
}

TEST(Config, InconsistentGridNamesTheStage) {
  DenseSSDConfig cfg = DenseSSDConfig::micro();
  cfg.pyramid_grids = {8, 4, 3, 1, 1, 1};
  try {
    build_model(cfg, 0);
    FAIL() << "expected a construction error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("fb3"), std::string::npos) << e.what();
  }
}

TEST(Architecture, DefaultPyramidAndAnchors) {
  const Model m = build_model(DenseSSDConfig{}, 0);
  std::vector<int> grids;
  for (const auto& fb : m.feature_blocks()) grids.push_back(fb.grid);
  EXPECT_EQ(grids, (std::vector<int>{38, 19, 10, 5, 3, 1}));
  EXPECT_EQ(m.anchors().size(), 8732u);
  const auto r = checks::dense_connectivity(m);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Architecture, DefaultForwardShapes) {
  const DenseSSDConfig cfg;
  const Model m = build_model(cfg, 0);
  const Predictions p = m.infer(images(cfg, 2));
  EXPECT_EQ(p.batch, 2);
  EXPECT_EQ(p.anchors, 8732);
  EXPECT_EQ(p.classes, 3);
  EXPECT_EQ(p.loc.size(), 2u * 8732 * 4);
  EXPECT_EQ(p.conf.size(), 2u * 8732 * 3);
  EXPECT_TRUE(p.all_finite());
}

TEST(Architecture, TinyAndMicroAreDenselyConnected) {
  for (const auto& cfg : {DenseSSDConfig::micro(), DenseSSDConfig::tiny()}) {
    const auto r = checks::dense_connectivity(build_model(cfg, 3));
    EXPECT_TRUE(r.ok) << r.detail;
  }
}

TEST(Model, SameSeedSameParameters) {
  const Model a = build_model(DenseSSDConfig::micro(), 42);
  const Model b = build_model(DenseSSDConfig::micro(), 42);
  const Model c = build_model(DenseSSDConfig::micro(), 43);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value) << a.parameters()[i].path;
    differs = differs || !(a.parameters()[i].value == c.parameters()[i].value);
  }
  EXPECT_TRUE(differs);
}

TEST(Model, DuplicatedImagesGiveIdenticalOutputs) {
  const DenseSSDConfig cfg = DenseSSDConfig::micro();
  const Model m = build_model(cfg, 1);
  nn::Tensor x = images(cfg, 2);
  const std::size_t per = x.size() / 2;
  for (std::size_t i = 0; i < per; ++i) x[i] = x[per + i] = std::sin(0.37 * static_cast<double>(i));
  const Predictions p = m.infer(x);
  for (int a = 0; a < p.anchors; ++a) {
    for (int k = 0; k < 4; ++k) ASSERT_EQ(p.loc_at(0, a, k), p.loc_at(1, a, k));
    for (int c = 0; c < p.classes; ++c) ASSERT_EQ(p.conf_at(0, a, c), p.conf_at(1, a, c));
  }
}

TEST(Model, WrongInputSizeIsShapeError) {
  const DenseSSDConfig cfg = DenseSSDConfig::micro();
  const Model m = build_model(cfg, 1);
  EXPECT_THROW(m.infer(nn::Tensor({1, 3, 63, 63})), ShapeError);
  EXPECT_THROW(m.infer(nn::Tensor({1, 1, 64, 64})), ShapeError);
}

TEST(Model, InferenceLeavesStateUntouched) {
  const DenseSSDConfig cfg = DenseSSDConfig::micro();
  Model m = build_model(cfg, 1);
  const Model before = m;
  m.infer(images(cfg, 1, 0.5));
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(m.parameters()[i].value, before.parameters()[i].value) << m.parameters()[i].path;
  }
}

TEST(FeatureMaps, SixNormalizedMaps) {
  const DenseSSDConfig cfg = DenseSSDConfig::tiny();
  const Model m = build_model(cfg, 2);
  nn::Tensor x = images(cfg, 1);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::cos(0.01 * static_cast<double>(i));
  const auto maps = extract_feature_maps(m, x);
  ASSERT_EQ(maps.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(maps[k].dim(0), static_cast<std::size_t>(cfg.pyramid_grids[k]));
    EXPECT_EQ(maps[k].dim(1), static_cast<std::size_t>(cfg.pyramid_grids[k]));
    for (double v : maps[k].values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(FeatureMaps, ZeroInputWithZeroBiasesIsConstant) {
  const DenseSSDConfig cfg = DenseSSDConfig::micro();
  Model m = build_model(cfg, 2);
  for (auto& p : m.parameters().all()) {
    if (p.path.ends_with(".bias") || p.path.ends_with(".beta")) p.value.fill(0.0);
  }
  const auto maps = m.feature_maps(images(cfg, 1));
  ASSERT_EQ(maps.size(), 6u);
  for (const auto& map : maps) {
    for (double v : map.values()) EXPECT_EQ(v, map[0]);
  }
}
