#include "broadcam/cam_gen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "broadcam/errors.hpp"
#include "test_util.hpp"

namespace broadcam {
namespace {

using testing::code_of;

Tensor3 random_tensor(std::mt19937_64& gen, int c, int h, int w, float lo = 0.0f,
                      float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor3 t(c, h, w);
  for (auto& v : t.data) v = dist(gen);
  return t;
}

CamWeights weights_for(const FeatureStack& stack, int k) {
  CamWeights w;
  int offset = 0;
  for (const auto& l : stack.layers) {
    w.layer_offsets.push_back({l.index, offset, offset + l.tensor.channels});
    offset += l.tensor.channels;
  }
  w.weights = Matrix::Zero(offset, k);
  return w;
}

bool same_bits(const CamSeed& a, const CamSeed& b) {
  return a.maps.size() == b.maps.size() &&
         std::memcmp(a.maps.data(), b.maps.data(), a.maps.size() * sizeof(float)) == 0;
}

CamSeed cam_from(int k, int h, int w, std::vector<float> maps) {
  CamSeed cam;
  cam.num_classes = k;
  cam.height = h;
  cam.width = w;
  cam.maps = std::move(maps);
  return cam;
}

TEST(GenerateCamTest, OneHotWeightReproducesNormalizedChannel) {
  std::mt19937_64 gen(1);
  FeatureStack stack;
  stack.sample_id = "x";
  stack.layers.push_back({4, random_tensor(gen, 3, 5, 6)});
  CamWeights w = weights_for(stack, 2);
  w.weights(1, 0) = 1.0;
  const std::vector<int> layers = {4};
  const CamSeed cam = generate_cam(stack, w, layers);
  EXPECT_EQ(cam.height, 5);
  EXPECT_EQ(cam.width, 6);
  EXPECT_EQ(cam.layers_used, layers);
  const auto ch = stack.layers[0].tensor.channel(1);
  const double top = *std::max_element(ch.begin(), ch.end());
  const auto map = cam.class_map(0);
  for (std::size_t i = 0; i < ch.size(); ++i) {
    EXPECT_EQ(map[i], static_cast<float>(ch[i] / top));
  }
}

TEST(GenerateCamTest, NegativeWeightsOnNonnegativeFeaturesGiveZeroMap) {
  std::mt19937_64 gen(2);
  FeatureStack stack;
  stack.layers.push_back({4, random_tensor(gen, 4, 3, 3)});
  CamWeights w = weights_for(stack, 1);
  w.weights.col(0).setConstant(-0.5);
  const std::vector<int> layers = {4};
  const CamSeed cam = generate_cam(stack, w, layers);
  for (float v : cam.maps) EXPECT_EQ(v, 0.0f);
}

TEST(GenerateCamTest, ConstantLayersSumAtFinestResolution) {
  FeatureStack stack;
  stack.layers.push_back({3, Tensor3(1, 4, 4, 2.0f)});
  stack.layers.push_back({4, Tensor3(1, 2, 2, 1.0f)});
  CamWeights w = weights_for(stack, 1);
  w.weights.col(0).setOnes();
  const std::vector<int> layers = {3, 4};
  const CamSeed cam = generate_cam(stack, w, layers);
  EXPECT_EQ(cam.height, 4);
  EXPECT_EQ(cam.width, 4);
  for (float v : cam.maps) EXPECT_EQ(v, 1.0f);
}

TEST(GenerateCamTest, ReluAppliesAfterCrossLayerSum) {
  // Layer 3 alone is negative where layer 4 is positive; per-layer
  // rectification would keep layer 4's contribution intact.
  FeatureStack stack;
  stack.layers.push_back({3, Tensor3(1, 1, 2, 0.0f)});
  stack.layers.push_back({4, Tensor3(1, 1, 2, 0.0f)});
  stack.layers[0].tensor.data = {3.0f, 1.0f};
  stack.layers[1].tensor.data = {1.0f, 2.0f};
  CamWeights w = weights_for(stack, 1);
  w.weights(0, 0) = -1.0;
  w.weights(1, 0) = 1.0;
  const std::vector<int> layers = {3, 4};
  const CamSeed cam = generate_cam(stack, w, layers);
  EXPECT_EQ(cam.maps[0], 0.0f);
  EXPECT_EQ(cam.maps[1], 1.0f);
}

TEST(GenerateCamTest, ExplicitTargetSize) {
  FeatureStack stack;
  stack.layers.push_back({4, Tensor3(1, 2, 2, 0.0f)});
  stack.layers[0].tensor.data = {0.0f, 1.0f, 2.0f, 3.0f};
  CamWeights w = weights_for(stack, 1);
  w.weights(0, 0) = 1.0;
  const std::vector<int> layers = {4};
  const CamSeed cam = generate_cam(stack, w, layers, TargetSize{3, 3});
  ASSERT_EQ(cam.maps.size(), 9u);
  // Corner-aligned bilinear: centre is the mean of the four corners.
  EXPECT_FLOAT_EQ(cam.maps[4], 0.5f);
  EXPECT_FLOAT_EQ(cam.maps[8], 1.0f);
  EXPECT_FLOAT_EQ(cam.maps[1], 1.0f / 6.0f);
}

TEST(GenerateCamTest, LayerErrors) {
  FeatureStack stack;
  stack.sample_id = "x";
  stack.layers.push_back({4, Tensor3(2, 2, 2, 1.0f)});
  CamWeights w = weights_for(stack, 1);
  const std::vector<int> dup = {4, 4};
  EXPECT_EQ(code_of([&] { generate_cam(stack, w, dup); }), ErrorCode::kDuplicateLayer);
  const std::vector<int> other = {3};
  EXPECT_EQ(code_of([&] { generate_cam(stack, w, other); }), ErrorCode::kMissingLayer);
  const std::vector<int> none;
  EXPECT_EQ(code_of([&] { generate_cam(stack, w, none); }), ErrorCode::kInvalidArgument);
  w.layer_offsets[0].end = 3;
  w.weights = Matrix::Zero(3, 1);
  const std::vector<int> layers = {4};
  EXPECT_EQ(code_of([&] { generate_cam(stack, w, layers); }), ErrorCode::kShapeMismatch);
}

TEST(GenerateCamPropertyTest, ValuesStayInUnitIntervalWithExactMaximum) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 20; ++trial) {
    FeatureStack stack;
    stack.layers.push_back({3, random_tensor(gen, 5, 8, 8, -1.0f, 2.0f)});
    stack.layers.push_back({4, random_tensor(gen, 6, 4, 4, -1.0f, 2.0f)});
    CamWeights w = weights_for(stack, 3);
    for (Eigen::Index i = 0; i < w.weights.size(); ++i) w.weights.data()[i] = normal(gen);
    const std::vector<int> layers = {3, 4};
    const CamSeed cam = generate_cam(stack, w, layers);
    for (int k = 0; k < 3; ++k) {
      const auto map = cam.class_map(k);
      const float top = *std::max_element(map.begin(), map.end());
      EXPECT_TRUE(top == 0.0f || top == 1.0f);
      for (float v : map) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
    }
  }
}

TEST(GenerateCamPropertyTest, PositiveColumnScalingIsInvisible) {
  std::mt19937_64 gen(4);
  std::normal_distribution<double> normal;
  FeatureStack stack;
  stack.layers.push_back({3, random_tensor(gen, 6, 8, 8)});
  stack.layers.push_back({4, random_tensor(gen, 4, 4, 4)});
  CamWeights w = weights_for(stack, 2);
  for (Eigen::Index i = 0; i < w.weights.size(); ++i) w.weights.data()[i] = normal(gen);
  const std::vector<int> layers = {3, 4};
  const CamSeed base = generate_cam(stack, w, layers);
  const std::vector<std::uint8_t> present = {1, 1};

  CamWeights pow2 = w;
  pow2.weights.col(1) *= 8.0;
  const CamSeed exact = generate_cam(stack, pow2, layers);
  EXPECT_TRUE(same_bits(base, exact));
  EXPECT_EQ(cam_to_mask(base, present, 0.3).grid, cam_to_mask(exact, present, 0.3).grid);

  CamWeights scaled = w;
  scaled.weights.col(0) *= 3.7;
  const CamSeed approx = generate_cam(stack, scaled, layers);
  for (std::size_t i = 0; i < base.maps.size(); ++i) {
    EXPECT_NEAR(approx.maps[i], base.maps[i], 1e-6);
  }
}

TEST(TopkTest, LargestSignedValueWins) {
  Vector col(3);
  col << 3, -5, 2;
  EXPECT_EQ(topk_channels(col, 1), (std::vector<int>{0}));
}

TEST(TopkTest, DescendingOrder) {
  Vector col(6);
  col << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(topk_channels(col, 3), (std::vector<int>{5, 4, 3}));
}

TEST(TopkTest, TiesGoToLowerIndex) {
  Vector col(4);
  col << 1, 2, 2, 2;
  EXPECT_EQ(topk_channels(col, 2), (std::vector<int>{1, 2}));
}

TEST(TopkTest, KOutOfRange) {
  const Vector col = Vector::Ones(3);
  EXPECT_EQ(code_of([&] { topk_channels(col, 0); }), ErrorCode::kOutOfRange);
  EXPECT_EQ(code_of([&] { topk_channels(col, 4); }), ErrorCode::kOutOfRange);
}

TEST(TopkCamTest, RetainedSetIsSortedAscending) {
  FeatureStack stack;
  stack.layers.push_back({4, Tensor3(6, 2, 2, 1.0f)});
  CamWeights w = weights_for(stack, 1);
  w.weights.col(0) << 1, 2, 3, 4, 5, 6;
  const std::vector<int> layers = {4};
  const TopkCam t = generate_cam_topk(stack, w, layers, 0, 3);
  EXPECT_EQ(t.retained, (std::vector<int>{3, 4, 5}));
  EXPECT_EQ(t.cam.num_classes, 1);
}

TEST(TopkCamTest, FullKEqualsUnrestrictedCamBitExactly) {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> normal;
  FeatureStack stack;
  stack.layers.push_back({3, random_tensor(gen, 7, 8, 8)});
  stack.layers.push_back({4, random_tensor(gen, 9, 4, 4)});
  CamWeights w = weights_for(stack, 3);
  for (Eigen::Index i = 0; i < w.weights.size(); ++i) w.weights.data()[i] = normal(gen);
  const std::vector<int> layers = {3, 4};
  const CamSeed full = generate_cam(stack, w, layers);
  for (int k = 0; k < 3; ++k) {
    const TopkCam t = generate_cam_topk(stack, w, layers, k, w.num_features());
    const auto a = t.cam.class_map(0);
    const auto b = full.class_map(k);
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
  }
}

TEST(TopkCamTest, RetainedSetsAreNested) {
  std::mt19937_64 gen(6);
  std::normal_distribution<double> normal;
  Vector col(50);
  for (int i = 0; i < 50; ++i) col[i] = std::round(normal(gen) * 4.0) / 4.0;  // many ties
  std::vector<int> prev;
  for (int k = 1; k <= 50; ++k) {
    std::vector<int> cur = topk_channels(col, k);
    std::sort(cur.begin(), cur.end());
    EXPECT_TRUE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
    prev = cur;
  }
}

TEST(NormalizeCamTest, Examples) {
  const std::vector<double> raw = {0, 2, 4, 8};
  EXPECT_EQ(normalize_cam(raw), (std::vector<double>{0, 0.25, 0.5, 1.0}));
  const std::vector<double> zeros(4, 0.0);
  EXPECT_EQ(normalize_cam(zeros), zeros);
  const std::vector<double> sevens(5, 7.0);
  EXPECT_EQ(normalize_cam(sevens), std::vector<double>(5, 1.0));
  const std::vector<double> neg = {1.0, -0.5};
  EXPECT_EQ(code_of([&] { normalize_cam(neg); }), ErrorCode::kOutOfRange);
}

TEST(CamToMaskTest, FullMapLabelsEveryPixel) {
  const CamSeed cam = cam_from(1, 2, 2, std::vector<float>(4, 1.0f));
  const std::vector<std::uint8_t> present = {1};
  EXPECT_EQ(cam_to_mask(cam, present, 0.5).grid, std::vector<std::uint8_t>(4, 1));
}

TEST(CamToMaskTest, BelowThresholdIsBackground) {
  const CamSeed cam = cam_from(1, 2, 2, std::vector<float>(4, 0.3f));
  const std::vector<std::uint8_t> present = {1};
  EXPECT_EQ(cam_to_mask(cam, present, 0.5).grid, std::vector<std::uint8_t>(4, 0));
}

TEST(CamToMaskTest, TieGoesToLowerClass) {
  const CamSeed cam = cam_from(2, 1, 1, {0.9f, 0.9f});
  const std::vector<std::uint8_t> present = {1, 1};
  EXPECT_EQ(cam_to_mask(cam, present, 0.5).grid[0], 1);
}

TEST(CamToMaskTest, AbsentClassesNeverWin) {
  const CamSeed cam = cam_from(3, 1, 2, {1.0f, 0.2f, 0.6f, 0.6f, 0.9f, 1.0f});
  const std::vector<std::uint8_t> present = {0, 1, 1};
  EXPECT_EQ(cam_to_mask(cam, present, 0.5).grid, (std::vector<std::uint8_t>{3, 3}));
  const std::vector<std::uint8_t> only_second = {0, 1, 0};
  EXPECT_EQ(cam_to_mask(cam, only_second, 0.5).grid, (std::vector<std::uint8_t>{2, 2}));
}

TEST(CamToMaskTest, Errors) {
  const CamSeed cam = cam_from(2, 1, 1, {0.5f, 0.5f});
  const std::vector<std::uint8_t> none = {0, 0};
  EXPECT_EQ(code_of([&] { cam_to_mask(cam, none, 0.5); }), ErrorCode::kEmptyLabel);
  const std::vector<std::uint8_t> both = {1, 1};
  EXPECT_EQ(code_of([&] { cam_to_mask(cam, both, 0.0); }), ErrorCode::kOutOfRange);
  EXPECT_EQ(code_of([&] { cam_to_mask(cam, both, 1.0); }), ErrorCode::kOutOfRange);
}

TEST(ResizeCamTest, ConstantStaysConstant) {
  const CamSeed cam = cam_from(2, 2, 2, {0.5f, 0.5f, 0.5f, 0.5f, 1.0f, 1.0f, 1.0f, 1.0f});
  const CamSeed big = resize_cam(cam, 5, 7);
  ASSERT_EQ(big.maps.size(), 70u);
  for (int i = 0; i < 35; ++i) EXPECT_FLOAT_EQ(big.maps[i], 0.5f);
  for (int i = 35; i < 70; ++i) EXPECT_FLOAT_EQ(big.maps[i], 1.0f);
}

}  // namespace
}  // namespace broadcam
