#include "broadcam/synth_baseline.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "broadcam/cam_gen.hpp"
#include "broadcam/errors.hpp"
#include "broadcam/eval_metrics.hpp"
#include "broadcam/rng.hpp"
#include "test_util.hpp"

namespace broadcam {
namespace {

using testing::code_of;
using testing::TempDir;

SynthConfig small_config(std::uint64_t seed) {
  SynthConfig c;
  c.n_samples = 24;
  c.k_classes = 3;
  c.image_height = 16;
  c.image_width = 16;
  c.layers = {{3, 16, 8, 8}, {4, 24, 4, 4}};
  c.seed = seed;
  return c;
}

Matrix labels_of(const SynthDataset& d) { return label_matrix(d.labels, d.sample_ids); }

std::vector<int> topk_of(const Vector& column, int k) {
  auto idx = topk_channels(column, k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

TEST(RngTest, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(RngTest, DistributionsStayInRange) {
  Rng r(1);
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const int k = r.uniform_int(-2, 3);
    EXPECT_GE(k, -2);
    EXPECT_LE(k, 3);
    EXPECT_LT(r.uniform_int(std::uint64_t{7}), 7u);
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / 20000, 0.0, 0.05);
  EXPECT_NEAR(sq / 20000, 1.0, 0.05);
}

TEST(RngTest, SplitStreamsAreIndependentOfOrder) {
  const Rng base(9);
  Rng s1 = base.split(1);
  Rng s2 = base.split(2);
  const auto first = s2.next_u64();
  Rng again = base.split(2);
  EXPECT_EQ(first, again.next_u64());
  EXPECT_NE(s1.next_u64(), first);
}

TEST(SynthTest, SameSeedIsByteIdentical) {
  const SynthDataset a = synth_dataset(small_config(5));
  const SynthDataset b = synth_dataset(small_config(5));
  ASSERT_EQ(a.sample_ids, b.sample_ids);
  for (std::size_t i = 0; i < a.stacks.size(); ++i) {
    for (std::size_t l = 0; l < a.stacks[i].layers.size(); ++l) {
      EXPECT_EQ(a.stacks[i].layers[l].tensor.data, b.stacks[i].layers[l].tensor.data);
    }
    EXPECT_EQ(a.masks[i].grid, b.masks[i].grid);
  }
  EXPECT_EQ(a.labels.rows, b.labels.rows);
  EXPECT_EQ(a.relevance.values, b.relevance.values);
  const SynthDataset c = synth_dataset(small_config(6));
  EXPECT_NE(a.masks[0].grid, c.masks[0].grid);
}

TEST(SynthTest, MasksAgreeWithLabels) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SynthConfig cfg = small_config(seed);
    const SynthDataset d = synth_dataset(cfg);
    for (std::size_t i = 0; i < d.masks.size(); ++i) {
      std::vector<std::uint8_t> seen(cfg.k_classes, 0);
      for (auto v : d.masks[i].grid) {
        ASSERT_LT(v, cfg.k_classes + 1);
        if (v > 0) seen[v - 1] = 1;
      }
      EXPECT_EQ(seen, d.labels.row(d.sample_ids[i]));
      EXPECT_TRUE(std::any_of(seen.begin(), seen.end(), [](auto b) { return b; }));
    }
  }
}

TEST(SynthTest, PlantedChannelsPerLayer) {
  const SynthConfig cfg = small_config(1);
  const SynthDataset d = synth_dataset(cfg);
  ASSERT_EQ(d.relevance.values.rows(), cfg.total_channels());
  for (int k = 0; k < cfg.k_classes; ++k) {
    const auto& planted = d.relevance.planted[k];
    EXPECT_EQ(planted.size(), static_cast<std::size_t>(cfg.relevant_channels_per_class) * 2);
    for (const auto& span : d.relevance.layer_offsets) {
      const auto in_layer = std::count_if(planted.begin(), planted.end(), [&](int c) {
        return c >= span.begin && c < span.end;
      });
      EXPECT_EQ(in_layer, cfg.relevant_channels_per_class);
    }
  }
  // A channel is planted for at most one class.
  for (Eigen::Index c = 0; c < d.relevance.values.rows(); ++c) {
    EXPECT_LE((d.relevance.values.row(c).array() > 0.0).count(), 1);
  }
}

TEST(SynthTest, NoiselessPlantedChannelsMatchTheirRegion) {
  SynthConfig cfg;
  cfg.n_samples = 10;
  cfg.k_classes = 3;
  cfg.image_height = 8;
  cfg.image_width = 8;
  cfg.layers = {{4, 12, 8, 8}};
  cfg.noise_std = 0.0;
  cfg.seed = 3;
  const SynthDataset d = synth_dataset(cfg);
  int checked = 0;
  for (std::size_t i = 0; i < d.stacks.size(); ++i) {
    const Tensor3& t = d.stacks[i].layer(4);
    const auto& row = d.labels.row(d.sample_ids[i]);
    for (int k = 0; k < cfg.k_classes; ++k) {
      if (!row[k]) continue;
      for (int c : d.relevance.planted[k]) {
        const auto norm = max_normalize(t.channel(c));
        EXPECT_EQ(feature_relevance_iou(norm, t.height, t.width, d.masks[i], k + 1), 1.0);
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 0);
}

TEST(SynthTest, ZeroStrengthCarriesNoRelevance) {
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SynthConfig cfg;
    cfg.n_samples = 60;
    cfg.k_classes = 4;
    cfg.layers = {{4, 64, 8, 8}};
    cfg.relevance_strength = 0.0;
    cfg.seed = seed;
    const SynthDataset d = synth_dataset(cfg);
    const std::vector<int> layers = {4};
    const BroadFeatureMatrix z =
        build_broad_matrix(std::span<const FeatureStack>(d.stacks), layers);
    const BLSModel m = fit_bls(z, labels_of(d), {});
    double per_seed = 0.0;
    for (int k = 0; k < cfg.k_classes; ++k) {
      const Vector w = m.W_broadcam.col(k);
      const Vector r = d.relevance.values.col(k);
      per_seed += std::abs(pearson(std::span<const double>(w.data(), w.size()),
                                   std::span<const double>(r.data(), r.size())));
    }
    total += per_seed / cfg.k_classes;
  }
  EXPECT_LT(total / 10.0, 0.2);
}

TEST(SynthTest, NoiselessBroadCamFavoursPlantedChannels) {
  SynthConfig cfg;
  cfg.n_samples = 200;
  cfg.k_classes = 3;
  cfg.layers = {{4, 32, 8, 8}};
  cfg.noise_std = 0.0;
  cfg.seed = 4;
  const SynthDataset d = synth_dataset(cfg);
  const std::vector<int> layers = {4};
  const BLSModel m = fit_bls(build_broad_matrix(std::span<const FeatureStack>(d.stacks), layers),
                             labels_of(d), {});
  for (int k = 0; k < cfg.k_classes; ++k) {
    double planted = 0.0, other = 0.0;
    int n_other = 0;
    const auto& p = d.relevance.planted[k];
    for (int c = 0; c < m.num_features(); ++c) {
      if (std::find(p.begin(), p.end(), c) != p.end()) {
        planted += m.W_broadcam(c, k);
      } else {
        other += m.W_broadcam(c, k);
        ++n_other;
      }
    }
    EXPECT_GT(planted / static_cast<double>(p.size()), other / n_other) << "class " << k;
  }
}

TEST(SynthTest, InvalidConfigs) {
  SynthConfig c = small_config(0);
  c.image_height = 15;
  EXPECT_EQ(code_of([&] { synth_dataset(c); }), ErrorCode::kInvalidArgument);
  c = small_config(0);
  c.relevant_channels_per_class = 6;
  EXPECT_EQ(code_of([&] { synth_dataset(c); }), ErrorCode::kInvalidArgument);
  c = small_config(0);
  c.layers = {{4, 16, 8, 8}, {3, 16, 8, 8}};
  EXPECT_EQ(code_of([&] { synth_dataset(c); }), ErrorCode::kInvalidArgument);
}

TEST(SynthTest, WrittenDatasetLoadsBack) {
  TempDir dir;
  const SynthConfig cfg = small_config(2);
  const SynthDataset d = synth_dataset(cfg);
  std::map<std::string, std::vector<int>> splits;
  for (int i = 0; i < cfg.n_samples; ++i) splits[i < 16 ? "train" : "val"].push_back(i);
  write_dataset(d, cfg, splits, dir.path());
  const Manifest m = load_manifest(dir / "manifest.json");
  EXPECT_EQ(m.split("train").size(), 16u);
  EXPECT_EQ(m.split("val").front(), d.sample_ids[16]);
  const std::vector<int> layers = {3, 4};
  const FeatureStack s = load_feature_stack(m.feature_prefix(d.sample_ids[3]), layers);
  EXPECT_EQ(s.layer(4).data, d.stacks[3].layer(4).data);
  EXPECT_EQ(load_mask(m.mask_path(d.sample_ids[3])).grid, d.masks[3].grid);
  EXPECT_EQ(load_labels(m.labels_path()).rows, d.labels.rows);
  EXPECT_TRUE(fs::exists(dir / "relevance.csv"));
  EXPECT_TRUE(fs::exists(dir / "synth.json"));
}

Matrix toy_z() {
  Matrix z(2, 2);
  z << 1, 0, 0, 1;
  return z;
}

Matrix toy_y() {
  Matrix y(2, 1);
  y << 1, 0;
  return y;
}

TEST(GdBaselineTest, LossDecreasesOnSeparableToy) {
  GDOptions opt;
  opt.epochs = 20;
  opt.learning_rate = 0.5;
  const GDClassifier m = fit_gd_classifier(toy_z(), toy_y(), opt);
  ASSERT_EQ(m.training_log.size(), 20u);
  for (std::size_t e = 1; e < m.training_log.size(); ++e) {
    EXPECT_EQ(m.training_log[e].first, static_cast<int>(e) + 1);
    EXPECT_LT(m.training_log[e].second, m.training_log[e - 1].second);
  }
  // First entry is the loss at the random initialisation.
  GDOptions zero = opt;
  zero.learning_rate = 0.0;
  const GDClassifier init = fit_gd_classifier(toy_z(), toy_y(), zero);
  const double p0 = 1.0 / (1.0 + std::exp(-init.weights(0, 0)));
  const double p1 = 1.0 / (1.0 + std::exp(-init.weights(1, 0)));
  const double expected = -(std::log(p0) + std::log(1.0 - p1)) / 2.0;
  EXPECT_NEAR(m.training_log[0].second, expected, 1e-14);
}

TEST(GdBaselineTest, ZeroLearningRateKeepsInit) {
  GDOptions opt;
  opt.learning_rate = 0.0;
  opt.seed = 4;
  std::mt19937_64 gen(4);
  const Matrix z = testing::random_matrix(gen, 10, 6);
  const Matrix y = (testing::random_matrix(gen, 10, 2).array() > 0.0).cast<double>();
  const GDClassifier m = fit_gd_classifier(z, y, opt);
  Rng rng(4);
  for (Eigen::Index c = 0; c < 2; ++c) {
    for (Eigen::Index r = 0; r < 6; ++r) EXPECT_EQ(m.weights(r, c), rng.normal(0.0, opt.init_std));
  }
  EXPECT_TRUE(m.bias.isZero(0.0));
  for (const auto& [epoch, loss] : m.training_log) EXPECT_EQ(loss, m.training_log[0].second);
  EXPECT_EQ(m.training_log[0].second, sigmoid_cross_entropy(z, y, m.weights, m.bias));
}

TEST(GdBaselineTest, ShorterRunIsPrefixOfLongerRun) {
  std::mt19937_64 gen(5);
  const Matrix z = testing::random_matrix(gen, 30, 8);
  const Matrix y = (testing::random_matrix(gen, 30, 3).array() > 0.0).cast<double>();
  GDOptions opt;
  opt.seed = 11;
  opt.epochs = 3;
  const GDClassifier a = fit_gd_classifier(z, y, opt);
  opt.epochs = 6;
  const GDClassifier b = fit_gd_classifier(z, y, opt);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(a.training_log[e], b.training_log[e]);
  const GDClassifier c = fit_gd_classifier(z, y, opt);
  EXPECT_EQ(b.weights, c.weights);
}

TEST(GdBaselineTest, DivergenceReportsEpoch) {
  const Matrix z = Matrix::Constant(2, 2, 1e200);
  GDOptions opt;
  opt.learning_rate = 1e200;
  try {
    fit_gd_classifier(z, toy_y(), opt);
    FAIL() << "expected DivergedError";
  } catch (const DivergedError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDiverged);
    EXPECT_EQ(e.epoch(), 1);
  }
}

TEST(GdBaselineTest, LongTrainingAgreesWithRidgeOnTopChannels) {
  SynthConfig cfg;
  cfg.n_samples = 400;
  cfg.k_classes = 3;
  cfg.layers = {{4, 32, 8, 8}};
  cfg.noise_std = 0.1;
  cfg.seed = 6;
  const SynthDataset d = synth_dataset(cfg);
  const std::vector<int> layers = {4};
  const BroadFeatureMatrix z =
      build_broad_matrix(std::span<const FeatureStack>(d.stacks), layers);
  const Matrix y = labels_of(d);
  const BLSModel bls = fit_bls(z, y, {});
  GDOptions opt;
  opt.epochs = 2000;
  opt.learning_rate = 2.0;
  const GDClassifier gd = fit_gd_classifier(z.data, y, opt);
  const int top = cfg.relevant_channels_per_class;
  for (int k = 0; k < cfg.k_classes; ++k) {
    auto a = topk_of(bls.W_broadcam.col(k), top);
    auto b = topk_of(gd.weights.col(k), top);
    std::vector<int> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    EXPECT_GE(common.size(), 1u) << "class " << k;
  }
}

TEST(SubsampleTest, Examples) {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("id" + std::to_string(i));
  EXPECT_EQ(subsample_split(ids, 1.0, 3), ids);
  const auto half = subsample_split(ids, 0.5, 3);
  EXPECT_EQ(half.size(), 5u);
  EXPECT_EQ(std::set<std::string>(half.begin(), half.end()).size(), 5u);
  EXPECT_EQ(subsample_split(ids, 0.5, 3), half);
  for (const auto& id : half) EXPECT_NE(std::find(ids.begin(), ids.end(), id), ids.end());
  // Relative order is kept.
  for (std::size_t i = 1; i < half.size(); ++i) {
    EXPECT_LT(std::find(ids.begin(), ids.end(), half[i - 1]),
              std::find(ids.begin(), ids.end(), half[i]));
  }
  EXPECT_EQ(code_of([&] { subsample_split(ids, 0.0, 1); }), ErrorCode::kOutOfRange);
  EXPECT_EQ(code_of([&] { subsample_split(ids, 0.01, 1); }), ErrorCode::kInvalidArgument);
}

TEST(SubsampleTest, SeedsDrawDifferentSubsets) {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("id" + std::to_string(i));
  std::set<std::vector<std::string>> seen;
  for (std::uint64_t s = 0; s < 10; ++s) seen.insert(subsample_split(ids, 0.2, s));
  EXPECT_EQ(seen.size(), 10u);
}

}  // namespace
}  // namespace broadcam
