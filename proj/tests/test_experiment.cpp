#include "broadcam/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include "broadcam/errors.hpp"
#include "broadcam/model_store.hpp"
#include "test_util.hpp"

namespace broadcam {
namespace {

using testing::code_of;
using testing::TempDir;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthConfig tiny_config() {
  SynthConfig c;
  c.n_samples = 36;
  c.k_classes = 3;
  c.image_height = 16;
  c.image_width = 16;
  c.layers = {{3, 12, 8, 8}, {4, 16, 4, 4}};
  c.seed = 21;
  return c;
}

// 24 train, 8 val, 4 test written under dir; returns the manifest path.
fs::path write_tiny(const fs::path& dir) {
  const SynthConfig cfg = tiny_config();
  const SynthDataset d = synth_dataset(cfg);
  std::map<std::string, std::vector<int>> splits;
  for (int i = 0; i < cfg.n_samples; ++i) {
    splits[i < 24 ? "train" : i < 32 ? "val" : "test"].push_back(i);
  }
  write_dataset(d, cfg, splits, dir);
  return dir / "manifest.json";
}

ExperimentSpec spec_for(const fs::path& manifest, const fs::path& out) {
  ExperimentSpec s;
  s.manifest = manifest;
  s.output_dir = out;
  return s;
}

class ExperimentTest : public ::testing::Test {
 protected:
  void SetUp() override { manifest_ = write_tiny(data_.path()); }
  TempDir data_;
  TempDir out_;
  fs::path manifest_;
};

TEST(ParseTest, LayerLists) {
  EXPECT_EQ(parse_layer_list("3,4"), (std::vector<int>{3, 4}));
  EXPECT_EQ(parse_layer_list("L3+L4"), (std::vector<int>{3, 4}));
  EXPECT_EQ(code_of([] { parse_layer_list("3,3"); }), ErrorCode::kDuplicateLayer);
  const auto sets = parse_layer_sets("L1;L2;L3;L4;L3+L4;L2+L3+L4;L1+L2+L3+L4");
  ASSERT_EQ(sets.size(), 7u);
  EXPECT_EQ(sets[6], (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(layer_set_name({2, 3, 4}), "L2+L3+L4");
  EXPECT_EQ(parse_layer_sets("4;3,4").size(), 2u);
}

TEST(ParseTest, MethodsAndProportions) {
  EXPECT_EQ(parse_method("broadcam"), Method::kBroadCAM);
  EXPECT_EQ(parse_method("gd-baseline"), Method::kGDBaseline);
  EXPECT_EQ(parse_method("gd_baseline"), Method::kGDBaseline);
  EXPECT_EQ(code_of([] { parse_method("cam"); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(default_proportions(),
            (std::vector<double>{0.01, 0.02, 0.05, 0.08, 0.10, 0.20, 0.50, 0.80, 1.00}));
}

TEST(SpecTest, Validation) {
  ExperimentSpec s;
  EXPECT_NO_THROW(s.validate());
  s.proportions = {0.5, 1.5};
  EXPECT_THROW(s.validate(), Error);
  s = ExperimentSpec{};
  s.seeds.clear();
  EXPECT_THROW(s.validate(), Error);
  s = ExperimentSpec{};
  s.proportions = {0.0};
  EXPECT_THROW(s.validate(), Error);
}

TEST(SpecTest, EchoLeavesOutPathsAndThreads) {
  ExperimentSpec a, b;
  a.output_dir = "x";
  a.threads = 1;
  b.output_dir = "y";
  b.threads = 8;
  EXPECT_EQ(a.echo().dump(), b.echo().dump());
  b.lambda = 2.0;
  EXPECT_NE(a.echo().dump(), b.echo().dump());
}

TEST_F(ExperimentTest, FitIsDeterministic) {
  ExperimentSpec s = spec_for(manifest_, out_ / "a");
  const std::string h1 = run_fit(s);
  const std::string first = slurp(out_ / "a" / "model" / "W_broadcam.npy");
  const std::string h2 = run_fit(s);
  EXPECT_EQ(h1, h2);
  EXPECT_EQ(first, slurp(out_ / "a" / "model" / "W_broadcam.npy"));
  s.output_dir = out_ / "b";
  EXPECT_EQ(run_fit(s), h1);
  EXPECT_EQ(slurp(out_ / "a" / "fit.json"), slurp(out_ / "b" / "fit.json"));
  EXPECT_EQ(slurp(out_ / "a" / "model" / "model.json"), slurp(out_ / "b" / "model" / "model.json"));
  s.lambda = 3.0;
  s.output_dir = out_ / "c";
  EXPECT_NE(run_fit(s), h1);
}

TEST_F(ExperimentTest, FitRoundTripsThroughModelStore) {
  ExperimentSpec s = spec_for(manifest_, out_.path());
  run_fit(s);
  const BLSModel m = load_bls_model(out_ / "model");
  EXPECT_EQ(m.num_features(), 28);
  EXPECT_EQ(m.num_classes(), 3);
  EXPECT_EQ(m.layer_offsets, (std::vector<LayerSpan>{{3, 0, 12}, {4, 12, 28}}));
  const StoredModel st = load_model(out_ / "model");
  EXPECT_EQ(st.method, "broadcam");
  EXPECT_EQ(st.weights.weights, m.W_broadcam);
}

TEST_F(ExperimentTest, MissingLayerFileNamesTheSample) {
  fs::remove(data_ / "features" / "s00005.layer4.npy");
  ExperimentSpec s = spec_for(manifest_, out_.path());
  try {
    run_fit(s);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingLayer);
    EXPECT_NE(std::string(e.what()).find("s00005"), std::string::npos) << e.what();
  }
}

TEST_F(ExperimentTest, GdBaselineMetadata) {
  ExperimentSpec s = spec_for(manifest_, out_.path());
  s.methods = {Method::kGDBaseline};
  s.seeds = {7};
  s.gd.epochs = 3;
  s.gd.learning_rate = 0.25;
  run_fit(s);
  const auto meta = nlohmann::json::parse(slurp(out_ / "model" / "model.json"));
  EXPECT_EQ(meta["method"], "gd_baseline");
  EXPECT_EQ(meta["epochs"], 3);
  EXPECT_EQ(meta["learning_rate"], 0.25);
  EXPECT_EQ(meta["seed"], 7);
  const StoredModel st = load_model(out_ / "model");
  EXPECT_EQ(st.method, "gd_baseline");
  EXPECT_EQ(st.weights.num_features(), 28);
}

TEST_F(ExperimentTest, CamAndEvalAgreeWithInMemoryPath) {
  ExperimentSpec s = spec_for(manifest_, out_.path());
  s.thresholds = parse_thresholds("0.1:0.9:0.1");
  run_fit(s);
  run_cam(s, out_ / "model", "val");
  EXPECT_TRUE(fs::exists(out_ / "cams" / "s00024.npy"));
  const EvalReport disk = run_eval(s, out_ / "cams", "val");
  EXPECT_TRUE(fs::exists(out_ / "eval_val.json"));
  EXPECT_TRUE(fs::exists(out_ / "eval_val_curve.csv"));

  const Dataset data = load_dataset(load_manifest(manifest_), s.layers, {"val"});
  const StoredModel st = load_model(out_ / "model");
  const EvalReport mem = evaluate_weights(st.weights, data.split("val"), data.labels, s.layers,
                                          s.thresholds);
  EXPECT_EQ(disk.best_miou, mem.best_miou);
  EXPECT_EQ(disk.fwiou, mem.fwiou);
}

TEST_F(ExperimentTest, BuildZWritesMatrixAndOffsets) {
  ExperimentSpec s = spec_for(manifest_, out_.path());
  run_build_z(s);
  const auto z = nlohmann::json::parse(slurp(out_ / "z.json"));
  EXPECT_EQ(z["layer_offsets"].size(), 2u);
  EXPECT_TRUE(fs::exists(out_ / "Z.npy"));
}

std::size_t count_ok(const TableResult& r) {
  return static_cast<std::size_t>(
      std::count_if(r.rows.begin(), r.rows.end(), [](const TableRow& row) { return row.ok; }));
}

TEST_F(ExperimentTest, GamutRowCounts) {
  ExperimentSpec s = spec_for(manifest_, out_.path());
  s.proportions = {1.0};
  s.eval_splits = {"val"};
  const TableResult one = run_gamut(s);
  EXPECT_EQ(one.rows.size(), 3u);
  EXPECT_EQ(one.failed_cells, 0);

  s.eval_splits = {};
  const TableResult all = run_gamut(s);
  EXPECT_EQ(all.rows.size(), 3u * 3u);  // train, val, test

  s.eval_splits = {"val", "test"};
  s.proportions = {0.5};
  s.seeds = {0, 1};
  s.methods = {Method::kBroadCAM, Method::kGDBaseline};
  const TableResult r = run_gamut(s);
  EXPECT_EQ(r.rows.size(), 2u * 2u * 2u * 3u);
  std::set<std::string> hashes;
  for (const auto& row : r.rows) hashes.insert(row.subset_hash);
  EXPECT_EQ(hashes.size(), 2u);
  EXPECT_TRUE(fs::exists(out_ / "gamut.csv"));
  const auto doc = nlohmann::json::parse(slurp(out_ / "gamut.json"));
  EXPECT_EQ(doc["tool"], "broadcam");
  EXPECT_EQ(doc["rows"].size(), r.rows.size());
  EXPECT_TRUE(doc.contains("input_hash"));
}

TEST_F(ExperimentTest, FailedCellIsIsolated) {
  ExperimentSpec s = spec_for(manifest_, out_.path());
  s.proportions = {0.01, 1.0};  // 1% of 24 samples is empty
  s.seeds = {0, 1};
  s.eval_splits = {"val"};
  const TableResult r = run_gamut(s);
  EXPECT_EQ(r.failed_cells, 2);
  EXPECT_EQ(count_ok(r), 2u * 2u * 1u * 3u - 2u * 1u * 3u);
  EXPECT_EQ(r.rows.size() - count_ok(r), 2u);
  for (const auto& row : r.rows) {
    if (!row.ok) {
      EXPECT_EQ(row.proportion, 0.01);
      EXPECT_EQ(row.metric, "*");
      EXPECT_FALSE(row.error.empty());
    }
  }
  const std::string csv = slurp(out_ / "gamut.csv");
  EXPECT_NE(csv.find(",failed,"), std::string::npos);
}

TEST_F(ExperimentTest, ThreadCountDoesNotChangeTables) {
  ExperimentSpec s = spec_for(manifest_, out_ / "t1");
  s.proportions = {0.25, 0.5, 1.0};
  s.seeds = {0, 1, 2};
  s.methods = {Method::kBroadCAM, Method::kGDBaseline};
  s.threads = 1;
  run_gamut(s);
  s.output_dir = out_ / "t8";
  s.threads = 8;
  run_gamut(s);
  EXPECT_EQ(slurp(out_ / "t1" / "gamut.csv"), slurp(out_ / "t8" / "gamut.csv"));
  EXPECT_EQ(slurp(out_ / "t1" / "gamut.json"), slurp(out_ / "t8" / "gamut.json"));
}

TEST_F(ExperimentTest, AblationGroups) {
  ExperimentSpec s = spec_for(manifest_, out_.path());
  s.proportions = {1.0};
  s.eval_splits = {"val"};
  const TableResult r = run_ablation(s, {{4}, {3, 4}});
  std::set<std::string> groups;
  for (const auto& row : r.rows) groups.insert(row.layer_set);
  EXPECT_EQ(groups, (std::set<std::string>{"L4", "L3+L4"}));
  EXPECT_EQ(r.rows.size(), 6u);
  EXPECT_TRUE(fs::exists(out_ / "ablation.csv"));
  EXPECT_EQ(code_of([&] { run_ablation(s, {{4, 4}}); }), ErrorCode::kDuplicateLayer);
}

TEST_F(ExperimentTest, AnalysisFullTopkMatchesUnrestrictedCam) {
  ExperimentSpec s = spec_for(manifest_, out_.path());
  run_fit(s);
  const AnalysisResult r = run_analysis(s, out_ / "model", "val", {}, 1, {20, 200, 2000});
  EXPECT_EQ(r.ks, (std::vector<int>{20, 28}));
  EXPECT_EQ(r.report.groups.size(), 16u);

  const StoredModel st = load_model(out_ / "model");
  const Dataset data = load_dataset(load_manifest(manifest_), s.layers, {"val"});
  const auto& val = data.split("val");
  const auto samples = nlohmann::json::parse(slurp(out_ / "relevance.json"))["samples"];
  ASSERT_FALSE(samples.empty());
  std::size_t idx = 0;
  for (const auto& id_json : samples) {
    const std::string id = id_json;
    const auto it = std::find(val.ids.begin(), val.ids.end(), id);
    ASSERT_NE(it, val.ids.end());
    const CamSeed full = generate_cam(val.stacks[it - val.ids.begin()], st.weights, s.layers);
    const TopkCam& t20 = r.topk[idx++];
    const TopkCam& all = r.topk[idx++];
    EXPECT_EQ(all.retained.size(), 28u);
    EXPECT_TRUE(std::includes(all.retained.begin(), all.retained.end(), t20.retained.begin(),
                              t20.retained.end()));
    const auto a = all.cam.class_map(0);
    const auto b = full.class_map(1);
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
    const auto side = nlohmann::json::parse(
        slurp(out_ / "topk" / (id + ".class1.top20.json")));
    EXPECT_EQ(side["retained_channel_indices"].get<std::vector<int>>(), t20.retained);
  }
}

// --- command line ------------------------------------------------------------

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd =
      env + " " + std::string(BROADCAM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(CliTest, EndToEndWithExitCodes) {
  TempDir dir;
  const std::string data = (dir / "data").string();
  const std::string manifest = (dir / "data" / "manifest.json").string();
  ASSERT_EQ(run_cli("synth --out " + data +
                    " --samples 30 --val 10 --classes 2 --image-size 16x16"
                    " --layer 3:8:8x8 --layer 4:12:4x4 --seed 4"),
            0);
  ASSERT_TRUE(fs::exists(manifest));
  const std::string out = (dir / "run").string();
  EXPECT_EQ(run_cli("fit --manifest " + manifest + " --out " + out), 0);
  EXPECT_EQ(run_cli("cam --manifest " + manifest + " --model " + out + "/model --split val --out " +
                    out),
            0);
  EXPECT_EQ(run_cli("eval --manifest " + manifest + " --cams " + out + "/cams --split val --out " +
                    out),
            0);
  EXPECT_TRUE(fs::exists(dir / "run" / "eval_val.json"));
  EXPECT_EQ(run_cli("analyze --manifest " + manifest + " --model " + out +
                    "/model --split val --class 0 --topk 5,2000 --out " + out + "/an"),
            0);
  EXPECT_TRUE(fs::exists(dir / "run" / "an" / "relevance_groups.csv"));

  const std::string gamut = "gamut --manifest " + manifest +
                            " --proportions 0.5,1 --seeds 0,1 --method broadcam,gd-baseline";
  EXPECT_EQ(run_cli(gamut + " --out " + out + "/g1", "BROADCAM_THREADS=1"), 0);
  EXPECT_EQ(run_cli(gamut + " --out " + out + "/g8", "BROADCAM_THREADS=8"), 0);
  EXPECT_EQ(slurp(dir / "run" / "g1" / "gamut.csv"), slurp(dir / "run" / "g8" / "gamut.csv"));
  EXPECT_EQ(slurp(dir / "run" / "g1" / "gamut.json"), slurp(dir / "run" / "g8" / "gamut.json"));

  EXPECT_EQ(run_cli("gamut --manifest " + manifest + " --proportions 0.01,1 --out " + out + "/gp"),
            2);
  EXPECT_EQ(run_cli("ablate --manifest " + manifest + " --layer-sets '4;3,4' --proportions 1 --out " +
                    out + "/ab"),
            0);
  EXPECT_EQ(run_cli("ablate --manifest " + manifest + " --layer-sets '4,4' --out " + out + "/ab2"),
            1);
  EXPECT_EQ(run_cli("fit --manifest " + (dir / "nope.json").string() + " --out " + out), 1);
}

}  // namespace
}  // namespace broadcam
