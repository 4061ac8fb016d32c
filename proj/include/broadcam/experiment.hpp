// experiment.hpp - pipeline runs behind the CLI subcommands: Z building,
// fitting, CAM export, evaluation, the training-proportion gamut, the layer
// ablation and the relevance analysis.
//
// Every run writes a JSON header (tool version, echoed settings, input hash)
// next to its outputs. Runs are deterministic: the same settings and inputs
// give byte-identical files regardless of the worker count.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "broadcam/bls_core.hpp"
#include "broadcam/cam_gen.hpp"
#include "broadcam/eval_metrics.hpp"
#include "broadcam/synth_baseline.hpp"
#include "broadcam/tensor_io.hpp"

namespace broadcam {

inline constexpr const char* kToolVersion = "1.0.0";

enum class Method { kBroadCAM, kGDBaseline };

std::string_view to_string(Method m);
Method parse_method(std::string_view name);

// 0.01, 0.02, 0.05, 0.08, 0.10, 0.20, 0.50, 0.80, 1.00
std::vector<double> default_proportions();
// "3,4" -> {3,4}; rejects duplicates with DuplicateLayer.
std::vector<int> parse_layer_list(const std::string& text);
// "4;3,4;2,3,4" or "L4;L3+L4" -> sets
std::vector<std::vector<int>> parse_layer_sets(const std::string& text);
std::string layer_set_name(const std::vector<int>& layers);  // "L3+L4"

struct ExperimentSpec {
  std::filesystem::path manifest;
  std::vector<int> layers = {3, 4};
  double lambda = 1.0;
  int enhance_nodes = 0;  // 0 = auto (one per class)
  Activation activation = Activation::kIdentity;
  std::vector<double> thresholds = default_thresholds();
  std::vector<double> proportions = default_proportions();
  std::vector<std::uint64_t> seeds = {0};
  std::vector<Method> methods = {Method::kBroadCAM};
  GDOptions gd;                         // seed is overridden per cell
  std::string train_split = "train";
  std::vector<std::string> eval_splits;  // empty = every split in the manifest
  std::filesystem::path output_dir = "out";
  int threads = 1;

  void validate() const;
  // Settings that determine results (no paths or thread count).
  nlohmann::json echo() const;
};

// BROADCAM_THREADS if set and positive, otherwise `fallback`.
int threads_from_env(int fallback = 1);

// Loaded samples of one split, in manifest order.
struct SplitData {
  std::vector<std::string> ids;
  std::vector<FeatureStack> stacks;
  std::vector<SegmentationMask> masks;
};

struct Dataset {
  std::vector<std::string> class_names;
  LabelTable labels;
  std::map<std::string, SplitData> splits;
  std::string input_hash;

  const SplitData& split(const std::string& name) const;
};

Dataset load_dataset(const Manifest& manifest, const std::vector<int>& layers,
                     const std::vector<std::string>& split_names, bool load_masks = true);
Dataset dataset_from_synth(const SynthDataset& data,
                           const std::map<std::string, std::vector<int>>& splits);

struct FittedWeights {
  Method method = Method::kBroadCAM;
  CamWeights weights;
  std::optional<BLSModel> bls;
  std::optional<GDClassifier> gd;
};

FittedWeights fit_weights(Method method, std::span<const FeatureStack* const> train,
                          const LabelTable& labels, const std::vector<int>& layers,
                          const ExperimentSpec& spec, std::uint64_t seed);

std::vector<CamSeed> generate_split_cams(const CamWeights& weights, const SplitData& split,
                                         const std::vector<int>& layers);

EvalReport evaluate_weights(const CamWeights& weights, const SplitData& split,
                            const LabelTable& labels, const std::vector<int>& layers,
                            std::span<const double> thresholds);

// Seed for the subset drawn at (proportion, seed).
std::uint64_t subset_seed(double proportion, std::uint64_t seed);

struct TableRow {
  std::string method;
  std::string layer_set;
  double proportion = 1.0;
  std::uint64_t seed = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
  std::string subset_hash;
  bool ok = true;
  std::string error;
};

struct TableResult {
  std::vector<TableRow> rows;
  int failed_cells = 0;
};

std::string table_csv(const std::vector<TableRow>& rows);

// Metric names emitted per (cell, split).
const std::vector<std::string>& table_metrics();

// --- runs ------------------------------------------------------------------

// Writes <out>/Z.npy and <out>/z.json.
void run_build_z(const ExperimentSpec& spec);
// Fits on the train split (or gd baseline per spec.methods[0]); writes
// <out>/model/ and <out>/fit.json. Returns the model hash.
std::string run_fit(const ExperimentSpec& spec);
// Writes <out>/cams/<id>.npy for every sample of the given split.
void run_cam(const ExperimentSpec& spec, const std::filesystem::path& model_dir,
             const std::string& split);
// Evaluates saved cams; writes <out>/eval_<split>.json and a threshold CSV.
EvalReport run_eval(const ExperimentSpec& spec, const std::filesystem::path& cams_dir,
                    const std::string& split);

TableResult gamut_table(const Dataset& data, const ExperimentSpec& spec);
TableResult ablation_table(const Dataset& data, const ExperimentSpec& spec,
                           const std::vector<std::vector<int>>& layer_sets);

// Disk-backed versions; both write <name>.csv and <name>.json atomically.
TableResult run_gamut(const ExperimentSpec& spec);
TableResult run_ablation(const ExperimentSpec& spec,
                         const std::vector<std::vector<int>>& layer_sets);

struct AnalysisResult {
  RelevanceReport report;
  std::vector<TopkCam> topk;  // per (sample, k), sample-major
  std::vector<int> ks;        // clipped k values actually used
};

AnalysisResult analyze_weights(const CamWeights& weights, const SplitData& split,
                               const std::vector<int>& layers, int class_k,
                               std::vector<int> topk_list, int n_groups = 16,
                               double activation_threshold = 0.1);
AnalysisResult run_analysis(const ExperimentSpec& spec, const std::filesystem::path& model_dir,
                            const std::string& split, const std::vector<std::string>& sample_ids,
                            int class_k, const std::vector<int>& topk_list, int n_groups = 16);

}  // namespace broadcam
