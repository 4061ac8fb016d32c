// synth_baseline.hpp - seeded synthetic datasets with planted channel
// relevance, and the outcome-based baseline (a linear classifier on GAP
// features trained by gradient descent, whose weights are used as CAM
// weights the way the original CAM does).
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "broadcam/bls_core.hpp"
#include "broadcam/tensor_io.hpp"

namespace broadcam {

struct SynthLayer {
  int index = 1;
  int channels = 16;
  int height = 8;
  int width = 8;
  // Multipliers on the dataset-wide relevance strength / noise level. A layer
  // with relevance_scale == 0 carries no planted channels.
  double relevance_scale = 1.0;
  double noise_scale = 1.0;
};

struct SynthConfig {
  int n_samples = 100;
  int k_classes = 4;
  int image_height = 32;
  int image_width = 32;
  std::vector<SynthLayer> layers = {SynthLayer{}};
  int relevant_channels_per_class = 2;
  double noise_std = 0.5;
  double relevance_strength = 1.0;
  double distractor_fraction = 0.25;  // of the non-planted channels
  double class_probability = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  int total_channels() const;
};

// Ground-truth relevance in broad-matrix column order: entry (c, k) is the
// layer's relevance_scale when channel c was planted for class k, else 0.
struct RelevanceTable {
  std::vector<LayerSpan> layer_offsets;
  Matrix values;                                  // D x K
  std::vector<std::vector<int>> planted;          // per class, column indices
};

struct SynthDataset {
  std::vector<std::string> sample_ids;
  std::vector<FeatureStack> stacks;
  std::vector<SegmentationMask> masks;
  LabelTable labels;
  RelevanceTable relevance;
};

SynthDataset synth_dataset(const SynthConfig& config);

// Writes features/, masks/, labels.csv, relevance.csv and manifest.json under
// `dir`. `splits` maps split name to a list of indices into the dataset.
void write_dataset(const SynthDataset& data, const SynthConfig& config,
                   const std::map<std::string, std::vector<int>>& splits,
                   const std::filesystem::path& dir);

struct GDClassifier {
  Matrix weights;  // D x K
  RowVector bias;  // K
  std::vector<std::pair<int, double>> training_log;  // (epoch, loss before the update)
};

struct GDOptions {
  int epochs = 5;
  double learning_rate = 1.0;
  double init_std = 0.01;
  std::uint64_t seed = 0;
};

// Full-batch gradient descent on the mean per-class sigmoid cross-entropy.
// Throws DivergedError if the loss becomes non-finite.
GDClassifier fit_gd_classifier(const Matrix& Z, const Matrix& Y, const GDOptions& options);

// Mean per-class sigmoid cross-entropy of Z * W + b against Y.
double sigmoid_cross_entropy(const Matrix& Z, const Matrix& Y, const Matrix& W,
                             const RowVector& b);

// Uniform subset without replacement of size round(proportion * N), returned
// in the original relative order.
std::vector<std::string> subsample_split(std::span<const std::string> sample_ids,
                                         double proportion, std::uint64_t seed);

}  // namespace broadcam
