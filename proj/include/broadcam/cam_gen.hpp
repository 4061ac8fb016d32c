// cam_gen.hpp - CAM seed generation from channel weights.
//
// For class k the raw map is the sum over selected layers of the bilinearly
// upsampled weighted channel sum of that layer. ReLU is applied once, after
// the cross-layer sum, and each class map is then divided by its maximum.
#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "broadcam/bls_core.hpp"
#include "broadcam/tensor_io.hpp"

namespace broadcam {

// Channel-to-class weights plus the column layout they index into. Both the
// BLS model and the gradient-descent baseline reduce to this.
struct CamWeights {
  Matrix weights;  // D x K
  std::vector<LayerSpan> layer_offsets;

  int num_features() const { return static_cast<int>(weights.rows()); }
  int num_classes() const { return static_cast<int>(weights.cols()); }
  const LayerSpan& span_of(int layer_index) const;
};

CamWeights cam_weights(const BLSModel& model);

struct TargetSize {
  int height = 0;
  int width = 0;
};

CamSeed generate_cam(const FeatureStack& stack, const CamWeights& weights,
                     std::span<const int> layers,
                     std::optional<TargetSize> target_size = std::nullopt);
CamSeed generate_cam(const FeatureStack& stack, const BLSModel& model,
                     std::span<const int> layers,
                     std::optional<TargetSize> target_size = std::nullopt);

// Indices of the k largest entries by signed value, descending; ties go to
// the lower index.
std::vector<int> topk_channels(const Vector& column, int k);

struct TopkCam {
  CamSeed cam;                 // single class map
  std::vector<int> retained;   // channel indices, ascending
};

TopkCam generate_cam_topk(const FeatureStack& stack, const CamWeights& weights,
                          std::span<const int> layers, int class_k, int k,
                          std::optional<TargetSize> target_size = std::nullopt);

// Divide by the maximum; all-zero input stays zero. Negative entries throw.
std::vector<double> normalize_cam(std::span<const double> raw);

// Per-pixel argmax over the classes present in the image, background (0)
// when the winning score is below threshold. Foreground class k maps to label
// k + 1.
SegmentationMask cam_to_mask(const CamSeed& cam, std::span<const std::uint8_t> present_classes,
                             double threshold);

// Bilinear resize of every class map.
CamSeed resize_cam(const CamSeed& cam, int height, int width);

}  // namespace broadcam
