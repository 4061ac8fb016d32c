// eval_metrics.hpp - seed quality metrics (mIoU threshold sweep, FwIoU,
// pixel-pooled mPxAP) and the channel relevance analyses.
//
// Labels: mask value 0 is background, foreground class k (0-based column of
// the label table) is mask value k + 1, 255 is ignored everywhere.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "broadcam/bls_core.hpp"
#include "broadcam/tensor_io.hpp"

namespace broadcam {

// K x K tallies, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return k_; }
  void add(int gt, int pred, std::uint64_t count = 1);
  // Ignore pixels in gt are skipped; gt values >= K throw OutOfRange.
  void accumulate(const SegmentationMask& gt, const SegmentationMask& pred);
  void merge(const ConfusionMatrix& other);

  std::uint64_t at(int gt, int pred) const { return counts_[gt * k_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t gt_count(int k) const;
  std::uint64_t pred_count(int k) const;

  // TP / (TP + FP + FN), 0 when the union is empty.
  std::vector<double> class_iou() const;
  double mean_iou() const;

 private:
  int k_ = 0;
  std::vector<std::uint64_t> counts_;
};

double fwiou(const ConfusionMatrix& confusion);

struct ThresholdResult {
  double threshold = 0.0;
  double mean_iou = 0.0;
  std::vector<double> class_iou;
};

struct MpxapResult {
  std::vector<std::optional<double>> per_class_ap;  // nullopt = no positives
  double mean = 0.0;
  std::vector<int> excluded_classes;
};

struct EvalReport {
  std::vector<ThresholdResult> per_threshold;
  double best_threshold = 0.0;
  double best_miou = 0.0;
  double fwiou = 0.0;           // at best_threshold
  ConfusionMatrix counts;       // at best_threshold
  std::optional<MpxapResult> mpxap;
};

// 0.05, 0.10, ..., 0.95
std::vector<double> default_thresholds();
// "lo:hi:step" or a comma list.
std::vector<double> parse_thresholds(const std::string& text);

// cams and masks are matched by position and must agree on sample_id when
// both carry one. Each CAM is resized to its mask before thresholding.
EvalReport miou_sweep(std::span<const CamSeed> cams, const LabelTable& labels,
                      std::span<const SegmentationMask> masks,
                      std::span<const double> thresholds);

MpxapResult mpxap(std::span<const CamSeed> cams, std::span<const SegmentationMask> masks);

// Area under the precision-recall curve for pooled (score, relevant) pairs;
// tied scores form one operating point.
double average_precision(std::vector<std::pair<float, bool>> scored);

// Sweep plus mPxAP.
EvalReport evaluate_seeds(std::span<const CamSeed> cams, const LabelTable& labels,
                          std::span<const SegmentationMask> masks,
                          std::span<const double> thresholds);

// --- relevance analysis ----------------------------------------------------

// x / max(x) when max > 0, otherwise zeros.
std::vector<double> max_normalize(std::span<const float> map);

// IoU of {map >= threshold} (after resizing to the mask) with {gt == label}.
double feature_relevance_iou(std::span<const double> channel_map, int height, int width,
                             const SegmentationMask& mask, int class_label,
                             double activation_threshold = 0.1);

// Mean relevance IoU of every broad-matrix column over the given samples.
std::vector<double> channel_relevances(std::span<const FeatureStack> stacks,
                                       std::span<const SegmentationMask> masks,
                                       std::span<const LayerSpan> layer_offsets, int class_label,
                                       double activation_threshold = 0.1);

struct ChannelRelevance {
  int channel = 0;
  double relevance_iou = 0.0;
  double weight = 0.0;
};

struct RelevanceGroup {
  int size = 0;
  double mean_iou = 0.0;
  double mean_normalized_iou = 0.0;
  int positive_count = 0;
  int negative_count = 0;
};

struct RelevanceReport {
  std::vector<ChannelRelevance> per_channel;  // ranked by relevance, descending
  std::vector<RelevanceGroup> groups;
  double pearson_r = 0.0;
};

double pearson(std::span<const double> a, std::span<const double> b);

RelevanceReport weight_relevance_report(std::span<const double> weights,
                                        std::span<const double> relevances, int n_groups = 16);

nlohmann::json to_json(const EvalReport& report);
nlohmann::json to_json(const RelevanceReport& report);
std::string threshold_curve_csv(const EvalReport& report);
std::string relevance_groups_csv(const RelevanceReport& report);
std::string relevance_channels_csv(const RelevanceReport& report);

}  // namespace broadcam
